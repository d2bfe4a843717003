//! Discrete variance-preserving forward process.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Linear-β schedule parameters. `beta_start`/`beta_end` are quoted for a
/// 1000-step process and rescaled by `1000 / steps`, so the total noise
/// injected stays the same for any `steps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

/// `alpha_bar[t]` for `t = 0..=T`, with `alpha_bar[0] = 1` (clean data).
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    config: ScheduleConfig,
    betas: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(config: ScheduleConfig) -> Result<Self> {
        let t_max = config.steps;
        if t_max < 2 {
            return Err(Error::config("schedule.steps", "need at least 2 steps"));
        }
        if !(config.beta_start > 0.0 && config.beta_end > config.beta_start) {
            return Err(Error::config(
                "schedule.beta_start",
                "need 0 < beta_start < beta_end",
            ));
        }
        let factor = 1000.0 / t_max as f64;
        let (b0, b1) = (config.beta_start * factor, config.beta_end * factor);
        if b1 >= 1.0 {
            return Err(Error::config(
                "schedule.beta_end",
                format!("rescaled beta_end {b1} must stay below 1"),
            ));
        }
        let betas: Vec<f64> = (0..t_max)
            .map(|i| b0 + (b1 - b0) * i as f64 / (t_max - 1) as f64)
            .collect();
        let mut alpha_bar = Vec::with_capacity(t_max + 1);
        alpha_bar.push(1.0);
        for b in &betas {
            let prev = *alpha_bar.last().unwrap();
            alpha_bar.push(prev * (1.0 - b));
        }
        let sched = Self {
            config,
            betas,
            alpha_bar,
        };
        if sched.alpha_bar[t_max] > 0.01 {
            return Err(Error::config(
                "schedule",
                format!(
                    "alpha_bar_T = {} does not reach pure noise (must be <= 0.01)",
                    sched.alpha_bar[t_max]
                ),
            ));
        }
        Ok(sched)
    }

    pub fn config(&self) -> ScheduleConfig {
        self.config
    }

    /// Number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.config.steps
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        (1.0 - self.alpha_bar[t]).sqrt()
    }

    /// `β_t` for `t` in `1..=T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t > self.steps() {
            return Err(Error::InvalidArgument(format!(
                "timestep {t} outside 0..={}",
                self.steps()
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_schedule_invariants() {
        let s = NoiseSchedule::new(ScheduleConfig::default()).unwrap();
        assert_eq!(s.steps(), 200);
        assert!(s.alpha_bar(0) >= 0.999);
        assert!(s.alpha_bar(200) <= 0.01);
        for t in 1..=200 {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            let sig = s.sigma(t);
            assert!((s.alpha_bar(t) + sig * sig - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn long_schedule_keeps_total_noise() {
        let a = NoiseSchedule::new(ScheduleConfig::default()).unwrap();
        let b = NoiseSchedule::new(ScheduleConfig {
            steps: 10_000,
            ..ScheduleConfig::default()
        })
        .unwrap();
        let (la, lb) = (a.alpha_bar(200).ln(), b.alpha_bar(10_000).ln());
        assert!(((la - lb) / lb).abs() < 0.05, "{la} vs {lb}");
    }

    #[test]
    fn too_short_schedule_rejected() {
        let err = NoiseSchedule::new(ScheduleConfig {
            steps: 200,
            beta_start: 1e-5,
            beta_end: 1e-4,
        })
        .unwrap_err();
        assert!(matches!(err, Error::Config { .. }));
    }
}
