//! ε-prediction training with condition dropout and Adam.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::denoiser::{BlockDenoiser, Cond, ModelConfig};
use crate::error::{Error, Result};
use crate::gmm::{posterior_mean_denoiser, GaussianMixture};
use crate::num::Rng;
use crate::schedule::NoiseSchedule;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub cond_drop_prob: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 20_000,
            batch_size: 256,
            learning_rate: 1e-3,
            cond_drop_prob: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            log_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let checks = [
            ("train.batch_size", self.batch_size > 0, "must be positive"),
            (
                "train.learning_rate",
                self.learning_rate > 0.0 && self.learning_rate.is_finite(),
                "must be positive",
            ),
            (
                "train.cond_drop_prob",
                (0.0..1.0).contains(&self.cond_drop_prob),
                "must lie in [0, 1)",
            ),
            ("train.beta1", (0.0..1.0).contains(&self.beta1), "must lie in [0, 1)"),
            ("train.beta2", (0.0..1.0).contains(&self.beta2), "must lie in [0, 1)"),
            ("train.eps", self.eps > 0.0, "must be positive"),
            ("train.log_every", self.log_every > 0, "must be positive"),
        ];
        for (key, ok, msg) in checks {
            if !ok {
                return Err(Error::config(key, msg));
            }
        }
        Ok(())
    }
}

/// Mean training loss over each logging window, keyed by the window's last step.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossCurve {
    pub points: Vec<(usize, f64)>,
}

impl LossCurve {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,loss\n");
        for (step, loss) in &self.points {
            let _ = writeln!(s, "{step},{loss}");
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Fresh network from the `init` stream of `seed`.
pub fn init_model(config: ModelConfig, seed: u64) -> Result<BlockDenoiser> {
    BlockDenoiser::new(config, &mut Rng::new(seed).split("init"))
}

fn draw_component(gmm: &GaussianMixture, rng: &mut Rng) -> usize {
    let u = rng.uniform();
    let mut acc = 0.0;
    let comps = gmm.components();
    for (k, c) in comps.iter().enumerate() {
        acc += c.weight;
        if u < acc {
            return k;
        }
    }
    (0..comps.len()).rev().find(|&k| comps[k].weight > 0.0).unwrap_or(0)
}

/// A batch of noisy inputs with the noise that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisyBatch {
    pub xs: Vec<f64>,
    pub ts: Vec<usize>,
    pub conds: Vec<Cond>,
    pub eps: Vec<f64>,
}

impl NoisyBatch {
    /// `x_t = √ᾱ_t x_0 + σ_t ε` with `x_0` from `gmm`, `t` uniform on `1..=T`,
    /// and the label replaced by the null token with probability `drop_prob`.
    pub fn draw(gmm: &GaussianMixture, sched: &NoiseSchedule, n: usize, drop_prob: f64, rng: &mut Rng) -> Self {
        let dim = gmm.dim();
        let mut b = NoisyBatch {
            xs: Vec::with_capacity(n * dim),
            ts: Vec::with_capacity(n),
            conds: Vec::with_capacity(n),
            eps: Vec::with_capacity(n * dim),
        };
        for _ in 0..n {
            let k = draw_component(gmm, rng);
            let c = &gmm.components()[k];
            let dropped = drop_prob > 0.0 && rng.uniform() < drop_prob;
            let t = 1 + rng.below(sched.steps() as u64) as usize;
            let (a, s) = (sched.alpha_bar(t).sqrt(), sched.sigma(t));
            for d in 0..dim {
                let x0 = c.mean[d] + c.variance[d].sqrt() * rng.gauss();
                let e = rng.gauss();
                b.xs.push(a * x0 + s * e);
                b.eps.push(e);
            }
            b.ts.push(t);
            b.conds.push(if dropped { Cond::Null } else { Cond::Class(k) });
        }
        b
    }

    pub fn len(&self) -> usize {
        self.ts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ts.is_empty()
    }
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    step: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }

    fn update(&mut self, params: &mut [f64], grad: &[f64], cfg: &TrainConfig) {
        self.step += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.step);
        let bc2 = 1.0 - cfg.beta2.powi(self.step);
        for (((p, g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            *p -= cfg.learning_rate * (*m / bc1) / ((*v / bc2).sqrt() + cfg.eps);
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub net: BlockDenoiser,
    pub loss_curve: LossCurve,
}

/// Minimizes `mean ‖ε̂(x_t, t, c) − ε‖²` over fresh batches from `gmm`.
pub fn train(gmm: &GaussianMixture, mut net: BlockDenoiser, sched: &NoiseSchedule, cfg: &TrainConfig) -> Result<TrainOutput> {
    cfg.validate()?;
    let mc = *net.config();
    if mc.dim != gmm.dim() || mc.num_classes != gmm.num_components() {
        return Err(Error::Shape(format!(
            "network expects dim {} with {} classes, data has dim {} with {} components",
            mc.dim,
            mc.num_classes,
            gmm.dim(),
            gmm.num_components()
        )));
    }
    let mut rng = Rng::new(cfg.seed).split("train");
    let mut adam = Adam::new(net.param_count());
    let mut curve = LossCurve::default();
    let mut window = 0.0;
    for step in 1..=cfg.steps {
        let batch = NoisyBatch::draw(gmm, sched, cfg.batch_size, cfg.cond_drop_prob, &mut rng);
        let (out, cache) = net.forward_train(&batch.xs, &batch.ts, &batch.conds, None)?;
        let n = out.len() as f64;
        let mut loss = 0.0;
        let d_out: Vec<f64> = out
            .iter()
            .zip(&batch.eps)
            .map(|(o, e)| {
                let r = o - e;
                loss += r * r;
                2.0 * r / n
            })
            .collect();
        loss /= n;
        if !loss.is_finite() {
            return Err(Error::Divergence(format!("training loss became {loss} at step {step}")));
        }
        let grad = net.backward(&cache, &d_out)?;
        adam.update(net.params_mut(), &grad.0, cfg);
        window += loss;
        if step % cfg.log_every == 0 {
            curve.points.push((step, window / cfg.log_every as f64));
            window = 0.0;
        }
    }
    Ok(TrainOutput { net, loss_curve: curve })
}

/// Trains a deliberately weaker network: `hidden · capacity_factor` units for
/// `steps · step_factor` steps, from the same seed.
pub fn train_weak(
    gmm: &GaussianMixture,
    sched: &NoiseSchedule,
    model: ModelConfig,
    cfg: &TrainConfig,
    capacity_factor: f64,
    step_factor: f64,
) -> Result<TrainOutput> {
    for (key, f) in [("train.weak_capacity_factor", capacity_factor), ("train.weak_step_factor", step_factor)] {
        if !(f > 0.0 && f <= 1.0) {
            return Err(Error::config(key, format!("{f} must lie in (0, 1]")));
        }
    }
    let weak_model = ModelConfig {
        hidden: ((model.hidden as f64 * capacity_factor).round() as usize).max(1),
        ..model
    };
    let weak_cfg = TrainConfig {
        steps: (cfg.steps as f64 * step_factor).round() as usize,
        ..*cfg
    };
    train(gmm, init_model(weak_model, cfg.seed)?, sched, &weak_cfg)
}

/// Fixed held-out probes; conditions are always the true class.
pub fn probe_set(gmm: &GaussianMixture, sched: &NoiseSchedule, n: usize, seed: u64) -> NoisyBatch {
    NoisyBatch::draw(gmm, sched, n, 0.0, &mut Rng::new(seed).split("probes"))
}

/// Mean squared error of a network's noise predictions on probes.
pub fn probe_mse(net: &BlockDenoiser, probes: &NoisyBatch) -> Result<f64> {
    let out = net.forward_rows(&probes.xs, &probes.ts, &probes.conds, None)?;
    Ok(out.iter().zip(&probes.eps).map(|(o, e)| (o - e) * (o - e)).sum::<f64>() / out.len() as f64)
}

/// The same error for the exact posterior-mean predictor (the Bayes floor).
pub fn bayes_floor_mse(gmm: &GaussianMixture, sched: &NoiseSchedule, probes: &NoisyBatch) -> Result<f64> {
    let dim = gmm.dim();
    let mut total = 0.0;
    for i in 0..probes.len() {
        let law = match probes.conds[i] {
            Cond::Class(k) => gmm.conditional(k)?,
            Cond::Null => gmm.clone(),
        };
        let x = &probes.xs[i * dim..(i + 1) * dim];
        let pred = posterior_mean_denoiser(&law, sched, probes.ts[i], x)?;
        for (p, e) in pred.iter().zip(&probes.eps[i * dim..(i + 1) * dim]) {
            total += (p - e) * (p - e);
        }
    }
    Ok(total / probes.eps.len() as f64)
}
