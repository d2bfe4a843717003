//! Guidance combinators in noise-prediction space.
//!
//! With `u = ε̂(x|∅)`, `c = ε̂(x|c)` and `w = ε̂(x|c; m)` (a masked sub-network):
//!
//! ```text
//! cfg       = u + λ(c − u)
//! s2        = cfg − ω·w
//! naive_s2  = cfg − (ω/N)·Σ_i w_i
//! autoguide = w_weak + g(c − w_weak)       (g defaults to 2)
//! ```
//!
//! The S² forms subtract `ω·w` as is; their coefficients sum to `1 − ω`.

use serde::{Deserialize, Serialize};

use crate::denoiser::{drop_count_for, BlockMask, Cond};
use crate::error::{Error, Result};
use crate::sampler::NoisePredictor;

pub const DEFAULT_AG_SCALE: f64 = 2.0;

/// How many blocks a stochastic mask drops: `count` when set, otherwise
/// derived from `ratio`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DropRule {
    pub ratio: f64,
    pub count: Option<usize>,
}

impl DropRule {
    pub fn ratio(ratio: f64) -> Self {
        Self { ratio, count: None }
    }

    pub fn count(count: usize) -> Self {
        Self {
            ratio: 0.0,
            count: Some(count),
        }
    }

    pub fn dropped(&self, blocks: usize) -> usize {
        self.count.unwrap_or_else(|| drop_count_for(blocks, self.ratio))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum GuidanceKind {
    Unguided,
    Cfg {
        lambda: f64,
    },
    Autoguidance {
        weak_ref: String,
        ag_scale: f64,
    },
    NaiveS2 {
        lambda: f64,
        omega: f64,
        n_subnets: usize,
        drop: DropRule,
        /// Use every `C(B, k)` mask each step instead of `n_subnets` random ones.
        exhaustive: bool,
    },
    S2 {
        lambda: f64,
        omega: f64,
        drop: DropRule,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawGuidance", into = "RawGuidance")]
pub struct GuidanceSpec {
    pub name: String,
    pub kind: GuidanceKind,
}

impl GuidanceSpec {
    pub fn unguided() -> Self {
        Self::named("unguided", GuidanceKind::Unguided)
    }

    pub fn cfg(lambda: f64) -> Self {
        Self::named("cfg", GuidanceKind::Cfg { lambda })
    }

    pub fn s2(lambda: f64, omega: f64, drop: DropRule) -> Self {
        Self::named("s2", GuidanceKind::S2 { lambda, omega, drop })
    }

    pub fn naive_s2(lambda: f64, omega: f64, n_subnets: usize, drop: DropRule) -> Self {
        Self::named(
            "naive_s2",
            GuidanceKind::NaiveS2 {
                lambda,
                omega,
                n_subnets,
                drop,
                exhaustive: false,
            },
        )
    }

    pub fn naive_s2_exhaustive(lambda: f64, omega: f64, drop: DropRule) -> Self {
        Self::named(
            "naive_s2",
            GuidanceKind::NaiveS2 {
                lambda,
                omega,
                n_subnets: 1,
                drop,
                exhaustive: true,
            },
        )
    }

    pub fn autoguidance(weak_ref: &str, ag_scale: f64) -> Self {
        Self::named(
            "autoguidance",
            GuidanceKind::Autoguidance {
                weak_ref: weak_ref.into(),
                ag_scale,
            },
        )
    }

    pub fn named(name: &str, kind: GuidanceKind) -> Self {
        Self {
            name: name.into(),
            kind,
        }
    }

    pub fn with_name(mut self, name: &str) -> Self {
        self.name = name.into();
        self
    }

    pub fn kind_name(&self) -> &'static str {
        match self.kind {
            GuidanceKind::Unguided => "unguided",
            GuidanceKind::Cfg { .. } => "cfg",
            GuidanceKind::Autoguidance { .. } => "autoguidance",
            GuidanceKind::NaiveS2 { .. } => "naive_s2",
            GuidanceKind::S2 { .. } => "s2",
        }
    }

    pub fn validate(&self) -> Result<()> {
        RawGuidance::from(self.clone()).parse("guidance").map(|_| ())
    }

    /// Sum of the coefficients multiplying denoiser outputs.
    pub fn coefficient_sum(&self) -> f64 {
        match self.kind {
            GuidanceKind::NaiveS2 { omega, .. } | GuidanceKind::S2 { omega, .. } => 1.0 - omega,
            _ => 1.0,
        }
    }
}

/// Flat serialized form of [`GuidanceSpec`], e.g. in TOML:
///
/// ```toml
/// [[guidance]]
/// name = "s2"
/// kind = "s2"
/// lambda = 3.0
/// omega = 0.25
/// drop_ratio = 0.1
/// ```
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawGuidance {
    pub name: String,
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub omega: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_subnets: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub drop_ratio: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub drop_count: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exhaustive: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weak_ref: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ag_scale: Option<f64>,
}

impl RawGuidance {
    /// Validates and converts; error keys are prefixed with `prefix`.
    pub fn parse(&self, prefix: &str) -> Result<GuidanceSpec> {
        let key = |f: &str| format!("{prefix}.{f}");
        let present: [(&str, bool); 8] = [
            ("lambda", self.lambda.is_some()),
            ("omega", self.omega.is_some()),
            ("n_subnets", self.n_subnets.is_some()),
            ("drop_ratio", self.drop_ratio.is_some()),
            ("drop_count", self.drop_count.is_some()),
            ("exhaustive", self.exhaustive.is_some()),
            ("weak_ref", self.weak_ref.is_some()),
            ("ag_scale", self.ag_scale.is_some()),
        ];
        let (required, optional): (&[&str], &[&str]) = match self.kind.as_str() {
            "unguided" => (&[], &[]),
            "cfg" => (&["lambda"], &[]),
            "autoguidance" => (&["weak_ref"], &["ag_scale"]),
            "s2" => (&["lambda", "omega"], &["drop_ratio", "drop_count"]),
            "naive_s2" => (
                &["lambda", "omega"],
                &["n_subnets", "drop_ratio", "drop_count", "exhaustive"],
            ),
            other => {
                return Err(Error::config(
                    key("kind"),
                    format!("unknown guidance kind `{other}` (expected unguided, cfg, autoguidance, s2 or naive_s2)"),
                ))
            }
        };
        for (field, is_set) in present {
            if required.contains(&field) && !is_set {
                return Err(Error::config(key(field), format!("required for kind `{}`", self.kind)));
            }
            if is_set && !required.contains(&field) && !optional.contains(&field) {
                return Err(Error::config(key(field), format!("not allowed for kind `{}`", self.kind)));
            }
        }
        if self.name.is_empty() {
            return Err(Error::config(key("name"), "must not be empty"));
        }
        let lambda = self.lambda.unwrap_or(1.0);
        if !lambda.is_finite() {
            return Err(Error::config(key("lambda"), "must be finite"));
        }
        let omega = self.omega.unwrap_or(0.0);
        if !(omega.is_finite() && omega >= 0.0) {
            return Err(Error::config(key("omega"), "must be finite and >= 0"));
        }
        let ratio = self.drop_ratio.unwrap_or(0.1);
        if !(0.0..1.0).contains(&ratio) {
            return Err(Error::config(key("drop_ratio"), "must lie in [0, 1)"));
        }
        if self.drop_count == Some(0) {
            return Err(Error::config(key("drop_count"), "must be at least 1"));
        }
        let drop = DropRule {
            ratio,
            count: self.drop_count,
        };
        let kind = match self.kind.as_str() {
            "unguided" => GuidanceKind::Unguided,
            "cfg" => GuidanceKind::Cfg { lambda },
            "autoguidance" => {
                let ag_scale = self.ag_scale.unwrap_or(DEFAULT_AG_SCALE);
                if !ag_scale.is_finite() {
                    return Err(Error::config(key("ag_scale"), "must be finite"));
                }
                GuidanceKind::Autoguidance {
                    weak_ref: self.weak_ref.clone().unwrap_or_default(),
                    ag_scale,
                }
            }
            "s2" => GuidanceKind::S2 { lambda, omega, drop },
            _ => {
                let exhaustive = self.exhaustive.unwrap_or(false);
                let n_subnets = self.n_subnets.unwrap_or(1);
                if n_subnets == 0 {
                    return Err(Error::config(key("n_subnets"), "must be at least 1"));
                }
                if exhaustive && self.n_subnets.is_some() {
                    return Err(Error::config(key("n_subnets"), "implied by `exhaustive = true`; remove it"));
                }
                GuidanceKind::NaiveS2 {
                    lambda,
                    omega,
                    n_subnets,
                    drop,
                    exhaustive,
                }
            }
        };
        Ok(GuidanceSpec {
            name: self.name.clone(),
            kind,
        })
    }
}

impl TryFrom<RawGuidance> for GuidanceSpec {
    type Error = Error;

    fn try_from(raw: RawGuidance) -> Result<Self> {
        raw.parse("guidance")
    }
}

impl From<GuidanceSpec> for RawGuidance {
    fn from(spec: GuidanceSpec) -> Self {
        let mut raw = RawGuidance {
            name: spec.name.clone(),
            kind: spec.kind_name().into(),
            ..Default::default()
        };
        let set_drop = |raw: &mut RawGuidance, d: DropRule| match d.count {
            Some(k) => raw.drop_count = Some(k),
            None => raw.drop_ratio = Some(d.ratio),
        };
        match spec.kind {
            GuidanceKind::Unguided => {}
            GuidanceKind::Cfg { lambda } => raw.lambda = Some(lambda),
            GuidanceKind::Autoguidance { weak_ref, ag_scale } => {
                raw.weak_ref = Some(weak_ref);
                raw.ag_scale = Some(ag_scale);
            }
            GuidanceKind::S2 { lambda, omega, drop } => {
                raw.lambda = Some(lambda);
                raw.omega = Some(omega);
                set_drop(&mut raw, drop);
            }
            GuidanceKind::NaiveS2 {
                lambda,
                omega,
                n_subnets,
                drop,
                exhaustive,
            } => {
                raw.lambda = Some(lambda);
                raw.omega = Some(omega);
                set_drop(&mut raw, drop);
                if exhaustive {
                    raw.exhaustive = Some(true);
                } else {
                    raw.n_subnets = Some(n_subnets);
                }
            }
        }
        raw
    }
}

fn same_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("prediction lengths {} and {} differ", a.len(), b.len())));
    }
    Ok(())
}

pub fn cfg_combine(d_uncond: &[f64], d_cond: &[f64], lambda: f64) -> Result<Vec<f64>> {
    same_len(d_uncond, d_cond)?;
    Ok(d_uncond
        .iter()
        .zip(d_cond)
        .map(|(u, c)| (1.0 - lambda) * u + lambda * c)
        .collect())
}

pub fn s2_combine(d_uncond: &[f64], d_cond: &[f64], d_weak: &[f64], lambda: f64, omega: f64) -> Result<Vec<f64>> {
    same_len(d_cond, d_weak)?;
    let mut out = cfg_combine(d_uncond, d_cond, lambda)?;
    for (o, w) in out.iter_mut().zip(d_weak) {
        *o -= omega * w;
    }
    Ok(out)
}

pub fn naive_s2_combine(
    d_uncond: &[f64],
    d_cond: &[f64],
    d_weak_list: &[Vec<f64>],
    lambda: f64,
    omega: f64,
) -> Result<Vec<f64>> {
    let (first, rest) = d_weak_list
        .split_first()
        .ok_or_else(|| Error::InvalidArgument("naive S² needs at least one weak prediction".into()))?;
    same_len(d_cond, first)?;
    let mut sum = first.clone();
    for w in rest {
        same_len(first, w)?;
        for (s, v) in sum.iter_mut().zip(w) {
            *s += v;
        }
    }
    let coef = omega / d_weak_list.len() as f64;
    let mut out = cfg_combine(d_uncond, d_cond, lambda)?;
    for (o, s) in out.iter_mut().zip(&sum) {
        *o -= coef * s;
    }
    Ok(out)
}

pub fn autoguidance_combine(d_weak_model: &[f64], d_strong: &[f64], ag_scale: f64) -> Result<Vec<f64>> {
    same_len(d_weak_model, d_strong)?;
    Ok(d_weak_model
        .iter()
        .zip(d_strong)
        .map(|(w, s)| (1.0 - ag_scale) * w + ag_scale * s)
        .collect())
}

fn masked_predictions(
    net: &dyn NoisePredictor,
    xs: &[f64],
    t: usize,
    c: Cond,
    masks: &[BlockMask],
) -> Result<Vec<Vec<f64>>> {
    masks.iter().map(|m| net.predict(xs, t, c, Some(m))).collect()
}

/// Mean of masked predictions (each row of `xs` handled independently).
pub fn posterior_mean_over_masks(
    net: &dyn NoisePredictor,
    xs: &[f64],
    t: usize,
    c: Cond,
    masks: &[BlockMask],
) -> Result<Vec<f64>> {
    if masks.is_empty() {
        return Err(Error::InvalidArgument("need at least one mask".into()));
    }
    let preds = masked_predictions(net, xs, t, c, masks)?;
    Ok(mean_of(&preds))
}

fn mean_of(preds: &[Vec<f64>]) -> Vec<f64> {
    let mut sum = preds[0].clone();
    for p in &preds[1..] {
        for (s, v) in sum.iter_mut().zip(p) {
            *s += v;
        }
    }
    let n = preds.len() as f64;
    sum.iter().map(|s| s / n).collect()
}

/// Per-coordinate population variance of masked predictions.
pub fn epistemic_variance(
    net: &dyn NoisePredictor,
    xs: &[f64],
    t: usize,
    c: Cond,
    masks: &[BlockMask],
) -> Result<Vec<f64>> {
    if masks.len() < 2 {
        return Err(Error::InvalidArgument("epistemic variance needs at least two masks".into()));
    }
    let preds = masked_predictions(net, xs, t, c, masks)?;
    let mean = mean_of(&preds);
    let mut var = vec![0.0; mean.len()];
    for p in &preds {
        for ((v, x), m) in var.iter_mut().zip(p).zip(&mean) {
            *v += (x - m) * (x - m);
        }
    }
    let n = preds.len() as f64;
    Ok(var.iter().map(|v| v / n).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{enumerate_all_masks, BlockDenoiser, ModelConfig};
    use crate::num::Rng;

    #[test]
    fn cfg_examples() {
        let u = [0.2, -1.0];
        let c = [0.6, 3.0];
        assert_eq!(cfg_combine(&u, &c, 1.0).unwrap(), c.to_vec());
        assert_eq!(cfg_combine(&u, &c, 0.0).unwrap(), u.to_vec());
        let g = cfg_combine(&[0.2], &[0.6], 7.5).unwrap();
        assert!((g[0] - 3.2).abs() < 1e-12);
        assert!(cfg_combine(&u, &[1.0], 2.0).is_err());
    }

    #[test]
    fn s2_examples() {
        let u = [0.2];
        let c = [0.6];
        let g = s2_combine(&u, &c, &[0.5], 7.5, 0.25).unwrap();
        assert!((g[0] - 3.075).abs() < 1e-12);
        assert_eq!(s2_combine(&u, &c, &[0.5], 7.5, 0.0).unwrap(), cfg_combine(&u, &c, 7.5).unwrap());
        let cfg = cfg_combine(&u, &c, 7.5).unwrap();
        let w = [cfg[0] / 0.25];
        assert_eq!(s2_combine(&u, &c, &w, 7.5, 0.25).unwrap(), vec![0.0]);
    }

    #[test]
    fn naive_collapses() {
        let u = [0.1, 0.3];
        let c = [0.7, -0.2];
        let w = vec![0.4, 0.9];
        let single = s2_combine(&u, &c, &w, 3.0, 0.25).unwrap();
        assert_eq!(naive_s2_combine(&u, &c, &[w.clone()], 3.0, 0.25).unwrap(), single);
        let four = vec![w.clone(); 4];
        let many = naive_s2_combine(&u, &c, &four, 3.0, 0.25).unwrap();
        for (a, b) in many.iter().zip(&single) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(naive_s2_combine(&u, &c, &[], 3.0, 0.25).is_err());
    }

    #[test]
    fn autoguidance_collapses() {
        let w = [0.3, -0.4];
        let s = [1.1, 0.5];
        assert_eq!(autoguidance_combine(&w, &s, 1.0).unwrap(), s.to_vec());
        assert_eq!(autoguidance_combine(&w, &s, 0.0).unwrap(), w.to_vec());
    }

    #[test]
    fn coefficient_sums() {
        assert_eq!(GuidanceSpec::cfg(5.0).coefficient_sum(), 1.0);
        assert_eq!(GuidanceSpec::s2(3.0, 0.25, DropRule::ratio(0.1)).coefficient_sum(), 0.75);
    }

    fn random_net(seed: u64) -> BlockDenoiser {
        let mut rng = Rng::new(seed);
        let mut net = BlockDenoiser::new(ModelConfig::toy(1, 2), &mut rng).unwrap();
        for p in net.params_mut() {
            *p += 0.1 * rng.gauss();
        }
        net
    }

    #[test]
    fn mask_average_of_s2_equals_exhaustive_naive() {
        let net = random_net(1);
        let masks = enumerate_all_masks(6, 1).unwrap();
        let mut rng = Rng::new(2);
        let xs: Vec<f64> = (0..32).map(|_| 3.0 * rng.gauss()).collect();
        let u = net.predict(&xs, 40, Cond::Null, None).unwrap();
        let c = net.predict(&xs, 40, Cond::Class(1), None).unwrap();
        let weak: Vec<Vec<f64>> = masks
            .iter()
            .map(|m| net.predict(&xs, 40, Cond::Class(1), Some(m)).unwrap())
            .collect();
        let naive = naive_s2_combine(&u, &c, &weak, 3.0, 0.25).unwrap();
        let mut avg = vec![0.0; xs.len()];
        for w in &weak {
            for (a, v) in avg.iter_mut().zip(s2_combine(&u, &c, w, 3.0, 0.25).unwrap()) {
                *a += v / 6.0;
            }
        }
        for (a, b) in avg.iter().zip(&naive) {
            assert!((a - b).abs() < 1e-12);
        }
        let mean = posterior_mean_over_masks(&net, &xs, 40, Cond::Class(1), &masks).unwrap();
        let cfg = cfg_combine(&u, &c, 3.0).unwrap();
        for ((n, g), m) in naive.iter().zip(&cfg).zip(&mean) {
            assert!((n - (g - 0.25 * m)).abs() < 1e-12);
        }
    }

    #[test]
    fn variance_cases() {
        let net = random_net(3);
        let xs = [0.5, -2.0, 4.0];
        let m = BlockMask::dropping(6, &[2]).unwrap();
        let v = epistemic_variance(&net, &xs, 10, Cond::Class(0), &[m.clone(), m.clone(), m.clone()]).unwrap();
        assert!(v.iter().all(|x| *x == 0.0));
        assert!(epistemic_variance(&net, &xs, 10, Cond::Class(0), &[m.clone()]).is_err());
        let single = posterior_mean_over_masks(&net, &xs, 10, Cond::Class(0), &[m.clone()]).unwrap();
        assert_eq!(single, net.predict(&xs, 10, Cond::Class(0), Some(&m)).unwrap());

        let fresh = BlockDenoiser::new(ModelConfig::toy(1, 2), &mut Rng::new(0)).unwrap();
        let all = enumerate_all_masks(6, 1).unwrap();
        let v = epistemic_variance(&fresh, &xs, 10, Cond::Class(0), &all).unwrap();
        assert!(v.iter().all(|x| *x == 0.0));
        let v = epistemic_variance(&net, &xs, 10, Cond::Class(0), &all).unwrap();
        assert!(v.iter().all(|x| *x >= 0.0) && v.iter().any(|x| *x > 0.0));
    }

    #[test]
    fn spec_parsing() {
        let raw = RawGuidance {
            name: "s2".into(),
            kind: "s2".into(),
            lambda: Some(3.0),
            omega: Some(0.25),
            drop_ratio: Some(0.1),
            ..Default::default()
        };
        let spec = raw.parse("guidance[0]").unwrap();
        assert_eq!(spec, GuidanceSpec::s2(3.0, 0.25, DropRule::ratio(0.1)));
        assert_eq!(RawGuidance::from(spec), raw);

        let bad = |r: RawGuidance, field: &str| match r.parse("g").unwrap_err() {
            Error::Config { key, .. } => assert_eq!(key, format!("g.{field}")),
            e => panic!("{e}"),
        };
        bad(RawGuidance { omega: None, ..raw.clone() }, "omega");
        bad(RawGuidance { omega: Some(-1.0), ..raw.clone() }, "omega");
        bad(RawGuidance { n_subnets: Some(3), ..raw.clone() }, "n_subnets");
        bad(RawGuidance { drop_ratio: Some(1.0), ..raw.clone() }, "drop_ratio");
        bad(RawGuidance { kind: "pag".into(), ..raw.clone() }, "kind");
        bad(RawGuidance { kind: "cfg".into(), drop_ratio: None, ..raw.clone() }, "omega");
        bad(
            RawGuidance {
                kind: "cfg".into(),
                lambda: None,
                omega: None,
                drop_ratio: None,
                ..raw.clone()
            },
            "lambda",
        );
        let ag = RawGuidance {
            name: "ag".into(),
            kind: "autoguidance".into(),
            weak_ref: Some("weak".into()),
            ..Default::default()
        };
        assert_eq!(ag.parse("g").unwrap(), GuidanceSpec::autoguidance("weak", 2.0).with_name("ag"));
    }
}
