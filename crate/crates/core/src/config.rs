//! Experiment configuration (TOML).
//!
//! ```toml
//! name = "fig3_1d"
//! seed = 0
//!
//! [data]
//! preset = "toy_1d"            # or an explicit [[data.components]] list
//! class_names = ["-4", "+4"]
//!
//! [model]
//! dim = 1
//! hidden = 64
//! blocks = 6
//! time_features = 16
//! num_classes = 2
//!
//! [schedule]
//! steps = 200
//! beta_start = 1e-4
//! beta_end = 0.02
//!
//! [train]
//! steps = 20000
//! weak_capacity_factor = 0.5
//! weak_step_factor = 0.25
//!
//! [[guidance]]
//! name = "cfg"
//! kind = "cfg"
//! lambda = 3.0
//!
//! [sampling]
//! n_per_class = 5000
//! mode = "ancestral"
//!
//! [metrics]
//! radius = 2.0
//!
//! [plot]
//! x_range = [-9.0, 9.0]
//! ```
//!
//! Every section except `data`, `model` and `guidance` may be omitted.
//! Unknown keys are rejected, and every validation error names its key.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::denoiser::ModelConfig;
use crate::error::{Error, Result};
use crate::gmm::{Component, GaussianMixture};
use crate::guidance::{GuidanceKind, GuidanceSpec, RawGuidance};
use crate::metrics::MetricsConfig;
use crate::sampler::SamplingMode;
use crate::schedule::{NoiseSchedule, ScheduleConfig};
use crate::trainer::TrainConfig;

/// Identifier of the separately trained weak model.
pub const WEAK_MODEL_ID: &str = "weak";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub components: Option<Vec<Component>>,
    #[serde(default)]
    pub class_names: Vec<String>,
}

impl DataSection {
    pub fn preset(name: &str) -> Self {
        Self {
            preset: Some(name.into()),
            components: None,
            class_names: Vec::new(),
        }
    }

    pub fn mixture(&self) -> Result<GaussianMixture> {
        match (&self.preset, &self.components) {
            (Some(_), Some(_)) => Err(Error::config("data", "give either `preset` or `components`, not both")),
            (None, None) => Err(Error::config("data", "needs `preset` or `components`")),
            (Some(p), None) => match p.as_str() {
                "toy_1d" => Ok(GaussianMixture::toy_1d()),
                "toy_2d" => Ok(GaussianMixture::toy_2d()),
                other => Err(Error::config(
                    "data.preset",
                    format!("unknown preset `{other}` (expected toy_1d or toy_2d)"),
                )),
            },
            (None, Some(c)) => GaussianMixture::new(c.clone()).map_err(|e| match e {
                Error::Config { message, .. } => Error::config("data.components", message),
                other => other,
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub cond_drop_prob: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub log_every: usize,
    pub weak_capacity_factor: f64,
    pub weak_step_factor: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            steps: t.steps,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            cond_drop_prob: t.cond_drop_prob,
            beta1: t.beta1,
            beta2: t.beta2,
            eps: t.eps,
            log_every: t.log_every,
            weak_capacity_factor: 0.5,
            weak_step_factor: 0.25,
        }
    }
}

impl TrainSection {
    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            steps: self.steps,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            cond_drop_prob: self.cond_drop_prob,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            seed,
            log_every: self.log_every,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingSection {
    pub n_per_class: usize,
    /// Classes to sample; empty means all.
    pub classes: Vec<usize>,
    pub mode: SamplingMode,
    /// Chains per class whose full path is written out (0 = none).
    pub trajectory_chains: usize,
}

impl Default for SamplingSection {
    fn default() -> Self {
        Self {
            n_per_class: 5000,
            classes: Vec::new(),
            mode: SamplingMode::Ancestral,
            trajectory_chains: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlotSection {
    pub title: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub x_range: Option<[f64; 2]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub y_range: Option<[f64; 2]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bins: Option<usize>,
}

/// The file as written; [`ExperimentConfig::from_toml`] validates it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    #[serde(default)]
    name: String,
    #[serde(default)]
    seed: u64,
    data: DataSection,
    model: ModelConfig,
    #[serde(default)]
    schedule: ScheduleConfig,
    #[serde(default)]
    train: TrainSection,
    guidance: Vec<RawGuidance>,
    #[serde(default)]
    sampling: SamplingSection,
    #[serde(default)]
    metrics: MetricsConfig,
    #[serde(default)]
    plot: PlotSection,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    pub data: DataSection,
    pub model: ModelConfig,
    pub schedule: ScheduleConfig,
    pub train: TrainSection,
    pub guidance: Vec<GuidanceSpec>,
    pub sampling: SamplingSection,
    pub metrics: MetricsConfig,
    pub plot: PlotSection,
}

/// Maps a TOML error to a config error keyed by `table.key` where the span allows.
fn toml_error(origin: &str, text: &str, e: toml::de::Error) -> Error {
    let message = format!("{origin}: {}", e.message().trim());
    let Some(span) = e.span() else {
        return Error::config("config", message);
    };
    let token = text.get(span.clone()).unwrap_or("").trim();
    let table = text[..span.start.min(text.len())]
        .lines()
        .rev()
        .find_map(|l| {
            let l = l.trim();
            l.starts_with('[').then(|| l.trim_matches(|c| c == '[' || c == ']').trim().to_string())
        });
    let is_bare = |t: &str| !t.is_empty() && t.chars().all(|c| c.is_alphanumeric() || c == '_' || c == '-');
    // A bad value is spanned by the value itself; its key starts the line.
    let line_start = text[..span.start.min(text.len())].rfind('\n').map_or(0, |i| i + 1);
    let line_key = text[line_start..].lines().next().and_then(|l| l.split_once('=')).map(|(k, _)| k.trim());
    let (token, is_key) = match line_key {
        Some(k) if is_bare(k) => (k, true),
        _ => (token, is_bare(token)),
    };
    let key = match (table, is_key) {
        (Some(t), true) => format!("{t}.{token}"),
        (None, true) => token.to_string(),
        (Some(t), false) => t,
        (None, false) => "config".to_string(),
    };
    Error::config(key, message)
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| toml_error("config", text, e))?;
        Self::from_raw(raw)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let raw: RawConfig = toml::from_str(&text).map_err(|e| toml_error(&path.display().to_string(), &text, e))?;
        Self::from_raw(raw)
    }

    fn from_raw(raw: RawConfig) -> Result<Self> {
        let guidance = raw
            .guidance
            .iter()
            .enumerate()
            .map(|(i, g)| g.parse(&format!("guidance[{i}]")))
            .collect::<Result<Vec<_>>>()?;
        let cfg = Self {
            name: raw.name,
            seed: raw.seed,
            data: raw.data,
            model: raw.model,
            schedule: raw.schedule,
            train: raw.train,
            guidance,
            sampling: raw.sampling,
            metrics: raw.metrics,
            plot: raw.plot,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        let raw = RawConfig {
            name: self.name.clone(),
            seed: self.seed,
            data: self.data.clone(),
            model: self.model,
            schedule: self.schedule,
            train: self.train,
            guidance: self.guidance.iter().cloned().map(RawGuidance::from).collect(),
            sampling: self.sampling.clone(),
            metrics: self.metrics,
            plot: self.plot.clone(),
        };
        toml::to_string(&raw).expect("config serializes")
    }

    /// Cross-section consistency checks.
    pub fn validate(&self) -> Result<()> {
        let gmm = self.data.mixture()?;
        self.model.validate()?;
        if self.model.dim != gmm.dim() {
            return Err(Error::config(
                "model.dim",
                format!("is {} but the data mixture is {}-D", self.model.dim, gmm.dim()),
            ));
        }
        if self.model.num_classes != gmm.num_components() {
            return Err(Error::config(
                "model.num_classes",
                format!("is {} but the data mixture has {} components", self.model.num_classes, gmm.num_components()),
            ));
        }
        if !self.data.class_names.is_empty() && self.data.class_names.len() != gmm.num_components() {
            return Err(Error::config(
                "data.class_names",
                format!("{} names for {} classes", self.data.class_names.len(), gmm.num_components()),
            ));
        }
        NoiseSchedule::new(self.schedule)?;
        self.train.train_config(self.seed).validate()?;
        for (key, f) in [
            ("train.weak_capacity_factor", self.train.weak_capacity_factor),
            ("train.weak_step_factor", self.train.weak_step_factor),
        ] {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::config(key, format!("{f} must lie in (0, 1]")));
            }
        }
        if self.guidance.is_empty() {
            return Err(Error::config("guidance", "at least one guidance entry is required"));
        }
        let mut names = BTreeSet::new();
        for (i, g) in self.guidance.iter().enumerate() {
            if !names.insert(g.name.as_str()) {
                return Err(Error::config(format!("guidance[{i}].name"), format!("duplicate name `{}`", g.name)));
            }
            let blocks = self.model.blocks;
            match &g.kind {
                GuidanceKind::S2 { drop, .. } | GuidanceKind::NaiveS2 { drop, .. } => {
                    let k = drop.dropped(blocks);
                    if k == 0 || k >= blocks {
                        let key = if drop.count.is_some() { "drop_count" } else { "drop_ratio" };
                        return Err(Error::config(
                            format!("guidance[{i}].{key}"),
                            format!("drops {k} of {blocks} blocks; needs between 1 and {}", blocks - 1),
                        ));
                    }
                }
                GuidanceKind::Autoguidance { weak_ref, .. } if weak_ref != WEAK_MODEL_ID => {
                    return Err(Error::config(
                        format!("guidance[{i}].weak_ref"),
                        format!("unknown checkpoint `{weak_ref}` (the weak model is `{WEAK_MODEL_ID}`)"),
                    ));
                }
                _ => {}
            }
        }
        if self.sampling.n_per_class == 0 {
            return Err(Error::config("sampling.n_per_class", "must be positive"));
        }
        for &c in &self.sampling.classes {
            if c >= self.model.num_classes {
                return Err(Error::config(
                    "sampling.classes",
                    format!("class {c} out of range 0..{}", self.model.num_classes),
                ));
            }
        }
        if !(self.metrics.radius > 0.0 && self.metrics.radius.is_finite()) {
            return Err(Error::config("metrics.radius", "must be positive"));
        }
        if self.metrics.projections == 0 {
            return Err(Error::config("metrics.projections", "must be positive"));
        }
        if self.metrics.bins < 2 {
            return Err(Error::config("metrics.bins", "must be at least 2"));
        }
        for (key, r) in [("plot.x_range", self.plot.x_range), ("plot.y_range", self.plot.y_range)] {
            if let Some([lo, hi]) = r {
                if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                    return Err(Error::config(key, "must be a finite increasing pair"));
                }
            }
        }
        Ok(())
    }

    pub fn mixture(&self) -> GaussianMixture {
        self.data.mixture().expect("validated")
    }

    pub fn noise_schedule(&self) -> NoiseSchedule {
        NoiseSchedule::new(self.schedule).expect("validated")
    }

    pub fn train_config(&self) -> TrainConfig {
        self.train.train_config(self.seed)
    }

    pub fn classes(&self) -> Vec<usize> {
        if self.sampling.classes.is_empty() {
            (0..self.model.num_classes).collect()
        } else {
            self.sampling.classes.clone()
        }
    }

    pub fn guidance_named(&self, name: &str) -> Result<&GuidanceSpec> {
        self.guidance.iter().find(|g| g.name == name).ok_or_else(|| {
            let known: Vec<&str> = self.guidance.iter().map(|g| g.name.as_str()).collect();
            Error::InvalidArgument(format!("no guidance named `{name}` (known: {})", known.join(", ")))
        })
    }

    pub fn needs_weak_model(&self) -> bool {
        self.guidance.iter().any(|g| matches!(g.kind, GuidanceKind::Autoguidance { .. }))
    }

    /// sha256 of the canonical JSON form of the whole configuration.
    pub fn hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }

    /// Hash of everything that determines the trained networks.
    pub fn training_hash(&self) -> [u8; 32] {
        #[derive(Serialize)]
        struct Key<'a> {
            data: &'a GaussianMixture,
            model: &'a ModelConfig,
            schedule: &'a ScheduleConfig,
            train: &'a TrainConfig,
            weak_capacity_factor: f64,
            weak_step_factor: f64,
        }
        let gmm = self.mixture();
        let train = self.train_config();
        let key = Key {
            data: &gmm,
            model: &self.model,
            schedule: &self.schedule,
            train: &train,
            weak_capacity_factor: self.train.weak_capacity_factor,
            weak_step_factor: self.train.weak_step_factor,
        };
        Sha256::digest(serde_json::to_string(&key).expect("serializes").as_bytes()).into()
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
        name = "t"
        [data]
        preset = "toy_1d"
        [model]
        dim = 1
        hidden = 64
        blocks = 6
        time_features = 16
        num_classes = 2
        [[guidance]]
        name = "cfg"
        kind = "cfg"
        lambda = 3.0
    "#;

    fn key_of(text: &str) -> String {
        match ExperimentConfig::from_toml(text).unwrap_err() {
            Error::Config { key, .. } => key,
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn minimal_config_gets_defaults() {
        let c = ExperimentConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(c.schedule, ScheduleConfig::default());
        assert_eq!(c.train.steps, 20_000);
        assert_eq!(c.classes(), vec![0, 1]);
        assert_eq!(c.sampling.mode, SamplingMode::Ancestral);
        let again = ExperimentConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(again, c);
        assert_eq!(again.hash(), c.hash());
    }

    #[test]
    fn errors_name_the_key() {
        assert_eq!(key_of(&MINIMAL.replace("dim = 1", "dim = 2")), "model.dim");
        assert_eq!(key_of(&MINIMAL.replace("num_classes = 2", "num_classes = 3")), "model.num_classes");
        assert_eq!(key_of(&MINIMAL.replace("lambda = 3.0", "omega = 3.0")), "guidance[0].lambda");
        assert_eq!(key_of(&MINIMAL.replace("toy_1d", "toy_3d")), "data.preset");
        assert_eq!(key_of(&format!("{MINIMAL}\n[sampling]\nclasses = [5]\n")), "sampling.classes");
        assert_eq!(
            key_of(&format!("{MINIMAL}\n[[guidance]]\nname = \"cfg\"\nkind = \"unguided\"\n")),
            "guidance[1].name"
        );
        assert_eq!(
            key_of(&format!("{MINIMAL}\n[[guidance]]\nname = \"ag\"\nkind = \"autoguidance\"\nweak_ref = \"other\"\n")),
            "guidance[1].weak_ref"
        );
        assert_eq!(
            key_of(&format!(
                "{MINIMAL}\n[[guidance]]\nname = \"s\"\nkind = \"s2\"\nlambda = 1.0\nomega = 0.1\ndrop_count = 6\n"
            )),
            "guidance[1].drop_count"
        );
        assert_eq!(key_of(&format!("{MINIMAL}\n[train]\ncond_drop_prob = 1.0\n")), "train.cond_drop_prob");
        assert_eq!(key_of(&format!("{MINIMAL}\n[schedule]\nstepz = 3\n")), "schedule.stepz");
        assert_eq!(key_of(&format!("{MINIMAL}\n[sampling]\nmode = \"sideways\"\n")), "sampling.mode");
    }

    #[test]
    fn hashes_track_content() {
        let a = ExperimentConfig::from_toml(MINIMAL).unwrap();
        let mut b = a.clone();
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
        assert_ne!(a.training_hash(), b.training_hash());
        let mut c = a.clone();
        c.sampling.n_per_class = 7;
        assert_ne!(a.hash(), c.hash());
        assert_eq!(a.training_hash(), c.training_hash());
    }
}
