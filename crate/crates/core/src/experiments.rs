//! End-to-end drivers behind the command line: training, sampling,
//! evaluation, sweeps, plots and the canned reproduction runs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use crate::config::{sha256_hex, DataSection, ExperimentConfig, PlotSection, SamplingSection, WEAK_MODEL_ID};
use crate::denoiser::{read_checkpoint, write_checkpoint, BlockDenoiser, Checkpoint, ModelConfig};
use crate::error::{Error, Result};
use crate::guidance::{DropRule, GuidanceKind, GuidanceSpec, DEFAULT_AG_SCALE};
use crate::manifest::RunManifest;
use crate::metrics::{evaluate, MetricsConfig, MetricsReport};
use crate::num::Rng;
use crate::plot::{render_to_file, PlotKind, PlotSpec};
use crate::sampler::{
    read_samples_csv, run_sampling, samples_csv, trajectory_csv, CallCounts, Predictors, SampleBatch,
    SamplingMode, SamplingRequest, Trajectory,
};
use crate::schedule::ScheduleConfig;
use crate::trainer::{bayes_floor_mse, init_model, probe_mse, probe_set, train, train_weak, LossCurve};

pub const MAIN_CHECKPOINT: &str = "model.ckpt";
pub const WEAK_CHECKPOINT: &str = "weak.ckpt";
const PROBES: usize = 1024;

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn file_hash(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

/// Trained networks plus the hashes of the checkpoints they came from.
#[derive(Debug, Clone)]
pub struct Models {
    pub main: BlockDenoiser,
    pub weak: Option<BlockDenoiser>,
    pub checkpoints: BTreeMap<String, String>,
    /// Probe-set scalars, present when the networks were trained in this call.
    pub training_scalars: BTreeMap<String, f64>,
}

impl Models {
    pub fn predictors(&self) -> Predictors<'_> {
        Predictors {
            main: &self.main,
            weak_model: self.weak.as_ref().map(|w| w as _),
        }
    }
}

/// Trains the main network (and the weak one if any guidance needs it)
/// and writes checkpoints and loss curves into `dir`.
pub fn train_models(cfg: &ExperimentConfig, dir: &Path) -> Result<Models> {
    create_dir(dir)?;
    let gmm = cfg.mixture();
    let sched = cfg.noise_schedule();
    let tc = cfg.train_config();
    let hash = cfg.training_hash();
    let mut checkpoints = BTreeMap::new();
    let mut scalars = BTreeMap::new();

    let save = |net: &BlockDenoiser, curve: &LossCurve, ckpt: &str, loss: &str| -> Result<String> {
        let path = dir.join(ckpt);
        let ck = Checkpoint {
            net: net.clone(),
            schedule: cfg.schedule,
            train_hash: hash,
        };
        write_checkpoint(&path, &ck)?;
        curve.write_csv(&dir.join(loss))?;
        file_hash(&path)
    };

    let out = train(&gmm, init_model(cfg.model, tc.seed)?, &sched, &tc)?;
    checkpoints.insert("main".to_string(), save(&out.net, &out.loss_curve, MAIN_CHECKPOINT, "loss_curve.csv")?);
    let probes = probe_set(&gmm, &sched, PROBES, tc.seed);
    scalars.insert("probe_mse".to_string(), probe_mse(&out.net, &probes)?);
    scalars.insert("bayes_floor_mse".to_string(), bayes_floor_mse(&gmm, &sched, &probes)?);

    let weak = if cfg.needs_weak_model() {
        let w = train_weak(
            &gmm,
            &sched,
            cfg.model,
            &tc,
            cfg.train.weak_capacity_factor,
            cfg.train.weak_step_factor,
        )?;
        checkpoints.insert(
            WEAK_MODEL_ID.to_string(),
            save(&w.net, &w.loss_curve, WEAK_CHECKPOINT, "weak_loss_curve.csv")?,
        );
        scalars.insert("weak_probe_mse".to_string(), probe_mse(&w.net, &probes)?);
        Some(w.net)
    } else {
        None
    };
    Ok(Models {
        main: out.net,
        weak,
        checkpoints,
        training_scalars: scalars,
    })
}

fn load_checked(path: &Path, cfg: &ExperimentConfig, expected: &ModelConfig) -> Result<BlockDenoiser> {
    let ck = read_checkpoint(path)?;
    if ck.train_hash != cfg.training_hash() || ck.schedule != cfg.schedule || ck.net.config() != expected {
        return Err(Error::ManifestMismatch(format!(
            "{} was trained under a different configuration",
            path.display()
        )));
    }
    Ok(ck.net)
}

/// Loads checkpoints written by [`train_models`] for this configuration.
pub fn load_models(cfg: &ExperimentConfig, dir: &Path) -> Result<Models> {
    let mut checkpoints = BTreeMap::new();
    let main_path = dir.join(MAIN_CHECKPOINT);
    let main = load_checked(&main_path, cfg, &cfg.model)?;
    checkpoints.insert("main".to_string(), file_hash(&main_path)?);
    let weak = if cfg.needs_weak_model() {
        let weak_path = dir.join(WEAK_CHECKPOINT);
        let hidden = ((cfg.model.hidden as f64 * cfg.train.weak_capacity_factor).round() as usize).max(1);
        let expected = ModelConfig { hidden, ..cfg.model };
        let net = load_checked(&weak_path, cfg, &expected)?;
        checkpoints.insert(WEAK_MODEL_ID.to_string(), file_hash(&weak_path)?);
        Some(net)
    } else {
        None
    };
    Ok(Models {
        main,
        weak,
        checkpoints,
        training_scalars: BTreeMap::new(),
    })
}

/// Loads the checkpoints in `dir`, training them first if there are none.
pub fn ensure_models(cfg: &ExperimentConfig, dir: &Path) -> Result<Models> {
    let have_main = dir.join(MAIN_CHECKPOINT).exists();
    let have_weak = !cfg.needs_weak_model() || dir.join(WEAK_CHECKPOINT).exists();
    if have_main && have_weak {
        load_models(cfg, dir)
    } else {
        train_models(cfg, dir)
    }
}

/// Checkpoint cache directory for this configuration under `cache`.
pub fn cache_dir(cfg: &ExperimentConfig, cache: &Path) -> PathBuf {
    cache.join(&hex::encode(cfg.training_hash())[..16])
}

/// Samples of one guidance method across the configured classes.
#[derive(Debug, Clone)]
pub struct MethodRun {
    pub name: String,
    pub batch: SampleBatch,
    /// Paths of the first `trajectory_chains` chains of each class.
    pub trajectory: Option<Trajectory>,
    pub calls: CallCounts,
}

/// Runs one guidance spec for every configured class. The noise stream
/// depends on `seed` and the class only, so methods see the same noise.
pub fn sample_method(models: &Models, cfg: &ExperimentConfig, spec: &GuidanceSpec, seed: u64) -> Result<MethodRun> {
    let sched = cfg.noise_schedule();
    let base = Rng::new(seed).split("sampling");
    let chains = cfg.sampling.trajectory_chains;
    let mut parts = Vec::new();
    let mut trajectories = Vec::new();
    let mut calls = CallCounts::default();
    for class in cfg.classes() {
        let req = SamplingRequest {
            n: cfg.sampling.n_per_class,
            class,
            mode: cfg.sampling.mode,
            record: chains > 0,
        };
        let out = run_sampling(
            models.predictors(),
            &sched,
            spec,
            req,
            &base.split_index("class", class as u64),
        )?;
        calls.main += out.calls.main;
        calls.weak_model += out.calls.weak_model;
        parts.push(out.batch);
        if let Some(t) = out.trajectory {
            trajectories.push(t);
        }
    }
    let batch = SampleBatch::concat(&parts, spec.name.clone())?;
    let trajectory = (chains > 0).then(|| first_chains(&trajectories, chains));
    Ok(MethodRun {
        name: spec.name.clone(),
        batch,
        trajectory,
        calls,
    })
}

fn first_chains(trajs: &[Trajectory], k: usize) -> Trajectory {
    let first = &trajs[0];
    let dim = first.dim;
    let states = (0..first.states.len())
        .map(|row| {
            trajs
                .iter()
                .flat_map(|t| {
                    let take = k.min(t.num_chains()) * dim;
                    t.states[row][..take].iter().copied()
                })
                .collect()
        })
        .collect();
    Trajectory {
        dim,
        steps: first.steps,
        states,
        masks_used: Vec::new(),
        guidance_terms: Vec::new(),
    }
}

fn samples_file(name: &str) -> String {
    format!("samples_{name}.csv")
}

fn trajectory_file(name: &str) -> String {
    format!("trajectories_{name}.csv")
}

/// Writes samples (and trajectories) of one run under `out`, recording them in the manifest.
fn write_run(out: &Path, tag: &str, run: &MethodRun, manifest: &mut RunManifest) -> Result<()> {
    let rel = samples_file(tag);
    write_file(&out.join(&rel), &samples_csv(&run.batch))?;
    manifest.record_output(out, &rel)?;
    if let Some(t) = &run.trajectory {
        let rel = trajectory_file(tag);
        write_file(&out.join(&rel), &trajectory_csv(t))?;
        manifest.record_output(out, &rel)?;
    }
    manifest.call_counts.insert(tag.to_string(), run.calls);
    Ok(())
}

fn metrics_csv(reports: &BTreeMap<String, MetricsReport>) -> String {
    let mut s = String::new();
    let mut header_done = false;
    for (name, r) in reports {
        if !header_done {
            let _ = writeln!(s, "method,{}", r.csv_header());
            header_done = true;
        }
        let _ = writeln!(s, "{name},{}", r.csv_row());
    }
    s
}

fn write_metrics(out: &Path, manifest: &mut RunManifest) -> Result<()> {
    let json = serde_json::to_string_pretty(&manifest.metrics).expect("metrics serialize");
    write_file(&out.join("metrics.json"), &(json + "\n"))?;
    write_file(&out.join("metrics.csv"), &metrics_csv(&manifest.metrics))?;
    manifest.record_output(out, "metrics.json")?;
    manifest.record_output(out, "metrics.csv")
}

/// `train`: fits the networks and writes checkpoints, loss curves and a manifest.
pub fn cmd_train(cfg: &ExperimentConfig, out: &Path) -> Result<RunManifest> {
    let start = Instant::now();
    let models = train_models(cfg, out)?;
    let mut m = RunManifest::new("train", &cfg.name, &cfg.hash(), cfg.seed);
    m.checkpoints = models.checkpoints.clone();
    m.scalars = models.training_scalars.clone();
    m.record_output(out, MAIN_CHECKPOINT)?;
    m.record_output(out, "loss_curve.csv")?;
    if models.weak.is_some() {
        m.record_output(out, WEAK_CHECKPOINT)?;
        m.record_output(out, "weak_loss_curve.csv")?;
    }
    m.wall_time_secs = start.elapsed().as_secs_f64();
    m.write(out)?;
    Ok(m)
}

/// `sample`: draws samples for one named guidance method, or all of them.
pub fn cmd_sample(cfg: &ExperimentConfig, models_dir: &Path, out: &Path, guidance: Option<&str>) -> Result<RunManifest> {
    let start = Instant::now();
    let specs: Vec<&GuidanceSpec> = match guidance {
        Some(name) => vec![cfg.guidance_named(name)?],
        None => cfg.guidance.iter().collect(),
    };
    let models = ensure_models(cfg, models_dir)?;
    create_dir(out)?;
    let mut m = RunManifest::new("sample", &cfg.name, &cfg.hash(), cfg.seed);
    m.checkpoints = models.checkpoints.clone();
    for spec in specs {
        let run = sample_method(&models, cfg, spec, cfg.seed)?;
        write_run(out, &spec.name, &run, &mut m)?;
    }
    m.wall_time_secs = start.elapsed().as_secs_f64();
    m.write(out)?;
    Ok(m)
}

/// `eval`: scores every samples file recorded in the manifest under `run_dir`.
/// Refuses to run when the manifest came from a different configuration.
pub fn cmd_eval(cfg: &ExperimentConfig, run_dir: &Path) -> Result<RunManifest> {
    let mut m = RunManifest::read(run_dir)?;
    m.check_config(&cfg.hash())?;
    let gmm = cfg.mixture();
    let files: Vec<String> = m
        .outputs
        .keys()
        .filter(|k| k.starts_with("samples_") && k.ends_with(".csv"))
        .cloned()
        .collect();
    if files.is_empty() {
        return Err(Error::InvalidArgument(format!("no samples recorded in {}", run_dir.display())));
    }
    for rel in files {
        let batch = read_samples_csv(&run_dir.join(&rel))?;
        let tag = rel.trim_start_matches("samples_").trim_end_matches(".csv").to_string();
        m.metrics.insert(tag, evaluate(&batch, &gmm, &cfg.metrics)?);
    }
    write_metrics(run_dir, &mut m)?;
    m.write(run_dir)?;
    Ok(m)
}

/// Guidance parameter varied by a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    Lambda,
    Omega,
    DropCount,
    NSubnets,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Lambda => "lambda",
            SweepAxis::Omega => "omega",
            SweepAxis::DropCount => "drop_count",
            SweepAxis::NSubnets => "n_subnets",
        }
    }

    /// The spec with this axis set to `value`.
    pub fn apply(self, spec: &GuidanceSpec, value: f64) -> Result<GuidanceSpec> {
        let bad_kind = || {
            Error::config(
                "sweep.axis",
                format!("`{}` does not apply to {} guidance `{}`", self.name(), spec.kind_name(), spec.name),
            )
        };
        let count = || -> Result<usize> {
            if value >= 0.0 && value.fract() == 0.0 && value <= u32::MAX as f64 {
                Ok(value as usize)
            } else {
                Err(Error::config("sweep.values", format!("{} needs whole numbers, got {value}", self.name())))
            }
        };
        let mut out = spec.clone();
        match (self, &mut out.kind) {
            (
                SweepAxis::Lambda,
                GuidanceKind::Cfg { lambda } | GuidanceKind::S2 { lambda, .. } | GuidanceKind::NaiveS2 { lambda, .. },
            ) => *lambda = value,
            (SweepAxis::Omega, GuidanceKind::S2 { omega, .. } | GuidanceKind::NaiveS2 { omega, .. }) => *omega = value,
            (SweepAxis::DropCount, GuidanceKind::S2 { drop, .. } | GuidanceKind::NaiveS2 { drop, .. }) => {
                *drop = DropRule::count(count()?)
            }
            (
                SweepAxis::NSubnets,
                GuidanceKind::NaiveS2 {
                    n_subnets,
                    exhaustive: false,
                    ..
                },
            ) => *n_subnets = count()?,
            _ => return Err(bad_kind()),
        }
        out.validate()?;
        Ok(out)
    }
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lambda" => Ok(SweepAxis::Lambda),
            "omega" => Ok(SweepAxis::Omega),
            "drop_count" => Ok(SweepAxis::DropCount),
            "n_subnets" => Ok(SweepAxis::NSubnets),
            other => Err(Error::config(
                "sweep.axis",
                format!("unknown axis `{other}` (expected lambda, omega, drop_count or n_subnets)"),
            )),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SweepPoint {
    pub value: f64,
    pub report: MetricsReport,
    pub calls: CallCounts,
}

/// Samples and scores `spec` at each value of `axis`.
pub fn sweep(
    models: &Models,
    cfg: &ExperimentConfig,
    spec: &GuidanceSpec,
    axis: SweepAxis,
    values: &[f64],
) -> Result<Vec<SweepPoint>> {
    let specs = values.iter().map(|&v| axis.apply(spec, v)).collect::<Result<Vec<_>>>()?;
    let gmm = cfg.mixture();
    specs
        .iter()
        .zip(values)
        .map(|(s, &value)| {
            let run = sample_method(models, cfg, s, cfg.seed)?;
            Ok(SweepPoint {
                value,
                report: evaluate(&run.batch, &gmm, &cfg.metrics)?,
                calls: run.calls,
            })
        })
        .collect()
}

/// Long-format sweep table: one row per value per metric.
pub fn sweep_csv(axis: SweepAxis, points: &[SweepPoint]) -> String {
    let mut s = String::from("axis,value,metric,metric_value\n");
    for p in points {
        for (metric, v) in p.report.columns() {
            if !v.is_empty() {
                let _ = writeln!(s, "{},{},{metric},{v}", axis.name(), p.value);
            }
        }
    }
    s
}

/// `sweep`: varies one parameter of one named guidance method.
pub fn cmd_sweep(
    cfg: &ExperimentConfig,
    models_dir: &Path,
    out: &Path,
    guidance: &str,
    axis: SweepAxis,
    values: &[f64],
) -> Result<RunManifest> {
    let start = Instant::now();
    if values.is_empty() {
        return Err(Error::config("sweep.values", "need at least one value"));
    }
    let spec = cfg.guidance_named(guidance)?;
    // Reject bad axis/kind pairs before paying for any training.
    for &v in values {
        axis.apply(spec, v)?;
    }
    let models = ensure_models(cfg, models_dir)?;
    let points = sweep(&models, cfg, spec, axis, values)?;
    let mut m = RunManifest::new("sweep", &cfg.name, &cfg.hash(), cfg.seed);
    m.checkpoints = models.checkpoints.clone();
    let rel = format!("sweep_{}_{}.csv", spec.name, axis.name());
    write_file(&out.join(&rel), &sweep_csv(axis, &points))?;
    m.record_output(out, &rel)?;
    for p in &points {
        let tag = format!("{}_{}={}", spec.name, axis.name(), p.value);
        m.metrics.insert(tag.clone(), p.report.clone());
        m.call_counts.insert(tag, p.calls);
    }
    m.wall_time_secs = start.elapsed().as_secs_f64();
    m.write(out)?;
    Ok(m)
}

/// `plot`: renders a plot spec file; relative paths resolve against the file's directory.
pub fn cmd_plot(spec_path: &Path) -> Result<PathBuf> {
    let text = std::fs::read_to_string(spec_path).map_err(|e| Error::io(spec_path, e))?;
    let spec: PlotSpec = toml::from_str(&text).map_err(|e| Error::config("plot", format!("{}: {}", spec_path.display(), e.message())))?;
    let base = spec_path.parent().unwrap_or(Path::new("."));
    let spec = spec.resolved(base);
    spec.validate()?;
    render_to_file(&spec)?;
    Ok(spec.output)
}

/// The canned experiments of `repro`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReproTarget {
    Fig3_1d,
    Fig3_2d,
    Fig8Traj,
    Fig9NaiveVsS2,
    Ablations,
}

impl ReproTarget {
    pub const ALL: [ReproTarget; 5] = [
        ReproTarget::Fig3_1d,
        ReproTarget::Fig3_2d,
        ReproTarget::Fig8Traj,
        ReproTarget::Fig9NaiveVsS2,
        ReproTarget::Ablations,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ReproTarget::Fig3_1d => "fig3_1d",
            ReproTarget::Fig3_2d => "fig3_2d",
            ReproTarget::Fig8Traj => "fig8_traj",
            ReproTarget::Fig9NaiveVsS2 => "fig9_naive_vs_s2",
            ReproTarget::Ablations => "ablations",
        }
    }

    /// Default configuration of the experiment.
    pub fn config(self) -> ExperimentConfig {
        let one = || ExperimentConfig {
            name: self.name().to_string(),
            seed: 0,
            data: DataSection {
                class_names: vec!["-4".into(), "+4".into()],
                ..DataSection::preset("toy_1d")
            },
            model: ModelConfig::toy(1, 2),
            schedule: ScheduleConfig::default(),
            train: Default::default(),
            guidance: Vec::new(),
            sampling: SamplingSection::default(),
            metrics: MetricsConfig::default(),
            plot: PlotSection {
                x_range: Some([-9.0, 9.0]),
                bins: Some(90),
                ..PlotSection::default()
            },
        };
        let two = || ExperimentConfig {
            data: DataSection::preset("toy_2d"),
            model: ModelConfig::toy(2, 4),
            plot: PlotSection {
                x_range: Some([-8.0, 8.0]),
                y_range: Some([-8.0, 8.0]),
                ..PlotSection::default()
            },
            sampling: SamplingSection {
                n_per_class: 2500,
                ..SamplingSection::default()
            },
            ..one()
        };
        let s2 = |lambda| GuidanceSpec::s2(lambda, 0.25, DropRule::count(1));
        let naive_all = |lambda| GuidanceSpec::naive_s2_exhaustive(lambda, 0.25, DropRule::count(1));
        let five = |lambda| {
            vec![
                GuidanceSpec::unguided(),
                GuidanceSpec::cfg(lambda),
                GuidanceSpec::autoguidance(WEAK_MODEL_ID, DEFAULT_AG_SCALE),
                naive_all(lambda),
                s2(lambda),
            ]
        };
        match self {
            ReproTarget::Fig3_1d => ExperimentConfig {
                guidance: five(3.0),
                ..one()
            },
            ReproTarget::Fig3_2d => ExperimentConfig {
                guidance: five(5.0),
                ..two()
            },
            ReproTarget::Fig8Traj => ExperimentConfig {
                guidance: vec![GuidanceSpec::unguided(), GuidanceSpec::cfg(3.0), s2(3.0)],
                sampling: SamplingSection {
                    n_per_class: 256,
                    classes: vec![1],
                    mode: SamplingMode::Deterministic,
                    trajectory_chains: 32,
                },
                ..one()
            },
            ReproTarget::Fig9NaiveVsS2 => ExperimentConfig {
                guidance: vec![naive_all(5.0), s2(5.0)],
                ..two()
            },
            ReproTarget::Ablations => ExperimentConfig {
                guidance: vec![
                    GuidanceSpec::cfg(3.0),
                    s2(3.0),
                    GuidanceSpec::naive_s2(3.0, 0.25, 5, DropRule::count(1)),
                ],
                sampling: SamplingSection {
                    n_per_class: 2000,
                    ..SamplingSection::default()
                },
                ..one()
            },
        }
    }
}

impl FromStr for ReproTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|t| t.name() == s).ok_or_else(|| {
            let names: Vec<&str> = Self::ALL.iter().map(|t| t.name()).collect();
            Error::InvalidArgument(format!("unknown experiment `{s}` (expected one of {})", names.join(", ")))
        })
    }
}

/// Short human label of a guidance spec for panel titles.
pub fn describe(spec: &GuidanceSpec) -> String {
    match &spec.kind {
        GuidanceKind::Unguided => "unguided".to_string(),
        GuidanceKind::Cfg { lambda } => format!("CFG λ={lambda}"),
        GuidanceKind::Autoguidance { ag_scale, .. } => format!("Autoguidance w={ag_scale}"),
        GuidanceKind::NaiveS2 {
            lambda,
            omega,
            n_subnets,
            exhaustive,
            ..
        } => {
            let n = if *exhaustive { "all".to_string() } else { n_subnets.to_string() };
            format!("Naive S² λ={lambda} ω={omega} N={n}")
        }
        GuidanceKind::S2 { lambda, omega, .. } => format!("S² λ={lambda} ω={omega}"),
    }
}

fn plot_spec(cfg: &ExperimentConfig, kind: PlotKind, inputs: Vec<String>, titles: Vec<String>, output: &str) -> PlotSpec {
    let mut spec = PlotSpec::new(kind, inputs.into_iter().map(PathBuf::from).collect(), PathBuf::from(output));
    spec.panel_titles = titles;
    spec.title = if cfg.plot.title.is_empty() { cfg.name.clone() } else { cfg.plot.title.clone() };
    spec.x_range = cfg.plot.x_range;
    spec.y_range = cfg.plot.y_range;
    if let Some(b) = cfg.plot.bins {
        spec.bins = b;
    }
    spec
}

fn render_into(out: &Path, spec: PlotSpec, manifest: &mut RunManifest) -> Result<()> {
    let rel = spec.output.to_string_lossy().into_owned();
    let spec = spec.resolved(out);
    spec.validate()?;
    render_to_file(&spec)?;
    manifest.record_output(out, &rel)
}

/// Samples every method, scores it, and records files and metrics.
fn run_all_methods(
    models: &Models,
    cfg: &ExperimentConfig,
    out: &Path,
    seed: u64,
    suffix: &str,
    manifest: &mut RunManifest,
) -> Result<Vec<MethodRun>> {
    let gmm = cfg.mixture();
    let mut runs = Vec::new();
    for spec in &cfg.guidance {
        let run = sample_method(models, cfg, spec, seed)?;
        let tag = format!("{}{suffix}", spec.name);
        write_run(out, &tag, &run, manifest)?;
        manifest.metrics.insert(tag, evaluate(&run.batch, &gmm, &cfg.metrics)?);
        runs.push(run);
    }
    Ok(runs)
}

/// `repro`: runs one canned experiment end to end. Trained networks are
/// cached under `cache` keyed by the training configuration.
pub fn cmd_repro(target: ReproTarget, cfg: &ExperimentConfig, out: &Path, cache: &Path) -> Result<RunManifest> {
    let start = Instant::now();
    create_dir(out)?;
    let models = ensure_models(cfg, &cache_dir(cfg, cache))?;
    let mut m = RunManifest::new(&format!("repro {}", target.name()), &cfg.name, &cfg.hash(), cfg.seed);
    m.checkpoints = models.checkpoints.clone();
    m.scalars = models.training_scalars.clone();
    let titles: Vec<String> = cfg.guidance.iter().map(describe).collect();
    let files = |suffix: &str| -> Vec<String> {
        cfg.guidance.iter().map(|g| samples_file(&format!("{}{suffix}", g.name))).collect()
    };
    match target {
        ReproTarget::Fig3_1d | ReproTarget::Fig3_2d => {
            run_all_methods(&models, cfg, out, cfg.seed, "", &mut m)?;
            write_metrics(out, &mut m)?;
            let kind = if cfg.model.dim == 1 { PlotKind::Hist1d } else { PlotKind::Scatter2d };
            let mut spec = plot_spec(cfg, kind, files(""), titles, &format!("{}.svg", target.name()));
            if kind == PlotKind::Hist1d {
                spec.overlay = Some(cfg.mixture());
            }
            render_into(out, spec, &mut m)?;
        }
        ReproTarget::Fig8Traj => {
            run_all_methods(&models, cfg, out, cfg.seed, "", &mut m)?;
            write_metrics(out, &mut m)?;
            let inputs = cfg.guidance.iter().map(|g| trajectory_file(&g.name)).collect();
            let mut spec = plot_spec(cfg, PlotKind::Trajectories, inputs, titles, "fig8_traj.svg");
            spec.y_range = None;
            render_into(out, spec, &mut m)?;
        }
        ReproTarget::Fig9NaiveVsS2 => {
            for k in 0..3u64 {
                let suffix = format!("_seed{k}");
                run_all_methods(&models, cfg, out, cfg.seed + k, &suffix, &mut m)?;
                for g in &cfg.guidance {
                    let tag = format!("{}{suffix}", g.name);
                    let spec = plot_spec(
                        cfg,
                        PlotKind::Scatter2d,
                        vec![samples_file(&tag)],
                        vec![format!("{} (seed {})", describe(g), cfg.seed + k)],
                        &format!("{tag}.svg"),
                    );
                    render_into(out, spec, &mut m)?;
                }
            }
            write_metrics(out, &mut m)?;
        }
        ReproTarget::Ablations => {
            let mut table = String::from("guidance,axis,value,metric,metric_value\n");
            let plan: [(&str, SweepAxis, &[f64]); 5] = [
                ("cfg", SweepAxis::Lambda, &[1.0, 2.0, 3.0, 5.0, 7.5]),
                ("s2", SweepAxis::Lambda, &[1.0, 2.0, 3.0, 5.0, 7.5]),
                ("s2", SweepAxis::Omega, &[0.0, 0.1, 0.25, 0.5]),
                ("s2", SweepAxis::DropCount, &[1.0, 2.0, 3.0]),
                ("naive_s2", SweepAxis::NSubnets, &[1.0, 5.0, 10.0, 20.0]),
            ];
            for (name, axis, values) in plan {
                let spec = cfg.guidance_named(name)?;
                let points = sweep(&models, cfg, spec, axis, values)?;
                for line in sweep_csv(axis, &points).lines().skip(1) {
                    let _ = writeln!(table, "{name},{line}");
                }
                for p in points {
                    let tag = format!("{name}_{}={}", axis.name(), p.value);
                    m.metrics.insert(tag.clone(), p.report);
                    m.call_counts.insert(tag, p.calls);
                }
            }
            write_file(&out.join("ablations.csv"), &table)?;
            m.record_output(out, "ablations.csv")?;
            write_metrics(out, &mut m)?;
        }
    }
    m.wall_time_secs = start.elapsed().as_secs_f64();
    m.write(out)?;
    Ok(m)
}
