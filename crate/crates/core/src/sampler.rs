//! Reverse-process sampling loop.
//!
//! Each timestep `t = T..1` evaluates the predictions the guidance kind needs
//! on the whole batch, combines them and takes one scheduler step. Random
//! numbers come from three independent child streams of the caller's seed:
//! `init` (the starting noise), `noise` (ancestral noise) and `mask` (block
//! masks), so switching guidance kind never perturbs the noise sequence.

use std::cell::Cell;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use crate::denoiser::Cond;
use crate::denoiser::{enumerate_all_masks, mask_with_drop_count, BlockDenoiser, BlockMask};
use crate::error::{Error, Result};
use crate::guidance::{
    autoguidance_combine, cfg_combine, naive_s2_combine, s2_combine, GuidanceKind, GuidanceSpec,
};
use crate::num::Rng;
use crate::schedule::NoiseSchedule;

/// Anything that predicts the noise in a batch of row-major inputs.
pub trait NoisePredictor {
    fn dim(&self) -> usize;

    /// Number of maskable blocks (0 when masking is unsupported).
    fn num_blocks(&self) -> usize;

    fn predict(&self, xs: &[f64], t: usize, cond: Cond, mask: Option<&BlockMask>) -> Result<Vec<f64>>;
}

impl NoisePredictor for BlockDenoiser {
    fn dim(&self) -> usize {
        self.config().dim
    }

    fn num_blocks(&self) -> usize {
        self.config().blocks
    }

    fn predict(&self, xs: &[f64], t: usize, cond: Cond, mask: Option<&BlockMask>) -> Result<Vec<f64>> {
        self.forward_batch(xs, t, cond, mask)
    }
}

/// Counts `predict` calls on the wrapped predictor.
pub struct CountingPredictor<'a> {
    inner: &'a dyn NoisePredictor,
    calls: Cell<u64>,
}

impl<'a> CountingPredictor<'a> {
    pub fn new(inner: &'a dyn NoisePredictor) -> Self {
        Self {
            inner,
            calls: Cell::new(0),
        }
    }

    pub fn calls(&self) -> u64 {
        self.calls.get()
    }
}

impl NoisePredictor for CountingPredictor<'_> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn num_blocks(&self) -> usize {
        self.inner.num_blocks()
    }

    fn predict(&self, xs: &[f64], t: usize, cond: Cond, mask: Option<&BlockMask>) -> Result<Vec<f64>> {
        self.calls.set(self.calls.get() + 1);
        self.inner.predict(xs, t, cond, mask)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplingMode {
    /// DDPM posterior step with fresh noise.
    Ancestral,
    /// DDIM step with η = 0.
    Deterministic,
}

impl std::str::FromStr for SamplingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ancestral" => Ok(Self::Ancestral),
            "deterministic" => Ok(Self::Deterministic),
            _ => Err(Error::InvalidArgument(format!(
                "unknown sampling mode `{s}` (expected ancestral or deterministic)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleBatch {
    dim: usize,
    points: Vec<f64>,
    labels: Vec<usize>,
    provenance: String,
}

impl SampleBatch {
    pub fn new(dim: usize, points: Vec<f64>, labels: Vec<usize>, provenance: String) -> Self {
        assert!(dim > 0 && points.len() == labels.len() * dim, "inconsistent sample batch");
        Self {
            dim,
            points,
            labels,
            provenance,
        }
    }

    pub fn try_new(dim: usize, points: Vec<f64>, labels: Vec<usize>, provenance: String) -> Result<Self> {
        if dim == 0 || points.len() != labels.len() * dim {
            return Err(Error::Shape(format!(
                "{} coordinates for {} labels at dim {dim}",
                points.len(),
                labels.len()
            )));
        }
        if points.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("sample batch has non-finite coordinates".into()));
        }
        Ok(Self::new(dim, points, labels, provenance))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    pub fn set_provenance(&mut self, provenance: String) {
        self.provenance = provenance;
    }

    /// Values of one coordinate across the batch.
    pub fn coordinate(&self, axis: usize) -> Vec<f64> {
        self.points.chunks_exact(self.dim).map(|p| p[axis]).collect()
    }

    /// Sub-batch holding only the given label.
    pub fn with_label(&self, label: usize) -> Self {
        let mut points = Vec::new();
        let mut labels = Vec::new();
        for (p, l) in self.points.chunks_exact(self.dim).zip(&self.labels) {
            if *l == label {
                points.extend_from_slice(p);
                labels.push(*l);
            }
        }
        Self::new(self.dim, points, labels, self.provenance.clone())
    }

    /// Concatenation of batches with a common dimension.
    pub fn concat(batches: &[SampleBatch], provenance: String) -> Result<Self> {
        let dim = batches.first().map_or(1, |b| b.dim);
        let mut points = Vec::new();
        let mut labels = Vec::new();
        for b in batches {
            if b.dim != dim {
                return Err(Error::Shape(format!("cannot concatenate dims {dim} and {}", b.dim)));
            }
            points.extend_from_slice(&b.points);
            labels.extend_from_slice(&b.labels);
        }
        Ok(Self::new(dim, points, labels, provenance))
    }
}

/// Guidance inputs and output at one timestep, for the first chain only.
#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceTerms {
    pub t: usize,
    pub d_uncond: Option<Vec<f64>>,
    pub d_cond: Vec<f64>,
    pub d_weak: Option<Vec<f64>>,
    pub d_tilde: Vec<f64>,
}

/// Full path of every chain: `states[s]` is the batch at `t = T − s`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub dim: usize,
    pub steps: usize,
    pub states: Vec<Vec<f64>>,
    /// Masks drawn at each step, in step order (empty for unmasked kinds).
    pub masks_used: Vec<Vec<BlockMask>>,
    pub guidance_terms: Vec<GuidanceTerms>,
}

impl Trajectory {
    pub fn num_chains(&self) -> usize {
        self.states.first().map_or(0, |s| s.len() / self.dim)
    }

    pub fn timestep(&self, row: usize) -> usize {
        self.steps - row
    }

    /// `(t, point)` rows of one chain, from `t = T` down to 0.
    pub fn chain(&self, i: usize) -> Vec<(usize, &[f64])> {
        self.states
            .iter()
            .enumerate()
            .map(|(s, st)| (self.timestep(s), &st[i * self.dim..(i + 1) * self.dim]))
            .collect()
    }
}

/// Denoiser call counts of one sampling run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallCounts {
    pub main: u64,
    pub weak_model: u64,
}

impl CallCounts {
    pub fn total(&self) -> u64 {
        self.main + self.weak_model
    }
}

#[derive(Debug, Clone)]
pub struct SamplingOutput {
    pub batch: SampleBatch,
    pub trajectory: Option<Trajectory>,
    pub calls: CallCounts,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplingRequest {
    pub n: usize,
    pub class: usize,
    pub mode: SamplingMode,
    pub record: bool,
}

/// The networks a guidance spec may use.
#[derive(Clone, Copy)]
pub struct Predictors<'a> {
    pub main: &'a dyn NoisePredictor,
    /// Separately trained weak model, needed by Autoguidance only.
    pub weak_model: Option<&'a dyn NoisePredictor>,
}

impl<'a> Predictors<'a> {
    pub fn main(main: &'a dyn NoisePredictor) -> Self {
        Self { main, weak_model: None }
    }
}

/// One reverse step `x_t → x_{t−1}` for a batch, using `d_tilde` as the
/// noise estimate. Ancestral mode draws noise for `t > 1` only.
pub fn scheduler_step(
    d_tilde: &[f64],
    x_t: &[f64],
    t: usize,
    sched: &NoiseSchedule,
    mode: SamplingMode,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    if t == 0 || t > sched.steps() {
        return Err(Error::InvalidArgument(format!("scheduler step at t = {t}")));
    }
    if d_tilde.len() != x_t.len() {
        return Err(Error::Shape(format!("noise estimate has {} entries, state {}", d_tilde.len(), x_t.len())));
    }
    let ab = sched.alpha_bar(t);
    let ab_prev = sched.alpha_bar(t - 1);
    let sigma = sched.sigma(t);
    let sqrt_ab = ab.sqrt();
    let x0 = |x: f64, e: f64| (x - sigma * e) / sqrt_ab;
    match mode {
        SamplingMode::Deterministic => {
            let (a, b) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
            Ok(x_t.iter().zip(d_tilde).map(|(x, e)| a * x0(*x, *e) + b * e).collect())
        }
        SamplingMode::Ancestral => {
            let beta = sched.beta(t);
            let c0 = ab_prev.sqrt() * beta / (1.0 - ab);
            let ct = (1.0 - beta).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
            let mut out: Vec<f64> = x_t.iter().zip(d_tilde).map(|(x, e)| c0 * x0(*x, *e) + ct * x).collect();
            if t > 1 {
                let std = ((1.0 - ab_prev) * beta / (1.0 - ab)).sqrt();
                for o in &mut out {
                    *o += std * rng.gauss();
                }
            }
            Ok(out)
        }
    }
}

fn check_spec(models: &Predictors<'_>, spec: &GuidanceSpec) -> Result<()> {
    spec.validate()?;
    let blocks = models.main.num_blocks();
    let need_masks = |drop: &crate::guidance::DropRule| -> Result<()> {
        if blocks < 2 {
            return Err(Error::InvalidArgument(format!(
                "guidance `{}` needs a block-masked network; this predictor has {blocks} blocks",
                spec.name
            )));
        }
        let k = drop.dropped(blocks);
        if k == 0 || k >= blocks {
            return Err(Error::InvalidArgument(format!("cannot drop {k} of {blocks} blocks")));
        }
        Ok(())
    };
    match &spec.kind {
        GuidanceKind::S2 { drop, .. } | GuidanceKind::NaiveS2 { drop, .. } => need_masks(drop),
        GuidanceKind::Autoguidance { weak_ref, .. } => match models.weak_model {
            Some(w) if w.dim() == models.main.dim() => Ok(()),
            Some(_) => Err(Error::Shape("weak model dimension differs from the main model".into())),
            None => Err(Error::InvalidArgument(format!(
                "autoguidance `{}` needs the weak model `{weak_ref}`",
                spec.name
            ))),
        },
        _ => Ok(()),
    }
}

/// Runs the full reverse process for `req.n` chains of class `req.class`.
pub fn run_sampling(
    models: Predictors<'_>,
    sched: &NoiseSchedule,
    spec: &GuidanceSpec,
    req: SamplingRequest,
    rng: &Rng,
) -> Result<SamplingOutput> {
    check_spec(&models, spec)?;
    let main = CountingPredictor::new(models.main);
    let weak_model = models.weak_model.map(CountingPredictor::new);
    let dim = main.dim();
    let blocks = main.num_blocks();
    let cond = Cond::Class(req.class);

    let mut init_rng = rng.split("init");
    let mut noise_rng = rng.split("noise");
    let mut mask_rng = rng.split("mask");

    let exhaustive_masks = match &spec.kind {
        GuidanceKind::NaiveS2 {
            drop, exhaustive: true, ..
        } => enumerate_all_masks(blocks, drop.dropped(blocks))?,
        _ => Vec::new(),
    };

    let mut x = vec![0.0; req.n * dim];
    init_rng.fill_gauss(&mut x);
    let steps = sched.steps();
    let mut traj = req.record.then(|| Trajectory {
        dim,
        steps,
        states: vec![x.clone()],
        masks_used: Vec::new(),
        guidance_terms: Vec::new(),
    });

    for t in (1..=steps).rev() {
        let mut masks_now = Vec::new();
        let (d_uncond, d_cond, d_weak, d_tilde) = match &spec.kind {
            GuidanceKind::Unguided => {
                let c = main.predict(&x, t, cond, None)?;
                (None, c.clone(), None, c)
            }
            GuidanceKind::Cfg { lambda } => {
                let u = main.predict(&x, t, Cond::Null, None)?;
                let c = main.predict(&x, t, cond, None)?;
                let g = cfg_combine(&u, &c, *lambda)?;
                (Some(u), c, None, g)
            }
            GuidanceKind::S2 { lambda, omega, drop } => {
                let m = mask_with_drop_count(blocks, drop.dropped(blocks), &mut mask_rng)?;
                let u = main.predict(&x, t, Cond::Null, None)?;
                let c = main.predict(&x, t, cond, None)?;
                let w = main.predict(&x, t, cond, Some(&m))?;
                let g = s2_combine(&u, &c, &w, *lambda, *omega)?;
                masks_now.push(m);
                (Some(u), c, Some(w), g)
            }
            GuidanceKind::NaiveS2 {
                lambda,
                omega,
                n_subnets,
                drop,
                exhaustive,
            } => {
                if *exhaustive {
                    masks_now = exhaustive_masks.clone();
                } else {
                    for _ in 0..*n_subnets {
                        masks_now.push(mask_with_drop_count(blocks, drop.dropped(blocks), &mut mask_rng)?);
                    }
                }
                let u = main.predict(&x, t, Cond::Null, None)?;
                let c = main.predict(&x, t, cond, None)?;
                let ws: Vec<Vec<f64>> = masks_now
                    .iter()
                    .map(|m| main.predict(&x, t, cond, Some(m)))
                    .collect::<Result<_>>()?;
                let g = naive_s2_combine(&u, &c, &ws, *lambda, *omega)?;
                let first = ws.into_iter().next();
                (Some(u), c, first, g)
            }
            GuidanceKind::Autoguidance { ag_scale, .. } => {
                let c = main.predict(&x, t, cond, None)?;
                let w = weak_model.as_ref().expect("checked above").predict(&x, t, cond, None)?;
                let g = autoguidance_combine(&w, &c, *ag_scale)?;
                (None, c, Some(w), g)
            }
        };
        x = scheduler_step(&d_tilde, &x, t, sched, req.mode, &mut noise_rng)?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence(format!(
                "sampling `{}` produced a non-finite state at t = {t}",
                spec.name
            )));
        }
        if let Some(tr) = traj.as_mut() {
            let head = |v: &[f64]| v[..dim.min(v.len())].to_vec();
            tr.guidance_terms.push(GuidanceTerms {
                t,
                d_uncond: d_uncond.as_deref().map(head),
                d_cond: head(&d_cond),
                d_weak: d_weak.as_deref().map(head),
                d_tilde: head(&d_tilde),
            });
            tr.masks_used.push(masks_now);
            tr.states.push(x.clone());
        }
    }

    let calls = CallCounts {
        main: main.calls(),
        weak_model: weak_model.as_ref().map_or(0, |w| w.calls()),
    };
    Ok(SamplingOutput {
        batch: SampleBatch::new(dim, x, vec![req.class; req.n], String::new()),
        trajectory: traj,
        calls,
    })
}

/// Calls `run_sampling` is expected to make for a spec over `steps` steps.
pub fn expected_calls(spec: &GuidanceSpec, steps: usize, blocks: usize) -> CallCounts {
    let t = steps as u64;
    match &spec.kind {
        GuidanceKind::Unguided => CallCounts { main: t, weak_model: 0 },
        GuidanceKind::Cfg { .. } => CallCounts { main: 2 * t, weak_model: 0 },
        GuidanceKind::S2 { .. } => CallCounts { main: 3 * t, weak_model: 0 },
        GuidanceKind::NaiveS2 {
            n_subnets,
            drop,
            exhaustive,
            ..
        } => {
            let n = if *exhaustive {
                enumerate_all_masks(blocks, drop.dropped(blocks)).map_or(0, |m| m.len())
            } else {
                *n_subnets
            };
            CallCounts {
                main: (2 + n as u64) * t,
                weak_model: 0,
            }
        }
        GuidanceKind::Autoguidance { .. } => CallCounts { main: t, weak_model: t },
    }
}

fn coord_header(dim: usize) -> &'static str {
    if dim == 1 {
        "x"
    } else {
        "x,y"
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// CSV with header `x[,y],label`.
pub fn samples_csv(batch: &SampleBatch) -> String {
    let mut s = format!("{},label\n", coord_header(batch.dim()));
    for i in 0..batch.len() {
        for v in batch.point(i) {
            let _ = write!(s, "{v},");
        }
        let _ = writeln!(s, "{}", batch.labels()[i]);
    }
    s
}

pub fn write_samples_csv(path: &Path, batch: &SampleBatch) -> Result<()> {
    write_text(path, &samples_csv(batch))
}

/// CSV with header `chain,t,x[,y]`, chains in order, `t` descending.
pub fn trajectory_csv(traj: &Trajectory) -> String {
    let mut s = format!("chain,t,{}\n", coord_header(traj.dim));
    for i in 0..traj.num_chains() {
        for (t, p) in traj.chain(i) {
            let _ = write!(s, "{i},{t}");
            for v in p {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
    }
    s
}

pub fn write_trajectory_csv(path: &Path, traj: &Trajectory) -> Result<()> {
    write_text(path, &trajectory_csv(traj))
}

/// Reads a headed CSV into rows of numbers, with `path:line` errors.
pub(crate) fn read_numeric_csv(path: &Path, expected: &[&[&str]]) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_numeric_csv(&path.display().to_string(), &text, expected)
}

pub(crate) fn parse_numeric_csv(
    origin: &str,
    text: &str,
    expected: &[&[&str]],
) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let err = |line: usize, message: String| Error::Parse {
        path: origin.to_string(),
        line,
        message,
    };
    let mut lines = text.lines().enumerate();
    let header: Vec<String> = match lines.next() {
        Some((_, h)) => h.split(',').map(|c| c.trim().to_string()).collect(),
        None => return Err(err(1, "missing header".into())),
    };
    if !expected.iter().any(|e| e.iter().copied().eq(header.iter().map(String::as_str))) {
        let options: Vec<String> = expected.iter().map(|e| e.join(",")).collect();
        return Err(err(1, format!("header `{}` is not one of: {}", header.join(","), options.join(" | "))));
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != header.len() {
            return Err(err(i + 1, format!("expected {} fields, found {}", header.len(), fields.len())));
        }
        let row = fields
            .iter()
            .map(|f| {
                let v: f64 = f.trim().parse().map_err(|_| err(i + 1, format!("`{f}` is not a number")))?;
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(err(i + 1, format!("`{f}` is not finite")))
                }
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    Ok((header, rows))
}

fn as_index(v: f64, origin: &str, line: usize, what: &str) -> Result<usize> {
    if v >= 0.0 && v.fract() == 0.0 {
        Ok(v as usize)
    } else {
        Err(Error::Parse {
            path: origin.to_string(),
            line,
            message: format!("{what} `{v}` is not a non-negative integer"),
        })
    }
}

pub fn parse_samples_csv(origin: &str, text: &str) -> Result<SampleBatch> {
    let (header, rows) = parse_numeric_csv(origin, text, &[&["x", "label"], &["x", "y", "label"]])?;
    let dim = header.len() - 1;
    let mut points = Vec::with_capacity(rows.len() * dim);
    let mut labels = Vec::with_capacity(rows.len());
    for (i, r) in rows.iter().enumerate() {
        points.extend_from_slice(&r[..dim]);
        labels.push(as_index(r[dim], origin, i + 2, "label")?);
    }
    SampleBatch::try_new(dim, points, labels, String::new())
}

pub fn read_samples_csv(path: &Path) -> Result<SampleBatch> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_samples_csv(&path.display().to_string(), &text)
}

/// Trajectory rows `(chain, t, point)` as written by [`trajectory_csv`].
pub fn read_trajectory_csv(path: &Path) -> Result<(usize, Vec<(usize, usize, Vec<f64>)>)> {
    let origin = path.display().to_string();
    let (header, rows) = read_numeric_csv(path, &[&["chain", "t", "x"], &["chain", "t", "x", "y"]])?;
    let dim = header.len() - 2;
    let mut out = Vec::with_capacity(rows.len());
    for (i, r) in rows.into_iter().enumerate() {
        let chain = as_index(r[0], &origin, i + 2, "chain")?;
        let t = as_index(r[1], &origin, i + 2, "t")?;
        out.push((chain, t, r[2..].to_vec()));
    }
    Ok((dim, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gmm::{GaussianMixture, OracleDenoiser};
    use crate::guidance::DropRule;
    use crate::schedule::ScheduleConfig;

    fn sched() -> NoiseSchedule {
        NoiseSchedule::new(ScheduleConfig::default()).unwrap()
    }

    #[test]
    fn deterministic_step_inverts_forward_map_at_t1() {
        let s = sched();
        let mut rng = Rng::new(1);
        let x0 = [0.7, -3.2, 4.1];
        let eps = [0.3, -1.1, 2.0];
        let a = s.alpha_bar(1).sqrt();
        let xt: Vec<f64> = x0.iter().zip(&eps).map(|(x, e)| a * x + s.sigma(1) * e).collect();
        let back = scheduler_step(&eps, &xt, 1, &s, SamplingMode::Deterministic, &mut rng).unwrap();
        for (b, x) in back.iter().zip(&x0) {
            assert!((b - x).abs() < 1e-12);
        }
        // The ancestral step at t = 1 is also noise free.
        let anc = scheduler_step(&eps, &xt, 1, &s, SamplingMode::Ancestral, &mut rng).unwrap();
        for (b, x) in anc.iter().zip(&x0) {
            assert!((b - x).abs() < 1e-12);
        }
    }

    #[test]
    fn ancestral_is_reproducible() {
        let s = sched();
        let oracle = OracleDenoiser::new(GaussianMixture::toy_1d(), s.clone());
        let req = SamplingRequest {
            n: 16,
            class: 1,
            mode: SamplingMode::Ancestral,
            record: false,
        };
        let a = run_sampling(Predictors::main(&oracle), &s, &GuidanceSpec::cfg(2.0), req, &Rng::new(5)).unwrap();
        let b = run_sampling(Predictors::main(&oracle), &s, &GuidanceSpec::cfg(2.0), req, &Rng::new(5)).unwrap();
        assert_eq!(a.batch, b.batch);
        assert_eq!(a.calls.main, 400);
    }

    #[test]
    fn trajectory_endpoints() {
        let s = sched();
        let oracle = OracleDenoiser::new(GaussianMixture::toy_2d(), s.clone());
        let req = SamplingRequest {
            n: 5,
            class: 2,
            mode: SamplingMode::Deterministic,
            record: true,
        };
        let out = run_sampling(Predictors::main(&oracle), &s, &GuidanceSpec::unguided(), req, &Rng::new(9)).unwrap();
        let tr = out.trajectory.unwrap();
        assert_eq!(tr.states.len(), 201);
        let mut init = Rng::new(9).split("init");
        let mut x = vec![0.0; 10];
        init.fill_gauss(&mut x);
        assert_eq!(tr.states[0], x);
        assert_eq!(tr.states[200], out.batch.points());
        assert_eq!(tr.num_chains(), 5);
        assert_eq!(tr.chain(3)[0].0, 200);
        assert_eq!(tr.guidance_terms.len(), 200);
    }

    #[test]
    fn mask_guidance_needs_blocks() {
        let s = sched();
        let oracle = OracleDenoiser::new(GaussianMixture::toy_1d(), s.clone());
        let req = SamplingRequest {
            n: 2,
            class: 0,
            mode: SamplingMode::Ancestral,
            record: false,
        };
        let spec = GuidanceSpec::s2(3.0, 0.25, DropRule::ratio(0.1));
        assert!(run_sampling(Predictors::main(&oracle), &s, &spec, req, &Rng::new(0)).is_err());
        let ag = GuidanceSpec::autoguidance("weak", 2.0);
        assert!(run_sampling(Predictors::main(&oracle), &s, &ag, req, &Rng::new(0)).is_err());
    }

    #[test]
    fn csv_round_trip_and_errors() {
        let b = SampleBatch::new(2, vec![0.1, -2.5, 1e-300, 7.0], vec![0, 3], String::new());
        let text = samples_csv(&b);
        assert!(text.starts_with("x,y,label\n"));
        assert_eq!(parse_samples_csv("mem", &text).unwrap(), b);

        let e = parse_samples_csv("mem", "x,label\n1.0,0\nfoo,1\n").unwrap_err();
        assert!(matches!(e, Error::Parse { line: 3, .. }), "{e}");
        let e = parse_samples_csv("mem", "x,label\n1.0,0,4\n").unwrap_err();
        assert!(matches!(e, Error::Parse { line: 2, .. }));
        let e = parse_samples_csv("mem", "a,b\n").unwrap_err();
        assert!(matches!(e, Error::Parse { line: 1, .. }));
        let e = parse_samples_csv("mem", "x,label\n1.0,0.5\n").unwrap_err();
        assert!(matches!(e, Error::Parse { line: 2, .. }));
        assert!(parse_samples_csv("mem", "x,label\n").unwrap().is_empty());
    }
}
