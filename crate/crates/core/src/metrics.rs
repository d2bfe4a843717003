//! Distances between sample sets and mixtures, plus mode diagnostics.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gmm::{sample_ground_truth, Component, GaussianMixture};
use crate::num::{quantile_sorted, sorted, std_dev, Rng};
use crate::sampler::SampleBatch;

const QUANTILE_GRID: usize = 1 << 14;
const KDE_GRID: usize = 1 << 12;

fn require_1d(b: &SampleBatch, what: &str) -> Result<()> {
    if b.dim() != 1 {
        return Err(Error::Shape(format!("{what} needs 1-D samples, got dim {}", b.dim())));
    }
    Ok(())
}

fn require_nonempty(b: &SampleBatch, what: &str) -> Result<()> {
    if b.is_empty() {
        return Err(Error::InvalidArgument(format!("{what} of an empty batch")));
    }
    Ok(())
}

/// Exact W1 between two empirical laws on the line: the integral of the gap
/// between their quantile functions, which are step functions.
pub fn wasserstein1_sorted(a: &[f64], b: &[f64]) -> f64 {
    let (n, m) = (a.len(), b.len());
    if n == m {
        return a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / n as f64;
    }
    // Walk the merged breakpoints i/n and j/m using integer cross-multiplication.
    let (mut i, mut j) = (0usize, 0usize);
    let mut last = 0u128;
    let total = (n as u128) * (m as u128);
    let mut acc = 0.0;
    while i < n && j < m {
        let next_a = (i as u128 + 1) * m as u128;
        let next_b = (j as u128 + 1) * n as u128;
        let next = next_a.min(next_b);
        acc += (next - last) as f64 * (a[i] - b[j]).abs();
        last = next;
        if next_a == next {
            i += 1;
        }
        if next_b == next {
            j += 1;
        }
    }
    acc / total as f64
}

pub fn wasserstein1_1d(a: &SampleBatch, b: &SampleBatch) -> Result<f64> {
    require_1d(a, "wasserstein1_1d")?;
    require_1d(b, "wasserstein1_1d")?;
    require_nonempty(a, "wasserstein1_1d")?;
    require_nonempty(b, "wasserstein1_1d")?;
    Ok(wasserstein1_sorted(&sorted(a.points()), &sorted(b.points())))
}

/// W1 to an analytic law given by its quantile function, integrated with the
/// midpoint rule on a 2^14-point grid in probability space.
pub fn wasserstein1_to_quantile(a: &SampleBatch, quantile: impl Fn(f64) -> f64) -> Result<f64> {
    require_1d(a, "wasserstein1_to_quantile")?;
    require_nonempty(a, "wasserstein1_to_quantile")?;
    let s = sorted(a.points());
    let n = s.len();
    let mut acc = 0.0;
    for i in 0..QUANTILE_GRID {
        let u = (i as f64 + 0.5) / QUANTILE_GRID as f64;
        let emp = s[((u * n as f64) as usize).min(n - 1)];
        acc += (emp - quantile(u)).abs();
    }
    Ok(acc / QUANTILE_GRID as f64)
}

pub fn wasserstein1_to_gmm(a: &SampleBatch, gmm: &GaussianMixture) -> Result<f64> {
    if gmm.dim() != 1 {
        return Err(Error::Shape("wasserstein1_to_gmm needs a 1-D mixture".into()));
    }
    wasserstein1_to_quantile(a, |u| gmm.quantile_1d(u))
}

/// The mixture restricted to the labels present in `labels`, reweighted by
/// their empirical frequencies.
pub fn label_mixture(gmm: &GaussianMixture, labels: &[usize]) -> Result<GaussianMixture> {
    let k = gmm.num_components();
    let mut counts = vec![0usize; k];
    for &l in labels {
        if l >= k {
            return Err(Error::InvalidArgument(format!("label {l} out of range 0..{k}")));
        }
        counts[l] += 1;
    }
    if labels.is_empty() {
        return Err(Error::InvalidArgument("no labels".into()));
    }
    let comps: Vec<Component> = gmm
        .components()
        .iter()
        .zip(&counts)
        .filter(|(_, c)| **c > 0)
        .map(|(comp, c)| Component {
            weight: *c as f64 / labels.len() as f64,
            ..comp.clone()
        })
        .collect();
    // Renormalize exactly so rounding never trips the weight check.
    let total: f64 = comps.iter().map(|c| c.weight).sum();
    GaussianMixture::new(
        comps
            .into_iter()
            .map(|c| Component {
                weight: c.weight / total,
                ..c
            })
            .collect(),
    )
}

fn silverman(v: &[f64]) -> f64 {
    let s = sorted(v);
    let iqr = quantile_sorted(&s, 0.75) - quantile_sorted(&s, 0.25);
    let sd = std_dev(v);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    0.9 * spread * (v.len() as f64).powf(-0.2)
}

/// Argmax of a Gaussian KDE (Silverman bandwidth per axis) on a grid of
/// 2^12 points spanning the sample range widened by 1 on each side.
pub fn kde_peak(batch: &SampleBatch) -> Result<Vec<f64>> {
    require_nonempty(batch, "kde_peak")?;
    let dim = batch.dim();
    let axes: Vec<Vec<f64>> = (0..dim).map(|d| batch.coordinate(d)).collect();
    let bws: Vec<f64> = axes.iter().map(|a| silverman(a)).collect();
    if bws.iter().any(|b| *b == 0.0 || !b.is_finite()) {
        // Degenerate spread: the most common point is the peak.
        let mut pts: Vec<&[f64]> = (0..batch.len()).map(|i| batch.point(i)).collect();
        pts.sort_by(|a, b| a.iter().zip(*b).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal));
        let (mut best, mut best_run, mut run) = (pts[0], 0, 0);
        for i in 0..pts.len() {
            run = if i > 0 && pts[i] == pts[i - 1] { run + 1 } else { 1 };
            if run > best_run {
                best_run = run;
                best = pts[i];
            }
        }
        return Ok(best.to_vec());
    }
    let per_axis = if dim == 1 { KDE_GRID } else { 64 };
    let grids: Vec<Vec<f64>> = axes
        .iter()
        .map(|a| {
            let lo = a.iter().copied().fold(f64::INFINITY, f64::min) - 1.0;
            let hi = a.iter().copied().fold(f64::NEG_INFINITY, f64::max) + 1.0;
            (0..per_axis).map(|i| lo + (hi - lo) * i as f64 / (per_axis - 1) as f64).collect()
        })
        .collect();

    // Points sorted by the first coordinate, so each grid column only visits
    // samples within 8 bandwidths.
    let mut order: Vec<usize> = (0..batch.len()).collect();
    order.sort_by(|&i, &j| axes[0][i].total_cmp(&axes[0][j]));
    let xs: Vec<f64> = order.iter().map(|&i| axes[0][i]).collect();
    let ys: Vec<f64> = if dim == 2 { order.iter().map(|&i| axes[1][i]).collect() } else { Vec::new() };
    let cut = 8.0;

    let mut best = (f64::NEG_INFINITY, vec![0.0; dim]);
    for &gx in &grids[0] {
        let lo = xs.partition_point(|x| *x < gx - cut * bws[0]);
        let hi = xs.partition_point(|x| *x <= gx + cut * bws[0]);
        let wx: Vec<f64> = xs[lo..hi]
            .iter()
            .map(|x| {
                let z = (x - gx) / bws[0];
                (-0.5 * z * z).exp()
            })
            .collect();
        if dim == 1 {
            let dens: f64 = wx.iter().sum();
            if dens > best.0 {
                best = (dens, vec![gx]);
            }
            continue;
        }
        for &gy in &grids[1] {
            let mut dens = 0.0;
            for (w, y) in wx.iter().zip(&ys[lo..hi]) {
                let z = (y - gy) / bws[1];
                if z.abs() < cut {
                    dens += w * (-0.5 * z * z).exp();
                }
            }
            if dens > best.0 {
                best = (dens, vec![gx, gy]);
            }
        }
    }
    Ok(best.1)
}

/// Signed outward displacement of the sample peak from the mode of
/// component `class`: the offset projected on the direction of the mean
/// (for a zero mean, along the first axis).
pub fn mode_shift(samples: &SampleBatch, gmm: &GaussianMixture, class: usize) -> Result<f64> {
    require_nonempty(samples, "mode_shift")?;
    if class >= gmm.num_components() {
        return Err(Error::InvalidArgument(format!("class {class} out of range")));
    }
    if samples.dim() != gmm.dim() {
        return Err(Error::Shape("samples and mixture dimensions differ".into()));
    }
    let mu = &gmm.components()[class].mean;
    let peak = kde_peak(samples)?;
    let norm = mu.iter().map(|m| m * m).sum::<f64>().sqrt();
    let delta: Vec<f64> = peak.iter().zip(mu).map(|(p, m)| p - m).collect();
    Ok(if norm == 0.0 {
        delta[0]
    } else {
        delta.iter().zip(mu).map(|(d, m)| d * m / norm).sum()
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeCoverage {
    pub fractions: Vec<f64>,
    pub unassigned: f64,
    pub counts: Vec<usize>,
    pub unassigned_count: usize,
}

/// Fraction of samples within `radius` of each component mean (nearest mean
/// wins if several qualify). `unassigned` is defined as `1 − Σ fractions`.
pub fn mode_coverage(samples: &SampleBatch, gmm: &GaussianMixture, radius: f64) -> Result<ModeCoverage> {
    if !(radius > 0.0 && radius.is_finite()) {
        return Err(Error::InvalidArgument(format!("radius {radius} must be positive")));
    }
    if samples.dim() != gmm.dim() {
        return Err(Error::Shape("samples and mixture dimensions differ".into()));
    }
    let k = gmm.num_components();
    let mut counts = vec![0usize; k];
    let mut unassigned_count = 0;
    for i in 0..samples.len() {
        let p = samples.point(i);
        let nearest = gmm
            .components()
            .iter()
            .map(|c| c.mean.iter().zip(p).map(|(m, x)| (m - x) * (m - x)).sum::<f64>())
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(&b.1));
        match nearest {
            Some((j, d2)) if d2 <= radius * radius => counts[j] += 1,
            _ => unassigned_count += 1,
        }
    }
    let n = samples.len().max(1) as f64;
    let fractions: Vec<f64> = counts.iter().map(|c| *c as f64 / n).collect();
    let assigned: f64 = fractions.iter().sum();
    let unassigned = if samples.is_empty() { 0.0 } else { 1.0 - assigned };
    Ok(ModeCoverage {
        fractions,
        unassigned,
        counts,
        unassigned_count,
    })
}

fn random_direction(dim: usize, rng: &mut Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.gauss()).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            return v.iter().map(|x| x / n).collect();
        }
    }
}

/// Mean 1-D W1 between projections onto `n_projections` random directions.
pub fn sliced_wasserstein(a: &SampleBatch, b: &SampleBatch, n_projections: usize, rng: &mut Rng) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("dims {} and {} differ", a.dim(), b.dim())));
    }
    require_nonempty(a, "sliced_wasserstein")?;
    require_nonempty(b, "sliced_wasserstein")?;
    if n_projections == 0 {
        return Err(Error::InvalidArgument("need at least one projection".into()));
    }
    let project = |s: &SampleBatch, dir: &[f64]| -> Vec<f64> {
        let v: Vec<f64> = (0..s.len())
            .map(|i| s.point(i).iter().zip(dir).map(|(x, d)| x * d).sum())
            .collect();
        sorted(&v)
    };
    let mut acc = 0.0;
    for _ in 0..n_projections {
        let dir = random_direction(a.dim(), rng);
        acc += wasserstein1_sorted(&project(a, &dir), &project(b, &dir));
    }
    Ok(acc / n_projections as f64)
}

/// `KL(P̂ ‖ Q)` between the sample histogram and the mixture's bin masses.
/// Bins tile `[min μ − 6σ, max μ + 6σ]` per axis; the outer bins extend to
/// infinity so every sample lands somewhere.
pub fn hist_kl(samples: &SampleBatch, gmm: &GaussianMixture, bins: usize) -> Result<f64> {
    require_nonempty(samples, "hist_kl")?;
    if bins < 2 {
        return Err(Error::InvalidArgument("hist_kl needs at least 2 bins per axis".into()));
    }
    let dim = gmm.dim();
    if samples.dim() != dim {
        return Err(Error::Shape("samples and mixture dimensions differ".into()));
    }
    let edges: Vec<Vec<f64>> = (0..dim)
        .map(|d| {
            let lo = gmm
                .components()
                .iter()
                .map(|c| c.mean[d] - 6.0 * c.variance[d].sqrt())
                .fold(f64::INFINITY, f64::min);
            let hi = gmm
                .components()
                .iter()
                .map(|c| c.mean[d] + 6.0 * c.variance[d].sqrt())
                .fold(f64::NEG_INFINITY, f64::max);
            let mut e: Vec<f64> = (0..=bins).map(|i| lo + (hi - lo) * i as f64 / bins as f64).collect();
            e[0] = f64::NEG_INFINITY;
            e[bins] = f64::INFINITY;
            e
        })
        .collect();
    let bin_of = |d: usize, x: f64| (edges[d].partition_point(|e| *e <= x) - 1).min(bins - 1);
    let cells = bins.pow(dim as u32);
    let mut counts = vec![0usize; cells];
    for i in 0..samples.len() {
        let p = samples.point(i);
        let mut idx = 0;
        for (d, x) in p.iter().enumerate() {
            idx = idx * bins + bin_of(d, *x);
        }
        counts[idx] += 1;
    }
    let n = samples.len() as f64;
    let mut kl = 0.0;
    for (cell, &c) in counts.iter().enumerate() {
        if c == 0 {
            continue;
        }
        let mut lo = vec![0.0; dim];
        let mut hi = vec![0.0; dim];
        let mut rem = cell;
        for d in (0..dim).rev() {
            let b = rem % bins;
            rem /= bins;
            lo[d] = edges[d][b];
            hi[d] = edges[d][b + 1];
        }
        let q = gmm.box_mass(&lo, &hi).max(1e-300);
        let p = c as f64 / n;
        kl += p * (p / q).ln();
    }
    Ok(kl.max(0.0))
}

/// Mean pairwise distance between label centroids divided by the mean
/// distance of points to their own centroid.
pub fn cluster_separation(batch: &SampleBatch) -> Result<f64> {
    require_nonempty(batch, "cluster_separation")?;
    let dim = batch.dim();
    let max_label = *batch.labels().iter().max().unwrap();
    let mut sums = vec![vec![0.0; dim]; max_label + 1];
    let mut counts = vec![0usize; max_label + 1];
    for i in 0..batch.len() {
        let l = batch.labels()[i];
        counts[l] += 1;
        for (s, x) in sums[l].iter_mut().zip(batch.point(i)) {
            *s += x;
        }
    }
    let present: Vec<usize> = (0..=max_label).filter(|&l| counts[l] > 0).collect();
    if present.len() < 2 {
        return Err(Error::InvalidArgument("cluster_separation needs at least two labels".into()));
    }
    let centroids: Vec<Vec<f64>> = (0..=max_label)
        .map(|l| sums[l].iter().map(|s| s / counts[l].max(1) as f64).collect())
        .collect();
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let mut intra = 0.0;
    for i in 0..batch.len() {
        intra += dist(batch.point(i), &centroids[batch.labels()[i]]);
    }
    intra /= batch.len() as f64;
    let mut inter = 0.0;
    let mut pairs = 0;
    for (a, &la) in present.iter().enumerate() {
        for &lb in &present[a + 1..] {
            inter += dist(&centroids[la], &centroids[lb]);
            pairs += 1;
        }
    }
    inter /= pairs as f64;
    if intra == 0.0 {
        return Err(Error::InvalidArgument("clusters have zero spread".into()));
    }
    Ok(inter / intra)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    pub radius: f64,
    pub projections: usize,
    pub bins: usize,
    pub seed: u64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            radius: 2.0,
            projections: 64,
            bins: 50,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n: usize,
    /// W1 to the label-weighted mixture (1-D only).
    pub wasserstein1: Option<f64>,
    /// Sliced W1 to a reference draw of the same size (2-D only).
    pub sliced_w: Option<f64>,
    /// Per class present in the batch: `(class, outward shift)`.
    pub mode_shift: Vec<(usize, f64)>,
    pub mode_coverage: Vec<f64>,
    pub unassigned: f64,
    pub hist_kl: f64,
    pub cluster_separation: Option<f64>,
}

impl MetricsReport {
    pub fn mode_shift_of(&self, class: usize) -> Option<f64> {
        self.mode_shift.iter().find(|(c, _)| *c == class).map(|(_, s)| *s)
    }

    /// Flat `(column, value)` pairs; absent values are empty strings.
    pub fn columns(&self) -> Vec<(String, String)> {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut cols = vec![
            ("n".to_string(), self.n.to_string()),
            ("wasserstein1".into(), opt(self.wasserstein1)),
            ("sliced_w".into(), opt(self.sliced_w)),
            ("hist_kl".into(), self.hist_kl.to_string()),
            ("cluster_separation".into(), opt(self.cluster_separation)),
            ("unassigned".into(), self.unassigned.to_string()),
        ];
        for (k, f) in self.mode_coverage.iter().enumerate() {
            cols.push((format!("coverage_{k}"), f.to_string()));
        }
        for (k, s) in &self.mode_shift {
            cols.push((format!("mode_shift_{k}"), s.to_string()));
        }
        cols
    }

    pub fn csv_header(&self) -> String {
        self.columns().into_iter().map(|(k, _)| k).collect::<Vec<_>>().join(",")
    }

    pub fn csv_row(&self) -> String {
        self.columns().into_iter().map(|(_, v)| v).collect::<Vec<_>>().join(",")
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{}", self.csv_header());
        let _ = writeln!(s, "{}", self.csv_row());
        s
    }
}

/// Ground-truth draws with exactly the batch's per-label counts, so the
/// comparison carries no multinomial noise in the mode proportions.
pub fn matched_reference(samples: &SampleBatch, gmm: &GaussianMixture, rng: &Rng) -> Result<SampleBatch> {
    let k = gmm.num_components();
    let mut counts = vec![0usize; k];
    for &l in samples.labels() {
        if l >= k {
            return Err(Error::InvalidArgument(format!("label {l} out of range 0..{k}")));
        }
        counts[l] += 1;
    }
    let mut parts = Vec::new();
    for (label, &c) in counts.iter().enumerate() {
        if c > 0 {
            let law = gmm.conditional(label)?;
            let mut r = rng.split_index("class", label as u64);
            let mut b = sample_ground_truth(&law, c, &mut r);
            b = SampleBatch::new(b.dim(), b.points().to_vec(), vec![label; c], String::new());
            parts.push(b);
        }
    }
    SampleBatch::concat(&parts, "ground-truth".into())
}

/// Every metric applicable to the batch, against the mixture restricted to
/// the batch's labels.
pub fn evaluate(samples: &SampleBatch, gmm: &GaussianMixture, cfg: &MetricsConfig) -> Result<MetricsReport> {
    require_nonempty(samples, "evaluate")?;
    let reference = label_mixture(gmm, samples.labels())?;
    let rng = Rng::new(cfg.seed);
    let (wasserstein1, sliced_w) = if samples.dim() == 1 {
        (Some(wasserstein1_to_gmm(samples, &reference)?), None)
    } else {
        let gt = matched_reference(samples, gmm, &rng.split("reference"))?;
        let sw = sliced_wasserstein(samples, &gt, cfg.projections, &mut rng.split("projections"))?;
        (None, Some(sw))
    };
    let mut classes: Vec<usize> = samples.labels().to_vec();
    classes.sort_unstable();
    classes.dedup();
    let mode_shift = classes
        .iter()
        .map(|&c| Ok((c, mode_shift(&samples.with_label(c), gmm, c)?)))
        .collect::<Result<Vec<_>>>()?;
    let cov = mode_coverage(samples, gmm, cfg.radius)?;
    let cluster_separation = if classes.len() >= 2 && samples.dim() == 2 {
        Some(cluster_separation(samples)?)
    } else {
        None
    };
    Ok(MetricsReport {
        n: samples.len(),
        wasserstein1,
        sliced_w,
        mode_shift,
        mode_coverage: cov.fractions,
        unassigned: cov.unassigned,
        hist_kl: hist_kl(samples, &reference, cfg.bins)?,
        cluster_separation,
    })
}
