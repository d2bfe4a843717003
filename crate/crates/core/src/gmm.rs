//! Closed-form Gaussian-mixture ground truth under the VP forward process.
//!
//! Component `i` of `x_t` is `N(√ᾱ_t μ_i, ᾱ_t σ_i² + 1 − ᾱ_t)`, so densities,
//! scores and the Bayes-optimal noise predictor are all available exactly.
//! Class `k` is identified with component `k`; the unconditional law is the
//! full mixture.

use serde::{Deserialize, Serialize};
use statrs::function::erf::erf;

use crate::error::{Error, Result};
use crate::num::{log_sum_exp, Rng};
use crate::sampler::{Cond, NoisePredictor, SampleBatch};
use crate::schedule::NoiseSchedule;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Component {
    pub weight: f64,
    pub mean: Vec<f64>,
    /// Diagonal covariance.
    pub variance: Vec<f64>,
}

/// Diagonal-covariance mixture in 1 or 2 dimensions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Component>", into = "Vec<Component>")]
pub struct GaussianMixture {
    components: Vec<Component>,
}

impl TryFrom<Vec<Component>> for GaussianMixture {
    type Error = Error;
    fn try_from(v: Vec<Component>) -> Result<Self> {
        GaussianMixture::new(v)
    }
}

impl From<GaussianMixture> for Vec<Component> {
    fn from(g: GaussianMixture) -> Self {
        g.components
    }
}

impl GaussianMixture {
    /// Weights must be non-negative and sum to 1 (within 1e-12); variances positive.
    pub fn new(components: Vec<Component>) -> Result<Self> {
        let key = "data.components";
        let first = components
            .first()
            .ok_or_else(|| Error::config(key, "mixture needs at least one component"))?;
        let dim = first.mean.len();
        if !(1..=2).contains(&dim) {
            return Err(Error::config(key, format!("dimension must be 1 or 2, got {dim}")));
        }
        let mut total = 0.0;
        for (i, c) in components.iter().enumerate() {
            if c.mean.len() != dim || c.variance.len() != dim {
                return Err(Error::config(
                    format!("{key}[{i}]"),
                    format!("mean and variance must both have {dim} entries"),
                ));
            }
            if !(c.weight >= 0.0 && c.weight.is_finite()) {
                return Err(Error::config(format!("{key}[{i}].weight"), "weight must be >= 0"));
            }
            if c.variance.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
                return Err(Error::config(
                    format!("{key}[{i}].variance"),
                    "variances must be positive and finite",
                ));
            }
            if c.mean.iter().any(|m| !m.is_finite()) {
                return Err(Error::config(format!("{key}[{i}].mean"), "means must be finite"));
            }
            total += c.weight;
        }
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::config(key, format!("weights sum to {total}, expected 1")));
        }
        Ok(Self { components })
    }

    /// Equal-weight mixture with the given means and a shared isotropic variance.
    pub fn isotropic(means: &[Vec<f64>], variance: f64) -> Result<Self> {
        let w = 1.0 / means.len() as f64;
        Self::new(
            means
                .iter()
                .map(|m| Component {
                    weight: w,
                    mean: m.clone(),
                    variance: vec![variance; m.len()],
                })
                .collect(),
        )
    }

    /// Two modes at ±4 with unit variance.
    pub fn toy_1d() -> Self {
        Self::isotropic(&[vec![-4.0], vec![4.0]], 1.0).expect("valid preset")
    }

    /// Four modes at (±4, ±4) with variance 0.5 per axis.
    pub fn toy_2d() -> Self {
        Self::isotropic(
            &[
                vec![-4.0, -4.0],
                vec![-4.0, 4.0],
                vec![4.0, -4.0],
                vec![4.0, 4.0],
            ],
            0.5,
        )
        .expect("valid preset")
    }

    pub fn dim(&self) -> usize {
        self.components[0].mean.len()
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }

    pub fn num_components(&self) -> usize {
        self.components.len()
    }

    /// The class-conditional law of class `k` (component `k` alone).
    pub fn conditional(&self, k: usize) -> Result<Self> {
        let c = self.components.get(k).ok_or_else(|| {
            Error::InvalidArgument(format!("class {k} out of range 0..{}", self.components.len()))
        })?;
        Ok(Self {
            components: vec![Component {
                weight: 1.0,
                ..c.clone()
            }],
        })
    }

    /// Exact law of `x_t`.
    pub fn perturbed(&self, sched: &NoiseSchedule, t: usize) -> Result<Self> {
        sched.check_t(t)?;
        let a = sched.alpha_bar(t);
        if t == 0 {
            return Ok(self.clone());
        }
        let sa = a.sqrt();
        Ok(Self {
            components: self
                .components
                .iter()
                .map(|c| Component {
                    weight: c.weight,
                    mean: c.mean.iter().map(|m| sa * m).collect(),
                    variance: c.variance.iter().map(|v| a * v + (1.0 - a)).collect(),
                })
                .collect(),
        })
    }

    fn component_log_terms(&self, x: &[f64]) -> Vec<f64> {
        self.components
            .iter()
            .map(|c| {
                let mut l = c.weight.ln();
                for d in 0..x.len() {
                    let diff = x[d] - c.mean[d];
                    l -= 0.5 * (LN_2PI + c.variance[d].ln()) + diff * diff / (2.0 * c.variance[d]);
                }
                l
            })
            .collect()
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        log_sum_exp(&self.component_log_terms(x))
    }

    pub fn density(&self, x: &[f64]) -> f64 {
        self.log_density(x).exp()
    }

    /// Posterior component probabilities given `x`.
    pub fn responsibilities(&self, x: &[f64]) -> Vec<f64> {
        let terms = self.component_log_terms(x);
        let lse = log_sum_exp(&terms);
        terms.iter().map(|l| (l - lse).exp()).collect()
    }

    /// `∇_x log p(x)`.
    pub fn score(&self, x: &[f64]) -> Vec<f64> {
        let r = self.responsibilities(x);
        let mut s = vec![0.0; x.len()];
        for (c, ri) in self.components.iter().zip(&r) {
            for d in 0..x.len() {
                s[d] += ri * (-(x[d] - c.mean[d]) / c.variance[d]);
            }
        }
        s
    }

    /// Mixture CDF (1-D only).
    pub fn cdf_1d(&self, x: f64) -> f64 {
        let mut p = 0.0;
        for c in &self.components {
            let z = (x - c.mean[0]) / (2.0 * c.variance[0]).sqrt();
            p += c.weight * 0.5 * (1.0 + erf(z));
        }
        p
    }

    /// Mixture quantile (1-D only) by bisection on the CDF.
    pub fn quantile_1d(&self, u: f64) -> f64 {
        let spread = self
            .components
            .iter()
            .map(|c| c.mean[0].abs() + 40.0 * c.variance[0].sqrt())
            .fold(0.0, f64::max);
        let (mut lo, mut hi) = (-spread, spread);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if self.cdf_1d(mid) < u {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo < 1e-13 * (1.0 + mid.abs()) {
                break;
            }
        }
        0.5 * (lo + hi)
    }

    /// Probability mass of the axis-aligned box `[lo, hi)` per dimension.
    pub fn box_mass(&self, lo: &[f64], hi: &[f64]) -> f64 {
        let mut total = 0.0;
        for c in &self.components {
            let mut p = c.weight;
            for d in 0..lo.len() {
                let s = (2.0 * c.variance[d]).sqrt();
                p *= 0.5 * (erf((hi[d] - c.mean[d]) / s) - erf((lo[d] - c.mean[d]) / s));
            }
            total += p;
        }
        total
    }
}

/// `∇ log p_t(x)` of the perturbed mixture.
pub fn score(gmm: &GaussianMixture, sched: &NoiseSchedule, t: usize, x: &[f64]) -> Result<Vec<f64>> {
    Ok(gmm.perturbed(sched, t)?.score(x))
}

/// Bayes-optimal noise prediction `ε* = −σ_t ∇ log p_t(x)`.
pub fn posterior_mean_denoiser(
    gmm: &GaussianMixture,
    sched: &NoiseSchedule,
    t: usize,
    x: &[f64],
) -> Result<Vec<f64>> {
    if t == 0 {
        return Err(Error::InvalidArgument("posterior_mean_denoiser needs t >= 1".into()));
    }
    let sigma = sched.sigma(t);
    Ok(score(gmm, sched, t, x)?.iter().map(|s| -sigma * s).collect())
}

/// `E[x_0 | x_t = x]` recovered from the noise prediction.
pub fn posterior_mean_x0(
    gmm: &GaussianMixture,
    sched: &NoiseSchedule,
    t: usize,
    x: &[f64],
) -> Result<Vec<f64>> {
    let eps = posterior_mean_denoiser(gmm, sched, t, x)?;
    let (sa, sig) = (sched.alpha_bar(t).sqrt(), sched.sigma(t));
    Ok(x.iter().zip(&eps).map(|(xi, e)| (xi - sig * e) / sa).collect())
}

/// Classifier-free guided score `(1 − λ) s_uncond + λ s_cond`.
pub fn guided_oracle_score(
    cond: &GaussianMixture,
    uncond: &GaussianMixture,
    sched: &NoiseSchedule,
    t: usize,
    x: &[f64],
    lambda: f64,
) -> Result<Vec<f64>> {
    if cond.dim() != uncond.dim() {
        return Err(Error::Shape(format!(
            "conditional dim {} vs unconditional dim {}",
            cond.dim(),
            uncond.dim()
        )));
    }
    let sc = score(cond, sched, t, x)?;
    let su = score(uncond, sched, t, x)?;
    Ok(su
        .iter()
        .zip(&sc)
        .map(|(u, c)| (1.0 - lambda) * u + lambda * c)
        .collect())
}

/// I.i.d. draws; labels are component indices.
pub fn sample_ground_truth(gmm: &GaussianMixture, n: usize, rng: &mut Rng) -> SampleBatch {
    let dim = gmm.dim();
    let mut points = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let u = rng.uniform();
        let mut acc = 0.0;
        let mut k = gmm.num_components() - 1;
        for (i, c) in gmm.components.iter().enumerate() {
            acc += c.weight;
            if u < acc {
                k = i;
                break;
            }
        }
        // Guard against trailing rounding landing on a zero-weight component.
        while gmm.components[k].weight == 0.0 && k > 0 {
            k -= 1;
        }
        let c = &gmm.components[k];
        for d in 0..dim {
            points.push(c.mean[d] + c.variance[d].sqrt() * rng.gauss());
        }
        labels.push(k);
    }
    SampleBatch::new(dim, points, labels, "ground-truth".into())
}

/// Draws `n_per_class` points from each component, labels in class order.
pub fn sample_class_balanced(gmm: &GaussianMixture, n_per_class: usize, rng: &Rng) -> SampleBatch {
    let dim = gmm.dim();
    let mut points = Vec::new();
    let mut labels = Vec::new();
    for (k, c) in gmm.components.iter().enumerate() {
        let mut r = rng.split_index("class", k as u64);
        for _ in 0..n_per_class {
            for d in 0..dim {
                points.push(c.mean[d] + c.variance[d].sqrt() * r.gauss());
            }
            labels.push(k);
        }
    }
    SampleBatch::new(dim, points, labels, "ground-truth".into())
}

/// The exact posterior-mean denoiser packaged as a noise predictor.
#[derive(Debug, Clone)]
pub struct OracleDenoiser {
    gmm: GaussianMixture,
    sched: NoiseSchedule,
}

impl OracleDenoiser {
    pub fn new(gmm: GaussianMixture, sched: NoiseSchedule) -> Self {
        Self { gmm, sched }
    }
}

impl NoisePredictor for OracleDenoiser {
    fn dim(&self) -> usize {
        self.gmm.dim()
    }

    fn num_blocks(&self) -> usize {
        0
    }

    fn predict(
        &self,
        xs: &[f64],
        t: usize,
        cond: Cond,
        mask: Option<&crate::denoiser::BlockMask>,
    ) -> Result<Vec<f64>> {
        if mask.is_some() {
            return Err(Error::InvalidArgument(
                "the analytic oracle has no blocks to mask".into(),
            ));
        }
        let law = match cond {
            Cond::Class(k) => self.gmm.conditional(k)?,
            Cond::Null => self.gmm.clone(),
        };
        let pert = law.perturbed(&self.sched, t)?;
        let sigma = self.sched.sigma(t);
        let dim = self.dim();
        let mut out = Vec::with_capacity(xs.len());
        for x in xs.chunks_exact(dim) {
            out.extend(pert.score(x).iter().map(|s| -sigma * s));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::num::{gauss_draw, mean};
    use crate::schedule::ScheduleConfig;

    fn sched() -> NoiseSchedule {
        NoiseSchedule::new(ScheduleConfig::default()).unwrap()
    }

    #[test]
    fn perturbed_identity_at_t0() {
        let g = GaussianMixture::toy_2d();
        assert_eq!(g.perturbed(&sched(), 0).unwrap(), g);
    }

    #[test]
    fn perturbed_pure_noise_at_t_max() {
        let s = sched();
        let p = GaussianMixture::toy_1d().perturbed(&s, s.steps()).unwrap();
        for c in p.components() {
            assert!(c.mean[0].abs() < 0.03);
            assert!((c.variance[0] - 1.0).abs() < 1e-4);
        }
        assert!(GaussianMixture::toy_1d().perturbed(&s, 201).is_err());
    }

    /// Finds the timestep whose ᾱ is closest to `target` and returns it.
    fn t_near(s: &NoiseSchedule, target: f64) -> usize {
        (1..=s.steps())
            .min_by(|&a, &b| {
                (s.alpha_bar(a) - target)
                    .abs()
                    .total_cmp(&(s.alpha_bar(b) - target).abs())
            })
            .unwrap()
    }

    #[test]
    fn perturbed_matches_numerical_convolution() {
        let s = sched();
        let g = GaussianMixture::toy_1d();
        let t = t_near(&s, 0.25);
        let a = s.alpha_bar(t);
        let p = g.perturbed(&s, t).unwrap();
        // Closed form at exactly ᾱ = 0.25 for the record.
        let exact = GaussianMixture::isotropic(&[vec![-2.0], vec![2.0]], 1.0).unwrap();
        assert!((0.25f64.sqrt() * 4.0 - 2.0).abs() < 1e-15);
        assert!((0.25 * 1.0 + 0.75 - exact.components()[0].variance[0]).abs() < 1e-15);
        // p_t(y) = ∫ p_0(x) N(y; √ᾱ x, 1−ᾱ) dx by trapezoid on 4096 points.
        let n = 4096;
        let (lo, hi) = (-14.0, 14.0);
        let h = (hi - lo) / (n - 1) as f64;
        let kernel_var = 1.0 - a;
        let mut max_err: f64 = 0.0;
        for j in 0..81 {
            let y = -8.0 + 0.2 * j as f64;
            let mut acc = 0.0;
            for i in 0..n {
                let x = lo + h * i as f64;
                let w = if i == 0 || i == n - 1 { 0.5 } else { 1.0 };
                let d = y - a.sqrt() * x;
                let k = (-d * d / (2.0 * kernel_var)).exp() / (2.0 * std::f64::consts::PI * kernel_var).sqrt();
                acc += w * g.density(&[x]) * k;
            }
            max_err = max_err.max((acc * h - p.density(&[y])).abs());
        }
        assert!(max_err < 1e-6, "max err {max_err}");
    }

    #[test]
    fn perturbed_density_integrates_to_one() {
        let s = sched();
        let g = GaussianMixture::toy_1d();
        let n = 1 << 14;
        let h = 40.0 / (n - 1) as f64;
        for t in [0, 1, 17, 60, 120, 200] {
            let p = g.perturbed(&s, t).unwrap();
            let mut acc = 0.0;
            for i in 0..n {
                let w = if i == 0 || i == n - 1 { 0.5 } else { 1.0 };
                acc += w * p.density(&[-20.0 + h * i as f64]);
            }
            assert!((acc * h - 1.0).abs() < 1e-6, "t={t}: {}", acc * h);
        }
    }

    #[test]
    fn score_simple_cases() {
        let s = sched();
        let single = GaussianMixture::isotropic(&[vec![0.0]], 1.0).unwrap();
        assert!((score(&single, &s, 0, &[0.7]).unwrap()[0] + 0.7).abs() < 1e-15);
        let sym = GaussianMixture::toy_1d();
        for t in [0, 50, 200] {
            assert_eq!(score(&sym, &s, t, &[0.0]).unwrap()[0], 0.0);
        }
    }

    #[test]
    fn score_matches_finite_differences() {
        let s = sched();
        let mut rng = Rng::new(21);
        for g in [GaussianMixture::toy_1d(), GaussianMixture::toy_2d()] {
            for _ in 0..50 {
                let t = rng.below(201) as usize;
                let p = g.perturbed(&s, t).unwrap();
                let x: Vec<f64> = (0..g.dim()).map(|_| 6.0 * rng.gauss()).collect();
                let sc = p.score(&x);
                let h = 1e-5;
                for d in 0..g.dim() {
                    let mut xp = x.clone();
                    let mut xm = x.clone();
                    xp[d] += h;
                    xm[d] -= h;
                    let fd = (p.log_density(&xp) - p.log_density(&xm)) / (2.0 * h);
                    let rel = (fd - sc[d]).abs() / sc[d].abs().max(1e-3);
                    assert!(rel < 1e-6, "t={t} x={x:?} fd={fd} score={}", sc[d]);
                }
            }
        }
    }

    #[test]
    fn tweedie_identity() {
        let s = sched();
        let g = GaussianMixture::toy_2d();
        let mut rng = Rng::new(4);
        for _ in 0..20 {
            let t = 1 + rng.below(200) as usize;
            let x = gauss_draw(&mut rng, 2);
            let eps = posterior_mean_denoiser(&g, &s, t, &x).unwrap();
            let sc = score(&g, &s, t, &x).unwrap();
            for d in 0..2 {
                assert!((eps[d] + s.sigma(t) * sc[d]).abs() < 1e-12);
            }
        }
        assert!(posterior_mean_denoiser(&g, &s, 0, &[0.0, 0.0]).is_err());
    }

    #[test]
    fn degenerate_component_posterior_collapses() {
        let s = sched();
        let g = GaussianMixture::isotropic(&[vec![1.5]], 1e-12).unwrap();
        for t in [1, 50, 150] {
            let x0 = posterior_mean_x0(&g, &s, t, &[0.3]).unwrap();
            assert!((x0[0] - 1.5).abs() < 1e-6, "t={t}: {}", x0[0]);
        }
    }

    #[test]
    fn posterior_mean_matches_importance_sampling() {
        let s = sched();
        let g = GaussianMixture::toy_1d();
        let mut rng = Rng::new(99);
        let m = 1_000_000;
        for _ in 0..20 {
            let t = 1 + rng.below(200) as usize;
            let a = s.alpha_bar(t);
            let xt = a.sqrt() * 4.0 * (2.0 * rng.uniform() - 1.0) + 1.5 * rng.gauss();
            let prior = sample_ground_truth(&g, m, &mut rng);
            let kv = 1.0 - a;
            let logw: Vec<f64> = prior
                .points()
                .iter()
                .map(|x0| {
                    let d = xt - a.sqrt() * x0;
                    -d * d / (2.0 * kv)
                })
                .collect();
            let lmax = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = logw.iter().map(|l| (l - lmax).exp()).collect();
            let sw: f64 = w.iter().sum();
            let est: f64 = w.iter().zip(prior.points()).map(|(wi, x)| wi * x).sum::<f64>() / sw;
            // Self-normalized IS standard error.
            let var: f64 = w
                .iter()
                .zip(prior.points())
                .map(|(wi, x)| (wi / sw).powi(2) * (x - est).powi(2))
                .sum();
            let se = var.sqrt();
            let exact = posterior_mean_x0(&g, &s, t, &[xt]).unwrap()[0];
            assert!((est - exact).abs() < 3.0 * se + 1e-9, "t={t} xt={xt} est={est} exact={exact} se={se}");
        }
    }

    #[test]
    fn guided_score_collapses_and_is_linear() {
        let s = sched();
        let u = GaussianMixture::toy_1d();
        let c = u.conditional(1).unwrap();
        let x = [0.8];
        let t = 70;
        assert_eq!(
            guided_oracle_score(&c, &u, &s, t, &x, 1.0).unwrap(),
            score(&c, &s, t, &x).unwrap()
        );
        assert_eq!(
            guided_oracle_score(&c, &u, &s, t, &x, 0.0).unwrap(),
            score(&u, &s, t, &x).unwrap()
        );
        let f = |l: f64| guided_oracle_score(&c, &u, &s, t, &x, l).unwrap()[0];
        let (g0, g1, g3) = (f(0.0), f(1.0), f(3.0));
        assert!((g3 - (g0 + 3.0 * (g1 - g0))).abs() < 1e-12);
        let two = GaussianMixture::toy_2d();
        assert!(guided_oracle_score(&c, &two, &s, t, &x, 2.0).is_err());
    }

    #[test]
    fn ground_truth_sampling() {
        let mut rng = Rng::new(1);
        let b = sample_ground_truth(&GaussianMixture::toy_1d(), 10_000, &mut rng);
        let frac = b.points().iter().filter(|x| **x > 0.0).count() as f64 / 1e4;
        assert!((frac - 0.5).abs() < 4.0 * 0.005, "{frac}");

        let single = GaussianMixture::isotropic(&[vec![2.5]], 4.0).unwrap();
        let b = sample_ground_truth(&single, 10_000, &mut rng);
        assert!((mean(b.points()) - 2.5).abs() < 4.0 * 2.0 / 100.0);

        let lopsided = GaussianMixture::new(vec![
            Component {
                weight: 1.0,
                mean: vec![-4.0],
                variance: vec![1.0],
            },
            Component {
                weight: 0.0,
                mean: vec![4.0],
                variance: vec![1.0],
            },
        ])
        .unwrap();
        let b = sample_ground_truth(&lopsided, 1000, &mut rng);
        assert!(b.labels().iter().all(|&l| l == 0));
    }

    #[test]
    fn invalid_mixtures_rejected() {
        assert!(GaussianMixture::new(vec![]).is_err());
        assert!(GaussianMixture::new(vec![Component {
            weight: 0.9,
            mean: vec![0.0],
            variance: vec![1.0],
        }])
        .is_err());
        assert!(GaussianMixture::new(vec![Component {
            weight: 1.0,
            mean: vec![0.0],
            variance: vec![0.0],
        }])
        .is_err());
    }

    #[test]
    fn quantile_inverts_cdf() {
        let g = GaussianMixture::toy_1d();
        for u in [0.001, 0.2, 0.5, 0.77, 0.999] {
            assert!((g.cdf_1d(g.quantile_1d(u)) - u).abs() < 1e-10);
        }
    }
}
