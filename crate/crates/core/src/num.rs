//! Deterministic numerical substrate.
//!
//! # Random numbers
//!
//! [`Rng`] is SplitMix64. With state `s` (a `u64`), one draw is
//!
//! ```text
//! s = s + 0x9E3779B97F4A7C15            (wrapping)
//! z = s
//! z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9   (wrapping)
//! z = (z ^ (z >> 27)) * 0x94D049BB133111EB   (wrapping)
//! return z ^ (z >> 31)
//! ```
//!
//! The initial state is the seed itself. A uniform `f64` in `[0, 1)` is
//! `(next >> 11) * 2^-53`. Standard normals use Box–Muller on two uniforms
//! `u1 = ((next >> 11) + 1) * 2^-53` (in `(0, 1]`) and `u2 = (next >> 11) * 2^-53`:
//! `r = sqrt(-2 ln u1)`, emitting `r cos(2π u2)` then `r sin(2π u2)`.
//!
//! Child streams are derived from the parent *seed* (not its position), so a
//! child never depends on how many draws the parent has made:
//! `child_seed = mix(parent_seed ^ fnv1a64(label))` where `mix` is the SplitMix64
//! output function applied to its argument plus the increment.
//!
//! # Summation order
//!
//! Every reduction in this crate sums left to right in index order. The dense
//! kernels accumulate each output element as
//! `c = init; for q in 0..k { c = a[q].mul_add(b[q], c) }` with a fused
//! multiply-add, which is correctly rounded on every platform, so results are
//! independent of blocking, thread count and SIMD width.

use crate::error::{Error, Result};

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;
const TWO_POW_M53: f64 = 1.0 / (1u64 << 53) as f64;

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Seeded SplitMix64 stream. See the module docs for the exact update rule.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    state: u64,
    spare_normal: Option<f64>,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            state: seed,
            spare_normal: None,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Derives an independent child stream from this stream's seed and a label.
    pub fn split(&self, label: &str) -> Rng {
        Rng::new(mix64((self.seed ^ fnv1a64(label.as_bytes())).wrapping_add(GOLDEN_GAMMA)))
    }

    /// Like [`Rng::split`] with an integer label.
    pub fn split_index(&self, label: &str, index: u64) -> Rng {
        self.split(&format!("{label}#{index}"))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        mix64(self.state)
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * TWO_POW_M53
    }

    /// Uniform in `(0, 1]`.
    fn uniform_open0(&mut self) -> f64 {
        ((self.next_u64() >> 11) + 1) as f64 * TWO_POW_M53
    }

    /// Unbiased integer in `0..n` by rejection.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0)");
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let v = self.next_u64();
            if v < zone {
                return v % n;
            }
        }
    }

    pub fn gauss(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        let u1 = self.uniform_open0();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let angle = 2.0 * std::f64::consts::PI * u2;
        self.spare_normal = Some(r * angle.sin());
        r * angle.cos()
    }

    pub fn fill_gauss(&mut self, out: &mut [f64]) {
        for v in out.iter_mut() {
            *v = self.gauss();
        }
    }
}

/// `n` i.i.d. standard normal draws.
pub fn gauss_draw(rng: &mut Rng, n: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    rng.fill_gauss(&mut v);
    v
}

/// Dense row-major matrix with finite entries.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// Checked constructor: rejects wrong lengths and non-finite values.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("matrix entry {i} is {}", data[i])));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(Error::Shape(format!(
                "matvec: matrix has {} cols, vector has {}",
                self.cols,
                x.len()
            )));
        }
        Ok(self
            .data
            .chunks_exact(self.cols)
            .map(|row| dot(row, x))
            .collect())
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::Shape(format!(
                "matmul: {}x{} times {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = vec![0.0; self.rows * other.cols];
        gemm(
            StridedRows::row_major(&self.data, self.cols),
            self.rows,
            self.cols,
            &other.data,
            other.cols,
            &mut out,
        );
        Ok(Matrix {
            rows: self.rows,
            cols: other.cols,
            data: out,
        })
    }
}

/// Left-to-right dot product.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

pub fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub fn scale(a: &[f64], s: f64) -> Vec<f64> {
    a.iter().map(|x| x * s).collect()
}

/// Read-only view of a matrix `A` with arbitrary strides, so `Xᵀ` costs nothing.
#[derive(Clone, Copy)]
pub struct StridedRows<'a> {
    data: &'a [f64],
    row_stride: usize,
    col_stride: usize,
}

impl<'a> StridedRows<'a> {
    pub fn row_major(data: &'a [f64], cols: usize) -> Self {
        Self {
            data,
            row_stride: cols,
            col_stride: 1,
        }
    }

    /// Transposed view of a row-major `rows x cols` buffer.
    pub fn transposed(data: &'a [f64], cols: usize) -> Self {
        Self {
            data,
            row_stride: 1,
            col_stride: cols,
        }
    }

    #[inline(always)]
    fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.row_stride + c * self.col_stride]
    }
}

/// `C[m×p] += A[m×k] · B[k×p]`, each `C` element summed in ascending `k`
/// starting from its current value.
pub fn gemm(a: StridedRows<'_>, m: usize, k: usize, b: &[f64], p: usize, c: &mut [f64]) {
    const R: usize = 4;
    const W: usize = 16;
    debug_assert!(b.len() >= k * p);
    debug_assert!(c.len() >= m * p);
    let mut i = 0;
    while i + R <= m {
        let mut j = 0;
        while j + W <= p {
            let mut acc = [[0.0f64; W]; R];
            for (r, row) in acc.iter_mut().enumerate() {
                row.copy_from_slice(&c[(i + r) * p + j..(i + r) * p + j + W]);
            }
            for q in 0..k {
                let brow: &[f64; W] = b[q * p + j..q * p + j + W].try_into().unwrap();
                for (r, row) in acc.iter_mut().enumerate() {
                    let av = a.at(i + r, q);
                    for w in 0..W {
                        row[w] = av.mul_add(brow[w], row[w]);
                    }
                }
            }
            for (r, row) in acc.iter().enumerate() {
                c[(i + r) * p + j..(i + r) * p + j + W].copy_from_slice(row);
            }
            j += W;
        }
        if j < p {
            for r in i..i + R {
                gemm_row_tail(a, r, k, b, p, j, c);
            }
        }
        i += R;
    }
    for r in i..m {
        gemm_row_tail(a, r, k, b, p, 0, c);
    }
}

fn gemm_row_tail(a: StridedRows<'_>, r: usize, k: usize, b: &[f64], p: usize, j0: usize, c: &mut [f64]) {
    let crow = &mut c[r * p + j0..(r + 1) * p];
    for q in 0..k {
        let av = a.at(r, q);
        let brow = &b[q * p + j0..(q + 1) * p];
        for (cv, bv) in crow.iter_mut().zip(brow) {
            *cv = av.mul_add(*bv, *cv);
        }
    }
}

pub fn mean(v: &[f64]) -> f64 {
    let mut s = 0.0;
    for x in v {
        s += x;
    }
    s / v.len() as f64
}

/// Population variance.
pub fn variance(v: &[f64]) -> f64 {
    let m = mean(v);
    let mut s = 0.0;
    for x in v {
        s += (x - m) * (x - m);
    }
    s / v.len() as f64
}

/// Sample standard deviation (n − 1 denominator).
pub fn std_dev(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    (variance(v) * v.len() as f64 / (v.len() - 1) as f64).sqrt()
}

/// Linear-interpolated quantile of already sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

pub fn sorted(v: &[f64]) -> Vec<f64> {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s
}

/// Average ranks (ties share the mean rank), 1-based.
pub fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let ra = ranks(a);
    let rb = ranks(b);
    let ma = mean(&ra);
    let mb = mean(&rb);
    let mut num = 0.0;
    let mut da = 0.0;
    let mut db = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        num += (x - ma) * (y - mb);
        da += (x - ma) * (x - ma);
        db += (y - mb) * (y - mb);
    }
    num / (da * db).sqrt()
}

/// Numerically stable `ln Σ exp(v_i)`.
pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    let mut s = 0.0;
    for x in v {
        s += (x - m).exp();
    }
    m + s.ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn same_seed_same_draws() {
        let a = gauss_draw(&mut Rng::new(0), 2);
        let b = gauss_draw(&mut Rng::new(0), 2);
        assert!(a.iter().all(|v| v.is_finite()));
        assert_eq!(a[0].to_bits(), b[0].to_bits());
        assert_eq!(a[1].to_bits(), b[1].to_bits());
    }

    #[test]
    fn splitmix_reference_values() {
        // Reference outputs of SplitMix64 seeded with 0.
        let mut r = Rng::new(0);
        assert_eq!(r.next_u64(), 0xE220_A839_7B1D_CDAF);
        assert_eq!(r.next_u64(), 0x6E78_9E6A_A1B9_65F4);
        assert_eq!(r.next_u64(), 0x06C4_5D18_8009_454F);
    }

    #[test]
    fn gauss_moments() {
        let v = gauss_draw(&mut Rng::new(0), 100_000);
        assert!(mean(&v).abs() < 0.02);
        assert!((variance(&v) - 1.0).abs() < 0.02);
    }

    #[test]
    fn distinct_seeds_differ() {
        let a = gauss_draw(&mut Rng::new(1), 100);
        let b = gauss_draw(&mut Rng::new(2), 100);
        assert!(a.iter().zip(&b).any(|(x, y)| x != y));
    }

    #[test]
    fn split_streams_do_not_collide() {
        let parent = Rng::new(7);
        let mut a = parent.split("noise");
        let mut b = parent.split("mask");
        let n = 1_000_000;
        let set: HashSet<u64> = (0..n).map(|_| a.next_u64()).collect();
        assert_eq!(set.len(), n);
        for _ in 0..n {
            assert!(!set.contains(&b.next_u64()));
        }
    }

    #[test]
    fn split_ignores_parent_position() {
        let mut p = Rng::new(3);
        let before = p.split("x").next_u64();
        p.next_u64();
        assert_eq!(p.split("x").next_u64(), before);
    }

    #[test]
    fn below_is_in_range_and_uniformish() {
        let mut r = Rng::new(11);
        let mut counts = [0usize; 6];
        for _ in 0..60_000 {
            counts[r.below(6) as usize] += 1;
        }
        for c in counts {
            assert!((c as f64 / 60_000.0 - 1.0 / 6.0).abs() < 0.01);
        }
    }

    #[test]
    fn identity_matvec() {
        let x = vec![0.5, -1.25, 3.0];
        assert_eq!(Matrix::identity(3).matvec(&x).unwrap(), x);
    }

    #[test]
    fn small_matvec() {
        let a = Matrix::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(a.matvec(&[1.0, 1.0]).unwrap(), vec![3.0, 7.0]);
    }

    #[test]
    fn matvec_and_matmul_match_naive_loops() {
        let mut rng = Rng::new(5);
        let n = 8;
        let a = Matrix::new(n, n, gauss_draw(&mut rng, n * n)).unwrap();
        let x = gauss_draw(&mut rng, n);
        let y = a.matvec(&x).unwrap();
        for i in 0..n {
            let mut s = 0.0;
            for j in 0..n {
                s += a.get(i, j) * x[j];
            }
            assert!((s - y[i]).abs() < 1e-12);
        }
        // Odd sizes exercise both the blocked path and the tails.
        for (m, k, p) in [(8, 8, 8), (7, 5, 19), (33, 64, 40), (1, 3, 1)] {
            let a = Matrix::new(m, k, gauss_draw(&mut rng, m * k)).unwrap();
            let b = Matrix::new(k, p, gauss_draw(&mut rng, k * p)).unwrap();
            let c = a.matmul(&b).unwrap();
            for i in 0..m {
                for j in 0..p {
                    let mut s = 0.0;
                    for q in 0..k {
                        s = a.get(i, q).mul_add(b.get(q, j), s);
                    }
                    // Same summation order, so equality is exact.
                    assert_eq!(s.to_bits(), c.get(i, j).to_bits());
                }
            }
        }
    }

    #[test]
    fn transposed_view_gemm() {
        let mut rng = Rng::new(9);
        let (m, k, p) = (6, 10, 17);
        // x is k×m row-major; use xᵀ as the m×k left operand.
        let x = gauss_draw(&mut rng, k * m);
        let b = gauss_draw(&mut rng, k * p);
        let mut c = vec![0.0; m * p];
        gemm(StridedRows::transposed(&x, m), m, k, &b, p, &mut c);
        let xt = Matrix::new(k, m, x).unwrap().transpose();
        let expect = xt.matmul(&Matrix::new(k, p, b).unwrap()).unwrap();
        assert_eq!(expect.as_slice(), &c[..]);
    }

    #[test]
    fn shape_errors() {
        let a = Matrix::zeros(2, 3);
        assert!(matches!(a.matvec(&[1.0]), Err(Error::Shape(_))));
        assert!(matches!(a.matmul(&Matrix::zeros(2, 2)), Err(Error::Shape(_))));
        assert!(matches!(Matrix::new(1, 1, vec![f64::NAN]), Err(Error::NonFinite(_))));
    }

    #[test]
    fn spearman_basics() {
        assert!((spearman(&[1.0, 2.0, 3.0, 4.0], &[10.0, 20.0, 30.0, 40.0]) - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
    }
}
