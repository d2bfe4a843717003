//! Block-structured residual MLP noise predictor.
//!
//! ```text
//! h_0   = x·W_in + b_in + (φ(t)·W_t + b_t) + e(c)
//! h_j+1 = h_j + (act(act(h_j)·W1_j + b1_j)·W2_j + b2_j)      (block j kept)
//! h_j+1 = h_j                                                (block j dropped)
//! ε̂     = act(h_B)·W_out + b_out
//! ```
//!
//! `φ(t)` are sinusoidal features, `act` is a SiLU-shaped unit with a
//! softsign gate, `x·(1 + x/(1+|x|))/2`, and the class embedding is `e(c) = row_null + row_c`
//! for a real class and `row_null` for the null token.
//!
//! # Parameter layout
//!
//! All parameters live in one flat `Vec<f64>` in this order; every weight
//! matrix is stored row-major as `[in × out]`:
//!
//! 1. `W_in [dim × H]`, `b_in [H]`
//! 2. `W_t [E × H]`, `b_t [H]`
//! 3. class table `[(K+1) × H]`, rows `0..K` are class offsets, row `K` is the null token
//! 4. per block `j = 0..B`: `W1 [H × H]`, `b1 [H]`, `W2 [H × H]`, `b2 [H]`
//! 5. `W_out [H × dim]`, `b_out [dim]`

mod checkpoint;
mod mask;

use std::ops::Range;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::num::{gemm, Rng, StridedRows};

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_MAGIC};
pub use mask::{
    drop_count_for, enumerate_all_masks, generate_stochastic_mask, mask_with_drop_count,
    BlockMask,
};

/// Rows processed together; also the unit of parallel work and of gradient
/// partial sums, so results never depend on the thread count.
const CHUNK: usize = 64;

const TIME_MAX_PERIOD: f64 = 1000.0;

/// Conditioning token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Cond {
    Class(usize),
    Null,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub dim: usize,
    pub hidden: usize,
    pub blocks: usize,
    pub time_features: usize,
    pub num_classes: usize,
}

impl ModelConfig {
    pub fn toy(dim: usize, num_classes: usize) -> Self {
        Self {
            dim,
            hidden: 64,
            blocks: 6,
            time_features: 16,
            num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let checks = [
            ("model.dim", (1..=2).contains(&self.dim), "must be 1 or 2"),
            ("model.hidden", self.hidden > 0, "must be positive"),
            ("model.blocks", self.blocks > 0, "must be positive"),
            (
                "model.time_features",
                self.time_features >= 2 && self.time_features % 2 == 0,
                "must be a positive even number",
            ),
            ("model.num_classes", self.num_classes > 0, "must be positive"),
        ];
        for (key, ok, msg) in checks {
            if !ok {
                return Err(Error::config(key, msg));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct BlockLayout {
    w1: Range<usize>,
    b1: Range<usize>,
    w2: Range<usize>,
    b2: Range<usize>,
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    in_w: Range<usize>,
    in_b: Range<usize>,
    time_w: Range<usize>,
    time_b: Range<usize>,
    class_emb: Range<usize>,
    blocks: Vec<BlockLayout>,
    out_w: Range<usize>,
    out_b: Range<usize>,
    total: usize,
}

impl Layout {
    fn new(c: &ModelConfig) -> Self {
        let mut at = 0;
        let mut take = |n: usize| {
            let r = at..at + n;
            at += n;
            r
        };
        let h = c.hidden;
        let in_w = take(c.dim * h);
        let in_b = take(h);
        let time_w = take(c.time_features * h);
        let time_b = take(h);
        let class_emb = take((c.num_classes + 1) * h);
        let blocks = (0..c.blocks)
            .map(|_| BlockLayout {
                w1: take(h * h),
                b1: take(h),
                w2: take(h * h),
                b2: take(h),
            })
            .collect();
        let out_w = take(h * c.dim);
        let out_b = take(c.dim);
        Self {
            in_w,
            in_b,
            time_w,
            time_b,
            class_emb,
            blocks,
            out_w,
            out_b,
            total: at,
        }
    }
}

#[inline(always)]
fn act(x: f64) -> f64 {
    0.5 * x * (1.0 + x / (1.0 + x.abs()))
}

#[inline(always)]
fn act_grad(x: f64) -> f64 {
    let q = 1.0 / (1.0 + x.abs());
    0.5 * (1.0 + x * q) + 0.5 * x * q * q
}

fn fill_rows(buf: &mut [f64], row: &[f64]) {
    for chunk in buf.chunks_exact_mut(row.len()) {
        chunk.copy_from_slice(row);
    }
}

fn transpose(src: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; src.len()];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = src[r * cols + c];
        }
    }
    t
}

/// Column sums of a `rows × cols` buffer, accumulated into `acc`.
fn add_col_sums(acc: &mut [f64], src: &[f64], cols: usize) {
    for row in src.chunks_exact(cols) {
        for (a, v) in acc.iter_mut().zip(row) {
            *a += v;
        }
    }
}

/// Sinusoidal time features: `[sin(t f_i)…, cos(t f_i)…]`, `f_i = P^(−i/half)`.
pub fn time_features(t: usize, count: usize) -> Vec<f64> {
    let half = count / 2;
    let mut f = vec![0.0; count];
    for i in 0..half {
        let freq = (-(TIME_MAX_PERIOD.ln()) * i as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        f[i] = arg.sin();
        f[half + i] = arg.cos();
    }
    f
}

/// Flat parameter gradient with the same layout as the network parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient(pub Vec<f64>);

/// Activations saved by [`BlockDenoiser::forward_train`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    mask: BlockMask,
    chunks: Vec<ChunkCache>,
}

#[derive(Debug, Clone)]
struct ChunkCache {
    rows: usize,
    x: Vec<f64>,
    feats: Vec<f64>,
    conds: Vec<Cond>,
    block_in: Vec<Vec<f64>>,
    block_act_in: Vec<Vec<f64>>,
    block_pre: Vec<Vec<f64>>,
    block_act_pre: Vec<Vec<f64>>,
    h_final: Vec<f64>,
    act_final: Vec<f64>,
}

/// Per-call time input: one timestep for all rows, or one per row.
#[derive(Clone, Copy)]
enum Times<'a> {
    Uniform(usize),
    PerRow(&'a [usize]),
}

#[derive(Clone, Copy)]
enum Conds<'a> {
    Uniform(Cond),
    PerRow(&'a [Cond]),
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockDenoiser {
    config: ModelConfig,
    layout: Layout,
    params: Vec<f64>,
}

impl BlockDenoiser {
    /// Fan-in scaled Gaussian weights, zero biases, zero class offsets and a
    /// zero output projection (so a fresh network predicts exactly zero).
    pub fn new(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut params = vec![0.0; layout.total];
        let mut fill = |range: &Range<usize>, std: f64, params: &mut Vec<f64>| {
            for p in &mut params[range.clone()] {
                *p = std * rng.gauss();
            }
        };
        let h = config.hidden as f64;
        fill(&layout.in_w, 1.0 / (config.dim as f64).sqrt(), &mut params);
        fill(&layout.time_w, 1.0 / (config.time_features as f64).sqrt(), &mut params);
        let null_row = config.num_classes * config.hidden..(config.num_classes + 1) * config.hidden;
        let null_range = layout.class_emb.start + null_row.start..layout.class_emb.start + null_row.end;
        fill(&null_range, 1.0, &mut params);
        for b in &layout.blocks {
            fill(&b.w1, 1.0 / h.sqrt(), &mut params);
            fill(&b.w2, 1.0 / h.sqrt(), &mut params);
        }
        Ok(Self {
            config,
            layout,
            params,
        })
    }

    pub fn from_params(config: ModelConfig, params: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        if params.len() != layout.total {
            return Err(Error::Shape(format!(
                "expected {} parameters for {config:?}, got {}",
                layout.total,
                params.len()
            )));
        }
        Ok(Self {
            config,
            layout,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn param_count(&self) -> usize {
        self.layout.total
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Index range of every parameter belonging to block `j`.
    pub fn block_param_range(&self, j: usize) -> Range<usize> {
        let b = &self.layout.blocks[j];
        b.w1.start..b.b2.end
    }

    /// Index range of the output projection (weights then bias).
    pub fn output_param_range(&self) -> Range<usize> {
        self.layout.out_w.start..self.layout.out_b.end
    }

    fn check_mask(&self, mask: Option<&BlockMask>) -> Result<BlockMask> {
        match mask {
            None => Ok(BlockMask::all_keep(self.config.blocks)),
            Some(m) if m.len() == self.config.blocks => Ok(m.clone()),
            Some(m) => Err(Error::Shape(format!(
                "mask has {} entries, network has {} blocks",
                m.len(),
                self.config.blocks
            ))),
        }
    }

    fn check_inputs(&self, xs: &[f64], conds: Conds<'_>) -> Result<usize> {
        let dim = self.config.dim;
        if xs.len() % dim != 0 {
            return Err(Error::Shape(format!("input length {} not a multiple of dim {dim}", xs.len())));
        }
        let check = |c: &Cond| match c {
            Cond::Class(k) if *k >= self.config.num_classes => Err(Error::InvalidArgument(format!(
                "class {k} out of range 0..{}",
                self.config.num_classes
            ))),
            _ => Ok(()),
        };
        match conds {
            Conds::Uniform(c) => check(&c)?,
            Conds::PerRow(cs) => {
                for c in cs {
                    check(c)?;
                }
            }
        }
        Ok(xs.len() / dim)
    }

    fn class_embedding(&self, c: Cond) -> Vec<f64> {
        let h = self.config.hidden;
        let table = &self.params[self.layout.class_emb.clone()];
        let null = &table[self.config.num_classes * h..(self.config.num_classes + 1) * h];
        match c {
            Cond::Null => null.to_vec(),
            Cond::Class(k) => null.iter().zip(&table[k * h..(k + 1) * h]).map(|(a, b)| a + b).collect(),
        }
    }

    fn time_embedding(&self, feats: &[f64], rows: usize, out: &mut [f64]) {
        fill_rows(out, &self.params[self.layout.time_b.clone()]);
        gemm(
            StridedRows::row_major(feats, self.config.time_features),
            rows,
            self.config.time_features,
            &self.params[self.layout.time_w.clone()],
            self.config.hidden,
            out,
        );
    }

    /// Runs rows `start..start+rows` through the network. When `cache` is
    /// given every intermediate is kept for backprop.
    #[allow(clippy::too_many_arguments)]
    fn forward_chunk(
        &self,
        x: &[f64],
        times: Times<'_>,
        conds: Conds<'_>,
        start: usize,
        mask: &BlockMask,
        uniform_temb: Option<&[f64]>,
        out: &mut [f64],
        mut cache: Option<&mut ChunkCache>,
    ) {
        let (dim, h, e) = (self.config.dim, self.config.hidden, self.config.time_features);
        let rows = x.len() / dim;
        let p = &self.params;
        let l = &self.layout;

        let mut hid = vec![0.0; rows * h];
        fill_rows(&mut hid, &p[l.in_b.clone()]);
        gemm(StridedRows::row_major(x, dim), rows, dim, &p[l.in_w.clone()], h, &mut hid);

        // Time embedding.
        let mut feats = Vec::new();
        match (times, uniform_temb) {
            (Times::Uniform(_), Some(temb)) if cache.is_none() => {
                for row in hid.chunks_exact_mut(h) {
                    for (v, a) in row.iter_mut().zip(temb) {
                        *v += a;
                    }
                }
            }
            _ => {
                feats = Vec::with_capacity(rows * e);
                for i in 0..rows {
                    let t = match times {
                        Times::Uniform(t) => t,
                        Times::PerRow(ts) => ts[start + i],
                    };
                    feats.extend(time_features(t, e));
                }
                let mut temb = vec![0.0; rows * h];
                self.time_embedding(&feats, rows, &mut temb);
                for (v, a) in hid.iter_mut().zip(&temb) {
                    *v += a;
                }
            }
        }

        // Class embedding.
        let row_conds: Vec<Cond> = (0..rows)
            .map(|i| match conds {
                Conds::Uniform(c) => c,
                Conds::PerRow(cs) => cs[start + i],
            })
            .collect();
        match conds {
            Conds::Uniform(c) => {
                let emb = self.class_embedding(c);
                for row in hid.chunks_exact_mut(h) {
                    for (v, a) in row.iter_mut().zip(&emb) {
                        *v += a;
                    }
                }
            }
            Conds::PerRow(_) => {
                let embs: Vec<Vec<f64>> = (0..self.config.num_classes)
                    .map(|k| self.class_embedding(Cond::Class(k)))
                    .chain(std::iter::once(self.class_embedding(Cond::Null)))
                    .collect();
                for (row, c) in hid.chunks_exact_mut(h).zip(&row_conds) {
                    let emb = match c {
                        Cond::Class(k) => &embs[*k],
                        Cond::Null => &embs[self.config.num_classes],
                    };
                    for (v, a) in row.iter_mut().zip(emb) {
                        *v += a;
                    }
                }
            }
        }

        if let Some(c) = cache.as_deref_mut() {
            c.rows = rows;
            c.x = x.to_vec();
            c.feats = feats;
            c.conds = row_conds;
        }

        let mut a_in = vec![0.0; rows * h];
        let mut pre = vec![0.0; rows * h];
        let mut a_pre = vec![0.0; rows * h];
        let mut branch = vec![0.0; rows * h];
        for (j, bl) in l.blocks.iter().enumerate() {
            if !mask.keeps(j) {
                if let Some(c) = cache.as_deref_mut() {
                    c.block_in.push(Vec::new());
                    c.block_act_in.push(Vec::new());
                    c.block_pre.push(Vec::new());
                    c.block_act_pre.push(Vec::new());
                }
                continue;
            }
            for (a, v) in a_in.iter_mut().zip(&hid) {
                *a = act(*v);
            }
            fill_rows(&mut pre, &p[bl.b1.clone()]);
            gemm(StridedRows::row_major(&a_in, h), rows, h, &p[bl.w1.clone()], h, &mut pre);
            for (a, v) in a_pre.iter_mut().zip(&pre) {
                *a = act(*v);
            }
            fill_rows(&mut branch, &p[bl.b2.clone()]);
            gemm(StridedRows::row_major(&a_pre, h), rows, h, &p[bl.w2.clone()], h, &mut branch);
            if let Some(c) = cache.as_deref_mut() {
                c.block_in.push(hid.clone());
                c.block_act_in.push(a_in.clone());
                c.block_pre.push(pre.clone());
                c.block_act_pre.push(a_pre.clone());
            }
            for (v, b) in hid.iter_mut().zip(&branch) {
                *v += b;
            }
        }

        for (a, v) in a_in.iter_mut().zip(&hid) {
            *a = act(*v);
        }
        fill_rows(out, &p[l.out_b.clone()]);
        gemm(StridedRows::row_major(&a_in, h), rows, h, &p[l.out_w.clone()], dim, out);

        if let Some(c) = cache {
            c.h_final = hid;
            c.act_final = a_in;
        }
    }

    fn run_inference(&self, xs: &[f64], times: Times<'_>, conds: Conds<'_>, mask: &BlockMask) -> Vec<f64> {
        let dim = self.config.dim;
        let uniform_temb = match times {
            Times::Uniform(t) => {
                let mut temb = vec![0.0; self.config.hidden];
                self.time_embedding(&time_features(t, self.config.time_features), 1, &mut temb);
                Some(temb)
            }
            Times::PerRow(_) => None,
        };
        let mut out = vec![0.0; xs.len()];
        let work = |(ci, (xc, oc)): (usize, (&[f64], &mut [f64]))| {
            self.forward_chunk(xc, times, conds, ci * CHUNK, mask, uniform_temb.as_deref(), oc, None);
        };
        let rows = xs.len() / dim;
        if rayon::current_num_threads() > 1 && rows > CHUNK {
            xs.par_chunks(CHUNK * dim)
                .zip(out.par_chunks_mut(CHUNK * dim))
                .enumerate()
                .for_each(work);
        } else {
            xs.chunks(CHUNK * dim)
                .zip(out.chunks_mut(CHUNK * dim))
                .enumerate()
                .for_each(work);
        }
        out
    }

    /// Noise prediction for one input.
    pub fn forward(&self, x: &[f64], t: usize, c: Cond, mask: Option<&BlockMask>) -> Result<Vec<f64>> {
        if x.len() != self.config.dim {
            return Err(Error::Shape(format!("input has {} entries, dim is {}", x.len(), self.config.dim)));
        }
        self.forward_batch(x, t, c, mask)
    }

    /// Noise predictions for `n` row-major inputs sharing `t` and `c`.
    pub fn forward_batch(&self, xs: &[f64], t: usize, c: Cond, mask: Option<&BlockMask>) -> Result<Vec<f64>> {
        let mask = self.check_mask(mask)?;
        self.check_inputs(xs, Conds::Uniform(c))?;
        Ok(self.run_inference(xs, Times::Uniform(t), Conds::Uniform(c), &mask))
    }

    /// Per-row timesteps and conditions, without caching.
    pub fn forward_rows(&self, xs: &[f64], ts: &[usize], cs: &[Cond], mask: Option<&BlockMask>) -> Result<Vec<f64>> {
        let mask = self.check_mask(mask)?;
        let n = self.check_inputs(xs, Conds::PerRow(cs))?;
        if ts.len() != n || cs.len() != n {
            return Err(Error::Shape(format!("{n} inputs but {} times and {} conditions", ts.len(), cs.len())));
        }
        Ok(self.run_inference(xs, Times::PerRow(ts), Conds::PerRow(cs), &mask))
    }

    /// Forward pass that keeps activations for [`BlockDenoiser::backward`].
    pub fn forward_train(
        &self,
        xs: &[f64],
        ts: &[usize],
        cs: &[Cond],
        mask: Option<&BlockMask>,
    ) -> Result<(Vec<f64>, ForwardCache)> {
        let mask = self.check_mask(mask)?;
        let n = self.check_inputs(xs, Conds::PerRow(cs))?;
        if ts.len() != n || cs.len() != n {
            return Err(Error::Shape(format!("{n} inputs but {} times and {} conditions", ts.len(), cs.len())));
        }
        let dim = self.config.dim;
        let mut out = vec![0.0; xs.len()];
        let empty = || ChunkCache {
            rows: 0,
            x: Vec::new(),
            feats: Vec::new(),
            conds: Vec::new(),
            block_in: Vec::new(),
            block_act_in: Vec::new(),
            block_pre: Vec::new(),
            block_act_pre: Vec::new(),
            h_final: Vec::new(),
            act_final: Vec::new(),
        };
        let mut chunks: Vec<ChunkCache> = (0..n.div_ceil(CHUNK)).map(|_| empty()).collect();
        let work = |(ci, ((xc, oc), cc)): (usize, ((&[f64], &mut [f64]), &mut ChunkCache))| {
            self.forward_chunk(xc, Times::PerRow(ts), Conds::PerRow(cs), ci * CHUNK, &mask, None, oc, Some(cc));
        };
        if rayon::current_num_threads() > 1 && n > CHUNK {
            xs.par_chunks(CHUNK * dim)
                .zip(out.par_chunks_mut(CHUNK * dim))
                .zip(chunks.par_iter_mut())
                .enumerate()
                .for_each(work);
        } else {
            xs.chunks(CHUNK * dim)
                .zip(out.chunks_mut(CHUNK * dim))
                .zip(chunks.iter_mut())
                .enumerate()
                .for_each(work);
        }
        Ok((out, ForwardCache { mask, chunks }))
    }

    /// Exact gradient of `Σ d_out · ε̂` w.r.t. every parameter.
    pub fn backward(&self, cache: &ForwardCache, d_out: &[f64]) -> Result<Gradient> {
        let dim = self.config.dim;
        let total_rows: usize = cache.chunks.iter().map(|c| c.rows).sum();
        if d_out.len() != total_rows * dim {
            return Err(Error::Shape(format!(
                "output gradient has {} entries, expected {}",
                d_out.len(),
                total_rows * dim
            )));
        }
        let h = self.config.hidden;
        let p = &self.params;
        let l = &self.layout;
        let out_wt = transpose(&p[l.out_w.clone()], h, dim);
        let block_t: Vec<(Vec<f64>, Vec<f64>)> = l
            .blocks
            .iter()
            .enumerate()
            .map(|(j, b)| {
                if cache.mask.keeps(j) {
                    (transpose(&p[b.w1.clone()], h, h), transpose(&p[b.w2.clone()], h, h))
                } else {
                    (Vec::new(), Vec::new())
                }
            })
            .collect();

        let offsets: Vec<usize> = cache
            .chunks
            .iter()
            .scan(0, |acc, c| {
                let s = *acc;
                *acc += c.rows;
                Some(s)
            })
            .collect();
        let work = |(cc, &off): (&ChunkCache, &usize)| {
            self.backward_chunk(cc, &cache.mask, &d_out[off * dim..(off + cc.rows) * dim], &out_wt, &block_t)
        };
        let partials: Vec<Vec<f64>> = if rayon::current_num_threads() > 1 && cache.chunks.len() > 1 {
            cache.chunks.par_iter().zip(offsets.par_iter()).map(work).collect()
        } else {
            cache.chunks.iter().zip(offsets.iter()).map(work).collect()
        };
        let mut grad = vec![0.0; l.total];
        for part in &partials {
            for (g, v) in grad.iter_mut().zip(part) {
                *g += v;
            }
        }
        Ok(Gradient(grad))
    }

    fn backward_chunk(
        &self,
        cc: &ChunkCache,
        mask: &BlockMask,
        d_out: &[f64],
        out_wt: &[f64],
        block_t: &[(Vec<f64>, Vec<f64>)],
    ) -> Vec<f64> {
        let (dim, h, e) = (self.config.dim, self.config.hidden, self.config.time_features);
        let rows = cc.rows;
        let l = &self.layout;
        let mut g = vec![0.0; l.total];

        // Output projection.
        gemm(StridedRows::transposed(&cc.act_final, h), h, rows, d_out, dim, &mut g[l.out_w.clone()]);
        add_col_sums(&mut g[l.out_b.clone()], d_out, dim);
        let mut dh = vec![0.0; rows * h];
        gemm(StridedRows::row_major(d_out, dim), rows, dim, out_wt, h, &mut dh);
        for (d, v) in dh.iter_mut().zip(&cc.h_final) {
            *d *= act_grad(*v);
        }

        let mut dv = vec![0.0; rows * h];
        let mut da = vec![0.0; rows * h];
        for j in (0..l.blocks.len()).rev() {
            if !mask.keeps(j) {
                continue;
            }
            let bl = &l.blocks[j];
            let (w1t, w2t) = &block_t[j];
            // Residual branch output gradient equals dh.
            gemm(StridedRows::transposed(&cc.block_act_pre[j], h), h, rows, &dh, h, &mut g[bl.w2.clone()]);
            add_col_sums(&mut g[bl.b2.clone()], &dh, h);
            dv.iter_mut().for_each(|v| *v = 0.0);
            gemm(StridedRows::row_major(&dh, h), rows, h, w2t, h, &mut dv);
            for (d, u) in dv.iter_mut().zip(&cc.block_pre[j]) {
                *d *= act_grad(*u);
            }
            gemm(StridedRows::transposed(&cc.block_act_in[j], h), h, rows, &dv, h, &mut g[bl.w1.clone()]);
            add_col_sums(&mut g[bl.b1.clone()], &dv, h);
            da.iter_mut().for_each(|v| *v = 0.0);
            gemm(StridedRows::row_major(&dv, h), rows, h, w1t, h, &mut da);
            for ((d, a), hin) in dh.iter_mut().zip(&da).zip(&cc.block_in[j]) {
                *d += a * act_grad(*hin);
            }
        }

        // Input, time and class embeddings.
        gemm(StridedRows::transposed(&cc.x, dim), dim, rows, &dh, h, &mut g[l.in_w.clone()]);
        add_col_sums(&mut g[l.in_b.clone()], &dh, h);
        gemm(StridedRows::transposed(&cc.feats, e), e, rows, &dh, h, &mut g[l.time_w.clone()]);
        add_col_sums(&mut g[l.time_b.clone()], &dh, h);
        let k = self.config.num_classes;
        let emb = l.class_emb.start;
        for (row, c) in dh.chunks_exact(h).zip(&cc.conds) {
            for (i, v) in row.iter().enumerate() {
                g[emb + k * h + i] += v;
            }
            if let Cond::Class(c) = c {
                for (i, v) in row.iter().enumerate() {
                    g[emb + c * h + i] += v;
                }
            }
        }
        g
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::num::gauss_draw;

    fn small_net(seed: u64) -> BlockDenoiser {
        let cfg = ModelConfig {
            dim: 2,
            hidden: 24,
            blocks: 4,
            time_features: 8,
            num_classes: 3,
        };
        let mut rng = Rng::new(seed);
        let mut net = BlockDenoiser::new(cfg, &mut rng).unwrap();
        // Give every parameter (including the zero-initialized ones) a value.
        for p in net.params_mut() {
            *p += 0.3 * rng.gauss();
        }
        net
    }

    #[test]
    fn fresh_net_predicts_zero() {
        let net = BlockDenoiser::new(ModelConfig::toy(1, 2), &mut Rng::new(0)).unwrap();
        for (x, t, c) in [(0.3, 1, Cond::Null), (-7.0, 200, Cond::Class(1)), (2.0, 50, Cond::Class(0))] {
            assert_eq!(net.forward(&[x], t, c, None).unwrap(), vec![0.0]);
        }
    }

    #[test]
    fn all_keep_mask_is_bit_identical() {
        let net = small_net(1);
        let xs = gauss_draw(&mut Rng::new(2), 2 * 150);
        let a = net.forward_batch(&xs, 17, Cond::Class(2), None).unwrap();
        let b = net
            .forward_batch(&xs, 17, Cond::Class(2), Some(&BlockMask::all_keep(4)))
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn batch_single_and_train_paths_agree() {
        let net = small_net(3);
        let xs = gauss_draw(&mut Rng::new(4), 2 * 130);
        let mask = BlockMask::dropping(4, &[1]).unwrap();
        let batch = net.forward_batch(&xs, 33, Cond::Null, Some(&mask)).unwrap();
        let ts = vec![33; 130];
        let cs = vec![Cond::Null; 130];
        let (train, _) = net.forward_train(&xs, &ts, &cs, Some(&mask)).unwrap();
        assert_eq!(batch, train);
        for i in [0, 64, 129] {
            let single = net.forward(&xs[2 * i..2 * i + 2], 33, Cond::Null, Some(&mask)).unwrap();
            assert_eq!(single, batch[2 * i..2 * i + 2]);
        }
    }

    #[test]
    fn dropping_an_identity_block_changes_nothing() {
        let mut net = small_net(5);
        // Make block 2 an exact identity by zeroing its output layer.
        let b = net.layout.blocks[2].clone();
        for i in b.w2.start..b.b2.end {
            net.params[i] = 0.0;
        }
        let xs = gauss_draw(&mut Rng::new(6), 2 * 10);
        let full = net.forward_batch(&xs, 9, Cond::Class(0), None).unwrap();
        let dropped = net
            .forward_batch(&xs, 9, Cond::Class(0), Some(&BlockMask::dropping(4, &[2]).unwrap()))
            .unwrap();
        assert_eq!(full, dropped);
    }

    #[test]
    fn mask_length_checked() {
        let net = small_net(7);
        let err = net
            .forward(&[0.0, 0.0], 3, Cond::Null, Some(&BlockMask::all_keep(3)))
            .unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
        assert!(net.forward(&[0.0], 3, Cond::Null, None).is_err());
        assert!(net.forward(&[0.0, 0.0], 3, Cond::Class(3), None).is_err());
    }

    fn loss_and_grad(net: &BlockDenoiser, xs: &[f64], ts: &[usize], cs: &[Cond], target: &[f64], mask: Option<&BlockMask>) -> (f64, Gradient) {
        let (out, cache) = net.forward_train(xs, ts, cs, mask).unwrap();
        let n = out.len() as f64;
        let loss = out.iter().zip(target).map(|(o, t)| (o - t) * (o - t)).sum::<f64>() / n;
        let d: Vec<f64> = out.iter().zip(target).map(|(o, t)| 2.0 * (o - t) / n).collect();
        (loss, net.backward(&cache, &d).unwrap())
    }

    fn batch(seed: u64, n: usize) -> (Vec<f64>, Vec<usize>, Vec<Cond>, Vec<f64>) {
        let mut rng = Rng::new(seed);
        let xs = gauss_draw(&mut rng, 2 * n);
        let ts: Vec<usize> = (0..n).map(|_| 1 + rng.below(200) as usize).collect();
        let cs: Vec<Cond> = (0..n)
            .map(|_| match rng.below(4) {
                3 => Cond::Null,
                k => Cond::Class(k as usize),
            })
            .collect();
        let target = gauss_draw(&mut rng, 2 * n);
        (xs, ts, cs, target)
    }

    #[test]
    fn zero_output_gradient_gives_zero_parameter_gradient() {
        let net = small_net(8);
        let (xs, ts, cs, _) = batch(9, 70);
        let (_, cache) = net.forward_train(&xs, &ts, &cs, None).unwrap();
        let g = net.backward(&cache, &vec![0.0; 140]).unwrap();
        assert!(g.0.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut net = small_net(10);
        let (xs, ts, cs, target) = batch(11, 40);
        let (_, g) = loss_and_grad(&net, &xs, &ts, &cs, &target, None);
        let mut rng = Rng::new(12);
        let h = 1e-5;
        let mut checked = 0;
        while checked < 200 {
            let i = rng.below(net.param_count() as u64) as usize;
            let orig = net.params[i];
            net.params[i] = orig + h;
            let (lp, _) = loss_and_grad(&net, &xs, &ts, &cs, &target, None);
            net.params[i] = orig - h;
            let (lm, _) = loss_and_grad(&net, &xs, &ts, &cs, &target, None);
            net.params[i] = orig;
            let fd = (lp - lm) / (2.0 * h);
            let denom = fd.abs().max(g.0[i].abs());
            if denom < 1e-7 {
                assert!((fd - g.0[i]).abs() < 1e-9);
            } else {
                assert!((fd - g.0[i]).abs() / denom < 1e-4, "param {i}: fd {fd} vs bp {}", g.0[i]);
            }
            checked += 1;
        }
    }

    #[test]
    fn dropped_block_gets_exactly_zero_gradient() {
        let net = small_net(13);
        let (xs, ts, cs, target) = batch(14, 50);
        let mask = BlockMask::dropping(4, &[1, 3]).unwrap();
        let (_, g) = loss_and_grad(&net, &xs, &ts, &cs, &target, Some(&mask));
        for j in [1, 3] {
            assert!(g.0[net.block_param_range(j)].iter().all(|v| *v == 0.0));
        }
        assert!(g.0[net.block_param_range(0)].iter().any(|v| *v != 0.0));
    }

    #[test]
    fn unseen_class_rows_match_null() {
        // Class rows start at zero, so before training e(c) == e(null).
        let mut rng = Rng::new(15);
        let mut net = BlockDenoiser::new(ModelConfig::toy(1, 2), &mut rng).unwrap();
        let r = net.output_param_range();
        for i in r {
            net.params[i] = rng.gauss();
        }
        let a = net.forward(&[0.4], 20, Cond::Class(1), None).unwrap();
        let b = net.forward(&[0.4], 20, Cond::Null, None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn topology_is_a_function_of_config() {
        let cfg = ModelConfig::toy(1, 2);
        let a = BlockDenoiser::new(cfg, &mut Rng::new(1)).unwrap();
        let b = BlockDenoiser::new(cfg, &mut Rng::new(2)).unwrap();
        assert_eq!(a.param_count(), b.param_count());
        let h = 64;
        let expected = h + h + 16 * h + h + 3 * h + 6 * (2 * h * h + 2 * h) + h + 1;
        assert_eq!(a.param_count(), expected);
    }

    #[test]
    fn activation_derivative() {
        for x in [-3.0, -0.5, 0.0, 0.2, 4.0] {
            let h = 1e-6;
            let fd = (act(x + h) - act(x - h)) / (2.0 * h);
            assert!((fd - act_grad(x)).abs() < 1e-8);
        }
    }
}
