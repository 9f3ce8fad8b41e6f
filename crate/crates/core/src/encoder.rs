//! Shared Siamese encoder.
//!
//! Token and learned position embeddings feed `n_layers` post-norm
//! transformer blocks (multi-head self-attention, add & norm, ReLU
//! feed-forward, add & norm); the output token vectors are mean-pooled into
//! one embedding. With `n_layers = 0` the encoder is a bag of embeddings.
//!
//! All parameters live in one flat `f64` buffer described by a
//! [`ParamLayout`]. Gradients use the same layout, which keeps the optimizer,
//! checkpointing and finite-difference checks layout-agnostic.

use std::ops::{Deref, Range};

use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::textproc::TokenSequence;

/// Half-width of the uniform initialization interval.
pub const INIT_SCALE: f64 = 0.05;
const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub d: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d: 32,
            n_layers: 2,
            n_heads: 2,
            d_ff: 64,
            max_len: crate::textproc::DEFAULT_MAX_LEN,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.n_heads == 0 || self.d_ff == 0 || self.max_len == 0 {
            return Err(Error::Config("encoder dimensions must all be at least 1".into()));
        }
        if self.n_layers > 0 && !self.d.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d = {} is not divisible by n_heads = {}",
                self.d, self.n_heads
            )));
        }
        Ok(())
    }

    fn head_dim(&self) -> usize {
        self.d / self.n_heads
    }
}

/// A pooled sequence embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding(pub Vec<f64>);

impl Deref for Embedding {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl Embedding {
    pub fn norm(&self) -> f64 {
        self.0.iter().map(|x| x * x).sum::<f64>().sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArraySpec {
    pub name: String,
    pub shape: Vec<usize>,
}

impl ArraySpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone)]
struct LayerSlots {
    q_w: Range<usize>,
    q_b: Range<usize>,
    k_w: Range<usize>,
    k_b: Range<usize>,
    v_w: Range<usize>,
    v_b: Range<usize>,
    o_w: Range<usize>,
    o_b: Range<usize>,
    attn_gain: Range<usize>,
    attn_bias: Range<usize>,
    ff_in_w: Range<usize>,
    ff_in_b: Range<usize>,
    ff_out_w: Range<usize>,
    ff_out_b: Range<usize>,
    ff_gain: Range<usize>,
    ff_bias: Range<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Init {
    Uniform,
    Zero,
    One,
}

/// Names, shapes and offsets of every parameter array.
#[derive(Debug, Clone)]
pub struct ParamLayout {
    arrays: Vec<(ArraySpec, Range<usize>, Init)>,
    token: Range<usize>,
    position: Range<usize>,
    layers: Vec<LayerSlots>,
    total: usize,
}

impl ParamLayout {
    pub fn new(config: &EncoderConfig, vocab_size: usize) -> Self {
        let d = config.d;
        let mut arrays = Vec::new();
        let mut total = 0usize;
        let mut push = |name: String, shape: Vec<usize>, init: Init| {
            let spec = ArraySpec { name, shape };
            let range = total..total + spec.numel();
            total = range.end;
            arrays.push((spec, range.clone(), init));
            range
        };
        let token = push("token_embedding".into(), vec![vocab_size, d], Init::Uniform);
        let position = push("position_embedding".into(), vec![config.max_len, d], Init::Uniform);
        let mut layers = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let p = |s: &str| format!("layers.{l}.{s}");
            layers.push(LayerSlots {
                q_w: push(p("attn.query.weight"), vec![d, d], Init::Uniform),
                q_b: push(p("attn.query.bias"), vec![d], Init::Zero),
                k_w: push(p("attn.key.weight"), vec![d, d], Init::Uniform),
                k_b: push(p("attn.key.bias"), vec![d], Init::Zero),
                v_w: push(p("attn.value.weight"), vec![d, d], Init::Uniform),
                v_b: push(p("attn.value.bias"), vec![d], Init::Zero),
                o_w: push(p("attn.output.weight"), vec![d, d], Init::Uniform),
                o_b: push(p("attn.output.bias"), vec![d], Init::Zero),
                attn_gain: push(p("attn_norm.gain"), vec![d], Init::One),
                attn_bias: push(p("attn_norm.bias"), vec![d], Init::Zero),
                ff_in_w: push(p("ff.in.weight"), vec![d, config.d_ff], Init::Uniform),
                ff_in_b: push(p("ff.in.bias"), vec![config.d_ff], Init::Zero),
                ff_out_w: push(p("ff.out.weight"), vec![config.d_ff, d], Init::Uniform),
                ff_out_b: push(p("ff.out.bias"), vec![d], Init::Zero),
                ff_gain: push(p("ff_norm.gain"), vec![d], Init::One),
                ff_bias: push(p("ff_norm.bias"), vec![d], Init::Zero),
            });
        }
        Self {
            arrays,
            token,
            position,
            layers,
            total,
        }
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn specs(&self) -> impl Iterator<Item = &ArraySpec> {
        self.arrays.iter().map(|(s, _, _)| s)
    }

    pub fn ranges(&self) -> impl Iterator<Item = (&ArraySpec, Range<usize>)> {
        self.arrays.iter().map(|(s, r, _)| (s, r.clone()))
    }

    pub fn range_of(&self, name: &str) -> Option<Range<usize>> {
        self.arrays
            .iter()
            .find(|(s, _, _)| s.name == name)
            .map(|(_, r, _)| r.clone())
    }

    /// Offset where the dense (non-token-embedding) block starts.
    fn dense_start(&self) -> usize {
        self.token.end
    }
}

/// The single parameter set shared by both Siamese branches.
#[derive(Debug, Clone)]
pub struct ModelParams {
    config: EncoderConfig,
    vocab_size: usize,
    layout: ParamLayout,
    values: Vec<f64>,
    version: u64,
}

impl PartialEq for ModelParams {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.vocab_size == other.vocab_size && self.values == other.values
    }
}

impl ModelParams {
    /// Seeded uniform(-0.05, 0.05) weights, unit norm gains, zero biases.
    pub fn init(config: &EncoderConfig, vocab_size: usize) -> Result<Self> {
        config.validate()?;
        if vocab_size < 2 {
            return Err(Error::Config("vocabulary must include the reserved ids".into()));
        }
        let layout = ParamLayout::new(config, vocab_size);
        let mut values = vec![0.0; layout.total];
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let dist = Uniform::new(-INIT_SCALE, INIT_SCALE).expect("valid interval");
        for (_, range, init) in &layout.arrays {
            let slot = &mut values[range.clone()];
            match init {
                Init::Uniform => slot.iter_mut().for_each(|v| *v = dist.sample(&mut rng)),
                Init::Zero => {}
                Init::One => slot.fill(1.0),
            }
        }
        Ok(Self {
            config: config.clone(),
            vocab_size,
            layout,
            values,
            version: 0,
        })
    }

    pub fn from_values(config: &EncoderConfig, vocab_size: usize, values: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::new(config, vocab_size);
        if values.len() != layout.total {
            return Err(Error::ShapeMismatch(format!(
                "expected {} parameters, got {}",
                layout.total,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Checkpoint("non-finite parameter value".into()));
        }
        Ok(Self {
            config: config.clone(),
            vocab_size,
            layout,
            values,
            version: 0,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Mutable access; every call bumps the version counter.
    pub fn values_mut(&mut self) -> &mut [f64] {
        self.version += 1;
        &mut self.values
    }

    /// Number of mutations applied since construction.
    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn array(&self, name: &str) -> Option<&[f64]> {
        self.layout.range_of(name).map(|r| &self.values[r])
    }

    fn slot(&self, r: &Range<usize>) -> &[f64] {
        &self.values[r.clone()]
    }
}

/// Gradient buffer with the same layout as [`ModelParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub values: Vec<f64>,
}

impl Grads {
    pub fn zeros_like(params: &ModelParams) -> Self {
        Self {
            values: vec![0.0; params.layout.total],
        }
    }

    /// Adds one sequence's gradient. Rows are added in stored order.
    pub fn accumulate(&mut self, params: &ModelParams, g: &SeqGrad) {
        let d = params.config.d;
        for (id, row) in &g.token_rows {
            let start = params.layout.token.start + *id as usize * d;
            for (acc, x) in self.values[start..start + d].iter_mut().zip(row) {
                *acc += x;
            }
        }
        let dense = &mut self.values[params.layout.dense_start()..];
        for (acc, x) in dense.iter_mut().zip(&g.dense) {
            *acc += x;
        }
    }
}

/// Gradient contribution of one sequence: sparse token-embedding rows plus
/// the dense block (positions and transformer layers).
#[derive(Debug, Clone)]
pub struct SeqGrad {
    pub token_rows: Vec<(u32, Vec<f64>)>,
    pub dense: Vec<f64>,
    dense_start: usize,
}

impl SeqGrad {
    fn slot(&mut self, r: &Range<usize>) -> &mut [f64] {
        &mut self.dense[r.start - self.dense_start..r.end - self.dense_start]
    }
}

#[derive(Debug, Clone)]
struct LayerCache {
    x: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    probs: Vec<f64>,
    ctx: Vec<f64>,
    xhat1: Vec<f64>,
    inv_std1: Vec<f64>,
    h1: Vec<f64>,
    z1: Vec<f64>,
    xhat2: Vec<f64>,
    inv_std2: Vec<f64>,
}

/// Activations kept by [`forward`] for [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    ids: Vec<u32>,
    d: usize,
    layers: Vec<LayerCache>,
    version: u64,
}

impl ForwardCache {
    /// Parameter version the activations were computed with.
    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

// y[n×m] = x[n×k] · w[k×m] + b[m]
fn affine(x: &[f64], w: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut y = Vec::with_capacity(n * m);
    for i in 0..n {
        y.extend_from_slice(b);
        let row = &mut y[i * m..(i + 1) * m];
        for (p, &xv) in x[i * k..(i + 1) * k].iter().enumerate() {
            for (yv, &wv) in row.iter_mut().zip(&w[p * m..(p + 1) * m]) {
                *yv += xv * wv;
            }
        }
    }
    y
}

// dw[k×m] += xᵀ·g, db[m] += Σ_rows g, returns dx[n×k] = g·wᵀ
#[allow(clippy::too_many_arguments)]
fn affine_backward(
    x: &[f64],
    w: &[f64],
    g: &[f64],
    n: usize,
    k: usize,
    m: usize,
    dw: &mut [f64],
    db: &mut [f64],
) -> Vec<f64> {
    let mut dx = vec![0.0; n * k];
    for i in 0..n {
        let grow = &g[i * m..(i + 1) * m];
        for (acc, &gv) in db.iter_mut().zip(grow) {
            *acc += gv;
        }
        for p in 0..k {
            let xv = x[i * k + p];
            let wrow = &w[p * m..(p + 1) * m];
            let dwrow = &mut dw[p * m..(p + 1) * m];
            let mut s = 0.0;
            for j in 0..m {
                dwrow[j] += xv * grow[j];
                s += grow[j] * wrow[j];
            }
            dx[i * k + p] = s;
        }
    }
    dx
}

// Row-wise layer norm; returns (y, xhat, inv_std).
fn layer_norm(x: &[f64], gain: &[f64], bias: &[f64], n: usize, d: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut y = vec![0.0; n * d];
    let mut xhat = vec![0.0; n * d];
    let mut inv_std = vec![0.0; n];
    for i in 0..n {
        let row = &x[i * d..(i + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + LN_EPS).sqrt();
        inv_std[i] = is;
        for j in 0..d {
            let h = (row[j] - mean) * is;
            xhat[i * d + j] = h;
            y[i * d + j] = gain[j] * h + bias[j];
        }
    }
    (y, xhat, inv_std)
}

#[allow(clippy::too_many_arguments)]
fn layer_norm_backward(
    dy: &[f64],
    xhat: &[f64],
    inv_std: &[f64],
    gain: &[f64],
    n: usize,
    d: usize,
    dgain: &mut [f64],
    dbias: &mut [f64],
) -> Vec<f64> {
    let mut dx = vec![0.0; n * d];
    let mut dxhat = vec![0.0; d];
    for i in 0..n {
        let dyr = &dy[i * d..(i + 1) * d];
        let xr = &xhat[i * d..(i + 1) * d];
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        for j in 0..d {
            dgain[j] += dyr[j] * xr[j];
            dbias[j] += dyr[j];
            dxhat[j] = dyr[j] * gain[j];
            mean_dxhat += dxhat[j];
            mean_dxhat_xhat += dxhat[j] * xr[j];
        }
        mean_dxhat /= d as f64;
        mean_dxhat_xhat /= d as f64;
        for j in 0..d {
            dx[i * d + j] = inv_std[i] * (dxhat[j] - mean_dxhat - xr[j] * mean_dxhat_xhat);
        }
    }
    dx
}

/// Embeds one sequence and returns the activations needed for backward.
pub fn forward(params: &ModelParams, seq: &TokenSequence) -> Result<(Embedding, ForwardCache)> {
    let cfg = &params.config;
    let (n, d) = (seq.ids.len(), cfg.d);
    if n == 0 {
        return Err(Error::EmptySequence);
    }
    if n > cfg.max_len {
        return Err(Error::ShapeMismatch(format!(
            "sequence of length {n} exceeds max_len {}",
            cfg.max_len
        )));
    }
    if let Some(&id) = seq.ids.iter().find(|&&id| id as usize >= params.vocab_size) {
        return Err(Error::TokenOutOfRange {
            id,
            vocab_size: params.vocab_size,
        });
    }
    let token = params.slot(&params.layout.token);
    let position = params.slot(&params.layout.position);
    let mut x = vec![0.0; n * d];
    for (t, &id) in seq.ids.iter().enumerate() {
        let tok = &token[id as usize * d..(id as usize + 1) * d];
        let pos = &position[t * d..(t + 1) * d];
        for j in 0..d {
            x[t * d + j] = tok[j] + pos[j];
        }
    }

    let mut layers = Vec::with_capacity(cfg.n_layers);
    for slots in &params.layout.layers {
        let (out, cache) = layer_forward(params, slots, x, n);
        layers.push(cache);
        x = out;
    }

    let mut pooled = vec![0.0; d];
    for t in 0..n {
        for j in 0..d {
            pooled[j] += x[t * d + j];
        }
    }
    pooled.iter_mut().for_each(|v| *v /= n as f64);
    Ok((
        Embedding(pooled),
        ForwardCache {
            ids: seq.ids.clone(),
            d,
            layers,
            version: params.version,
        },
    ))
}

/// Forward pass without keeping activations.
pub fn embed(params: &ModelParams, seq: &TokenSequence) -> Result<Embedding> {
    forward(params, seq).map(|(e, _)| e)
}

fn layer_forward(params: &ModelParams, s: &LayerSlots, x: Vec<f64>, n: usize) -> (Vec<f64>, LayerCache) {
    let cfg = &params.config;
    let (d, h, dh, dff) = (cfg.d, cfg.n_heads, cfg.head_dim(), cfg.d_ff);
    let p = |r: &Range<usize>| params.slot(r);

    let q = affine(&x, p(&s.q_w), p(&s.q_b), n, d, d);
    let k = affine(&x, p(&s.k_w), p(&s.k_b), n, d, d);
    let v = affine(&x, p(&s.v_w), p(&s.v_b), n, d, d);
    let scale = 1.0 / (dh as f64).sqrt();
    let mut probs = vec![0.0; h * n * n];
    let mut ctx = vec![0.0; n * d];
    for head in 0..h {
        let c0 = head * dh;
        for i in 0..n {
            let row = &mut probs[(head * n + i) * n..(head * n + i + 1) * n];
            for j in 0..n {
                let mut s = 0.0;
                for c in c0..c0 + dh {
                    s += q[i * d + c] * k[j * d + c];
                }
                row[j] = s * scale;
            }
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for r in row.iter_mut() {
                *r = (*r - max).exp();
                sum += *r;
            }
            for r in row.iter_mut() {
                *r /= sum;
            }
            for j in 0..n {
                let pij = row[j];
                for c in c0..c0 + dh {
                    ctx[i * d + c] += pij * v[j * d + c];
                }
            }
        }
    }
    let attn = affine(&ctx, p(&s.o_w), p(&s.o_b), n, d, d);
    let r1: Vec<f64> = x.iter().zip(&attn).map(|(a, b)| a + b).collect();
    let (h1, xhat1, inv_std1) = layer_norm(&r1, p(&s.attn_gain), p(&s.attn_bias), n, d);
    let z1 = affine(&h1, p(&s.ff_in_w), p(&s.ff_in_b), n, d, dff);
    let a1: Vec<f64> = z1.iter().map(|&z| z.max(0.0)).collect();
    let f = affine(&a1, p(&s.ff_out_w), p(&s.ff_out_b), n, dff, d);
    let r2: Vec<f64> = h1.iter().zip(&f).map(|(a, b)| a + b).collect();
    let (out, xhat2, inv_std2) = layer_norm(&r2, p(&s.ff_gain), p(&s.ff_bias), n, d);
    (
        out,
        LayerCache {
            x,
            q,
            k,
            v,
            probs,
            ctx,
            xhat1,
            inv_std1,
            h1,
            z1,
            xhat2,
            inv_std2,
        },
    )
}

/// Gradient of a scalar loss w.r.t. every parameter, given ∂loss/∂embedding.
pub fn backward(params: &ModelParams, cache: &ForwardCache, grad_out: &[f64]) -> Result<SeqGrad> {
    let cfg = &params.config;
    let (n, d) = (cache.ids.len(), cfg.d);
    if grad_out.len() != d || cache.d != d || cache.layers.len() != cfg.n_layers {
        return Err(Error::ShapeMismatch(format!(
            "cache (d={}, layers={}) / gradient (len {}) do not match encoder (d={d}, layers={})",
            cache.d,
            cache.layers.len(),
            grad_out.len(),
            cfg.n_layers
        )));
    }
    let dense_start = params.layout.dense_start();
    let mut g = SeqGrad {
        token_rows: Vec::with_capacity(n),
        dense: vec![0.0; params.layout.total - dense_start],
        dense_start,
    };

    let mut dx = vec![0.0; n * d];
    for t in 0..n {
        for j in 0..d {
            dx[t * d + j] = grad_out[j] / n as f64;
        }
    }
    for (slots, lc) in params.layout.layers.iter().zip(&cache.layers).rev() {
        dx = layer_backward(params, slots, lc, &dx, n, &mut g);
    }

    let pos = params.layout.position.clone();
    let dpos = g.slot(&pos);
    for t in 0..n {
        for j in 0..d {
            dpos[t * d + j] += dx[t * d + j];
        }
    }
    for (t, &id) in cache.ids.iter().enumerate() {
        g.token_rows.push((id, dx[t * d..(t + 1) * d].to_vec()));
    }
    Ok(g)
}

/// Dense-buffer variant of [`backward`].
pub fn backward_dense(params: &ModelParams, cache: &ForwardCache, grad_out: &[f64]) -> Result<Grads> {
    let sg = backward(params, cache, grad_out)?;
    let mut grads = Grads::zeros_like(params);
    grads.accumulate(params, &sg);
    Ok(grads)
}

fn layer_backward(
    params: &ModelParams,
    s: &LayerSlots,
    c: &LayerCache,
    dout: &[f64],
    n: usize,
    g: &mut SeqGrad,
) -> Vec<f64> {
    let cfg = &params.config;
    let (d, h, dh, dff) = (cfg.d, cfg.n_heads, cfg.head_dim(), cfg.d_ff);
    let p = |r: &Range<usize>| params.slot(r);

    // ff_norm
    let (mut dgain, mut dbias) = (vec![0.0; d], vec![0.0; d]);
    let dr2 = layer_norm_backward(dout, &c.xhat2, &c.inv_std2, p(&s.ff_gain), n, d, &mut dgain, &mut dbias);
    add_into(g.slot(&s.ff_gain), &dgain);
    add_into(g.slot(&s.ff_bias), &dbias);

    // feed-forward; residual sends dr2 straight to h1
    let a1: Vec<f64> = c.z1.iter().map(|&z| z.max(0.0)).collect();
    let (mut dw, mut db) = (vec![0.0; dff * d], vec![0.0; d]);
    let da1 = affine_backward(&a1, p(&s.ff_out_w), &dr2, n, dff, d, &mut dw, &mut db);
    add_into(g.slot(&s.ff_out_w), &dw);
    add_into(g.slot(&s.ff_out_b), &db);
    let dz1: Vec<f64> = da1
        .iter()
        .zip(&c.z1)
        .map(|(&g, &z)| if z > 0.0 { g } else { 0.0 })
        .collect();
    let (mut dw, mut db) = (vec![0.0; d * dff], vec![0.0; dff]);
    let dh1_ff = affine_backward(&c.h1, p(&s.ff_in_w), &dz1, n, d, dff, &mut dw, &mut db);
    add_into(g.slot(&s.ff_in_w), &dw);
    add_into(g.slot(&s.ff_in_b), &db);
    let dh1: Vec<f64> = dr2.iter().zip(&dh1_ff).map(|(a, b)| a + b).collect();

    // attn_norm
    let (mut dgain, mut dbias) = (vec![0.0; d], vec![0.0; d]);
    let dr1 = layer_norm_backward(
        &dh1,
        &c.xhat1,
        &c.inv_std1,
        p(&s.attn_gain),
        n,
        d,
        &mut dgain,
        &mut dbias,
    );
    add_into(g.slot(&s.attn_gain), &dgain);
    add_into(g.slot(&s.attn_bias), &dbias);

    // output projection; residual sends dr1 straight to x
    let (mut dw, mut db) = (vec![0.0; d * d], vec![0.0; d]);
    let dctx = affine_backward(&c.ctx, p(&s.o_w), &dr1, n, d, d, &mut dw, &mut db);
    add_into(g.slot(&s.o_w), &dw);
    add_into(g.slot(&s.o_b), &db);

    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = vec![0.0; n * d];
    let mut dk = vec![0.0; n * d];
    let mut dv = vec![0.0; n * d];
    let mut dp = vec![0.0; n];
    for head in 0..h {
        let c0 = head * dh;
        for i in 0..n {
            let prow = &c.probs[(head * n + i) * n..(head * n + i + 1) * n];
            for j in 0..n {
                let mut s = 0.0;
                for col in c0..c0 + dh {
                    s += dctx[i * d + col] * c.v[j * d + col];
                    dv[j * d + col] += prow[j] * dctx[i * d + col];
                }
                dp[j] = s;
            }
            let dot: f64 = prow.iter().zip(&dp).map(|(a, b)| a * b).sum();
            for j in 0..n {
                let ds = prow[j] * (dp[j] - dot) * scale;
                for col in c0..c0 + dh {
                    dq[i * d + col] += ds * c.k[j * d + col];
                    dk[j * d + col] += ds * c.q[i * d + col];
                }
            }
        }
    }

    let mut dx = dr1;
    for (dproj, w, b) in [(&dq, &s.q_w, &s.q_b), (&dk, &s.k_w, &s.k_b), (&dv, &s.v_w, &s.v_b)] {
        let (mut dw, mut db) = (vec![0.0; d * d], vec![0.0; d]);
        let dxi = affine_backward(&c.x, p(w), dproj, n, d, d, &mut dw, &mut db);
        add_into(g.slot(w), &dw);
        add_into(g.slot(b), &db);
        add_into(&mut dx, &dxi);
    }
    dx
}

fn add_into(acc: &mut [f64], x: &[f64]) {
    for (a, b) in acc.iter_mut().zip(x) {
        *a += b;
    }
}
