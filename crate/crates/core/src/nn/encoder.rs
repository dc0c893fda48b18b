//! Pre-norm transformer encoder over byte tokens.
//!
//! Each layer computes `x + MHA(LN(x))` followed by `x + FFN(LN(x))` with a
//! GELU feed-forward block. Attention is `softmax(QKᵀ/√d_k) V` per head, heads
//! concatenated and projected. Pad positions are masked out as attention keys
//! and out of the mean-pool, so they never influence real positions.
//!
//! The forward pass reports the pooled state after the embedding layer (`F_0`)
//! and after every layer (`F_1..F_L`); the last one is the sample embedding.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::math::{dot, gemm_acc, linear_rows, linear_rows_backward};
use super::{NnError, ParamSet, Tensor};
use crate::ingest::{TrafficSample, PAD_TOKEN, VOCAB_SIZE};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
}

impl EncoderConfig {
    pub fn new(d: usize, layers: usize, heads: usize, max_len: usize) -> Self {
        Self { d, layers, heads, d_ff: 2 * d, max_len }
    }

    pub fn d_k(&self) -> usize {
        self.d / self.heads
    }

    pub fn validate(&self) -> Result<(), NnError> {
        if self.d == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return Err(NnError::InvalidConfig(format!("d={} is not divisible by heads={}", self.d, self.heads)));
        }
        if self.max_len == 0 || self.d_ff == 0 {
            return Err(NnError::InvalidConfig("max_len and d_ff must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer {
    pub ln1_g: Tensor,
    pub ln1_b: Tensor,
    pub w_q: Tensor,
    pub b_q: Tensor,
    pub w_k: Tensor,
    pub b_k: Tensor,
    pub w_v: Tensor,
    pub b_v: Tensor,
    pub w_o: Tensor,
    pub b_o: Tensor,
    pub ln2_g: Tensor,
    pub ln2_b: Tensor,
    pub w_1: Tensor,
    pub b_1: Tensor,
    pub w_2: Tensor,
    pub b_2: Tensor,
}

impl EncoderLayer {
    fn build(l: usize, cfg: &EncoderConfig, mut make: impl FnMut(String, &[usize], usize) -> Tensor) -> Self {
        let d = cfg.d;
        let f = cfg.d_ff;
        let n = |s: &str| format!("encoder.layer{l}.{s}");
        Self {
            ln1_g: Tensor::filled(n("ln1_g"), &[d], 1.0),
            ln1_b: Tensor::zeros(n("ln1_b"), &[d]),
            w_q: make(n("w_q"), &[d, d], d),
            b_q: make(n("b_q"), &[d], d),
            w_k: make(n("w_k"), &[d, d], d),
            b_k: make(n("b_k"), &[d], d),
            w_v: make(n("w_v"), &[d, d], d),
            b_v: make(n("b_v"), &[d], d),
            w_o: make(n("w_o"), &[d, d], d),
            b_o: make(n("b_o"), &[d], d),
            ln2_g: Tensor::filled(n("ln2_g"), &[d], 1.0),
            ln2_b: Tensor::zeros(n("ln2_b"), &[d]),
            w_1: make(n("w_1"), &[f, d], d),
            b_1: make(n("b_1"), &[f], d),
            w_2: make(n("w_2"), &[d, f], f),
            b_2: make(n("b_2"), &[d], f),
        }
    }

    fn tensors(&self) -> [&Tensor; 16] {
        [
            &self.ln1_g, &self.ln1_b, &self.w_q, &self.b_q, &self.w_k, &self.b_k, &self.w_v, &self.b_v, &self.w_o,
            &self.b_o, &self.ln2_g, &self.ln2_b, &self.w_1, &self.b_1, &self.w_2, &self.b_2,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 16] {
        [
            &mut self.ln1_g,
            &mut self.ln1_b,
            &mut self.w_q,
            &mut self.b_q,
            &mut self.w_k,
            &mut self.b_k,
            &mut self.w_v,
            &mut self.b_v,
            &mut self.w_o,
            &mut self.b_o,
            &mut self.ln2_g,
            &mut self.ln2_b,
            &mut self.w_1,
            &mut self.b_1,
            &mut self.w_2,
            &mut self.b_2,
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub tok_emb: Tensor,
    pub pos_emb: Tensor,
    pub layers: Vec<EncoderLayer>,
}

impl EncoderParams {
    pub fn zeros(config: EncoderConfig) -> Self {
        let layers = (0..config.layers)
            .map(|l| EncoderLayer::build(l, &config, |name, shape, _| Tensor::zeros(name, shape)))
            .collect();
        Self {
            config,
            tok_emb: Tensor::zeros("encoder.tok_emb", &[VOCAB_SIZE, config.d]),
            pos_emb: Tensor::zeros("encoder.pos_emb", &[config.max_len, config.d]),
            layers,
        }
    }

    pub fn init(config: EncoderConfig, rng: &mut impl Rng) -> Self {
        let emb_bound = 1.0 / (config.d as f64).sqrt();
        let tok_emb = Tensor::uniform("encoder.tok_emb", &[VOCAB_SIZE, config.d], emb_bound, rng);
        let pos_emb = Tensor::uniform("encoder.pos_emb", &[config.max_len, config.d], emb_bound, rng);
        let layers = (0..config.layers)
            .map(|l| {
                EncoderLayer::build(l, &config, |name, shape, fan_in| {
                    Tensor::uniform(name, shape, 1.0 / (fan_in as f64).sqrt(), rng)
                })
            })
            .collect();
        Self { config, tok_emb, pos_emb, layers }
    }
}

impl ParamSet for EncoderParams {
    fn tensors(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.tok_emb, &self.pos_emb];
        for l in &self.layers {
            out.extend(l.tensors());
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.tok_emb, &mut self.pos_emb];
        for l in &mut self.layers {
            out.extend(l.tensors_mut());
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    /// Mean-pooled states `F_0..F_L` over non-pad positions.
    pub pooled: Vec<Vec<f64>>,
}

impl EncoderOutput {
    /// Final embedding `v = F_L`.
    pub fn embedding(&self) -> &[f64] {
        self.pooled.last().expect("at least the embedding layer")
    }
}

struct LayerNormCache {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
}

fn layer_norm(x: &[f64], n: usize, g: &[f64], b: &[f64], out: &mut [f64]) -> LayerNormCache {
    let d = g.len();
    let mut xhat = vec![0.0; n * d];
    let mut inv_std = vec![0.0; n];
    for t in 0..n {
        let row = &x[t * d..(t + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + LN_EPS).sqrt();
        inv_std[t] = is;
        for k in 0..d {
            let xh = (row[k] - mean) * is;
            xhat[t * d + k] = xh;
            out[t * d + k] = g[k] * xh + b[k];
        }
    }
    LayerNormCache { xhat, inv_std }
}

fn layer_norm_backward(
    cache: &LayerNormCache,
    g: &[f64],
    dy: &[f64],
    dg: &mut [f64],
    db: &mut [f64],
    dx: &mut [f64],
) {
    let d = g.len();
    let n = cache.inv_std.len();
    let mut dxhat = vec![0.0; d];
    for t in 0..n {
        let xh = &cache.xhat[t * d..(t + 1) * d];
        let dyr = &dy[t * d..(t + 1) * d];
        for k in 0..d {
            dg[k] += dyr[k] * xh[k];
            db[k] += dyr[k];
            dxhat[k] = dyr[k] * g[k];
        }
        let mean_dxhat = dxhat.iter().sum::<f64>() / d as f64;
        let mean_dxhat_xhat = dot(&dxhat, xh) / d as f64;
        for k in 0..d {
            dx[t * d + k] += cache.inv_std[t] * (dxhat[k] - mean_dxhat - xh[k] * mean_dxhat_xhat);
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[inline]
fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

struct LayerCache {
    ln1: LayerNormCache,
    a: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// Attention weights, `heads × n × n`, zero on masked keys.
    p: Vec<f64>,
    ctx: Vec<f64>,
    ln2: LayerNormCache,
    bn: Vec<f64>,
    u: Vec<f64>,
    gu: Vec<f64>,
}

/// Full forward pass with everything needed for backpropagation.
pub(crate) struct EncoderTrace {
    tokens: Vec<u16>,
    valid: Vec<bool>,
    n_valid: usize,
    layers: Vec<LayerCache>,
    pub output: EncoderOutput,
}

impl EncoderTrace {
    /// Attention weights of `layer`, `head`, query position `t` over all key positions.
    #[cfg(test)]
    pub fn attention_row(&self, layer: usize, head: usize, t: usize) -> &[f64] {
        let n = self.tokens.len();
        let base = (head * n + t) * n;
        &self.layers[layer].p[base..base + n]
    }
}

fn valid_mask(tokens: &[u16]) -> (Vec<bool>, usize) {
    let mut valid: Vec<bool> = tokens.iter().map(|&t| t != PAD_TOKEN).collect();
    let mut n_valid = valid.iter().filter(|&&v| v).count();
    if n_valid == 0 {
        // all padding: attend and pool over every position
        valid.fill(true);
        n_valid = valid.len();
    }
    (valid, n_valid)
}

fn pool(x: &[f64], d: usize, valid: &[bool], n_valid: usize) -> Vec<f64> {
    let mut out = vec![0.0; d];
    for (t, &ok) in valid.iter().enumerate() {
        if ok {
            for (o, v) in out.iter_mut().zip(&x[t * d..(t + 1) * d]) {
                *o += v;
            }
        }
    }
    out.iter_mut().for_each(|o| *o /= n_valid as f64);
    out
}

pub(crate) fn forward_trace(params: &EncoderParams, tokens: &[u16]) -> Result<EncoderTrace, NnError> {
    let cfg = params.config;
    cfg.validate()?;
    let n = tokens.len();
    if n == 0 || n > cfg.max_len {
        return Err(NnError::DimensionMismatch(format!("sequence length {n} outside 1..={}", cfg.max_len)));
    }
    if params.layers.len() != cfg.layers || params.tok_emb.shape != [VOCAB_SIZE, cfg.d] {
        return Err(NnError::DimensionMismatch("encoder parameters disagree with config".into()));
    }
    let d = cfg.d;
    let heads = cfg.heads;
    let dk = cfg.d_k();
    let scale = 1.0 / (dk as f64).sqrt();
    let (valid, n_valid) = valid_mask(tokens);

    let mut x = vec![0.0; n * d];
    for (t, &tok) in tokens.iter().enumerate() {
        let row = &mut x[t * d..(t + 1) * d];
        for ((r, e), p) in row.iter_mut().zip(params.tok_emb.row(usize::from(tok))).zip(params.pos_emb.row(t)) {
            *r = e + p;
        }
    }
    let mut pooled = vec![pool(&x, d, &valid, n_valid)];
    let mut caches = Vec::with_capacity(cfg.layers);

    for layer in &params.layers {
        let mut a = vec![0.0; n * d];
        let ln1 = layer_norm(&x, n, &layer.ln1_g.data, &layer.ln1_b.data, &mut a);
        let mut q = vec![0.0; n * d];
        let mut k = vec![0.0; n * d];
        let mut v = vec![0.0; n * d];
        linear_rows(&a, n, &layer.w_q.data, &layer.b_q.data, &mut q);
        linear_rows(&a, n, &layer.w_k.data, &layer.b_k.data, &mut k);
        linear_rows(&a, n, &layer.w_v.data, &layer.b_v.data, &mut v);

        let mut p = vec![0.0; heads * n * n];
        let mut ctx = vec![0.0; n * d];
        for h in 0..heads {
            let off = h * dk;
            let ph = &mut p[h * n * n..(h + 1) * n * n];
            gemm_acc(n, dk, n, &q[off..], (d, 1), &k[off..], (1, d), ph, (n, 1));
            for prow in ph.chunks_exact_mut(n) {
                let mut max = f64::NEG_INFINITY;
                for u in 0..n {
                    if valid[u] {
                        prow[u] *= scale;
                        max = max.max(prow[u]);
                    }
                }
                let mut sum = 0.0;
                for u in 0..n {
                    if valid[u] {
                        let e = (prow[u] - max).exp();
                        prow[u] = e;
                        sum += e;
                    } else {
                        prow[u] = 0.0;
                    }
                }
                prow.iter_mut().for_each(|w| *w /= sum);
            }
            gemm_acc(n, n, dk, ph, (n, 1), &v[off..], (d, 1), &mut ctx[off..], (d, 1));
        }
        let mut o = vec![0.0; n * d];
        linear_rows(&ctx, n, &layer.w_o.data, &layer.b_o.data, &mut o);
        for (xv, ov) in x.iter_mut().zip(&o) {
            *xv += ov;
        }

        let mut bn = vec![0.0; n * d];
        let ln2 = layer_norm(&x, n, &layer.ln2_g.data, &layer.ln2_b.data, &mut bn);
        let f = cfg.d_ff;
        let mut u = vec![0.0; n * f];
        linear_rows(&bn, n, &layer.w_1.data, &layer.b_1.data, &mut u);
        let gu: Vec<f64> = u.iter().map(|&z| gelu(z)).collect();
        let mut ff = vec![0.0; n * d];
        linear_rows(&gu, n, &layer.w_2.data, &layer.b_2.data, &mut ff);
        for (xv, fv) in x.iter_mut().zip(&ff) {
            *xv += fv;
        }
        pooled.push(pool(&x, d, &valid, n_valid));
        caches.push(LayerCache { ln1, a, q, k, v, p, ctx, ln2, bn, u, gu });
    }

    Ok(EncoderTrace { tokens: tokens.to_vec(), valid, n_valid, layers: caches, output: EncoderOutput { pooled } })
}

/// Per-layer pooled states and the final embedding for one sample.
pub fn encoder_forward(params: &EncoderParams, sample: &TrafficSample) -> Result<EncoderOutput, NnError> {
    Ok(forward_trace(params, &sample.tokens)?.output)
}

/// Backpropagates `dL/dF_L` into `grad`.
pub(crate) fn backward(params: &EncoderParams, trace: &EncoderTrace, d_pooled: &[f64], grad: &mut EncoderParams) {
    let cfg = params.config;
    let d = cfg.d;
    let n = trace.tokens.len();
    let heads = cfg.heads;
    let dk = cfg.d_k();
    let f = cfg.d_ff;
    let scale = 1.0 / (dk as f64).sqrt();

    let mut dx = vec![0.0; n * d];
    for t in 0..n {
        if trace.valid[t] {
            for (g, dp) in dx[t * d..(t + 1) * d].iter_mut().zip(d_pooled) {
                *g = dp / trace.n_valid as f64;
            }
        }
    }

    for (li, (layer, cache)) in params.layers.iter().zip(&trace.layers).enumerate().rev() {
        let gl = &mut grad.layers[li];
        // feed-forward block
        let mut dgu = vec![0.0; n * f];
        linear_rows_backward(&cache.gu, n, &layer.w_2.data, &dx, &mut gl.w_2.data, &mut gl.b_2.data, &mut dgu);
        let du: Vec<f64> = dgu.iter().zip(&cache.u).map(|(g, &z)| g * gelu_grad(z)).collect();
        let mut dbn = vec![0.0; n * d];
        linear_rows_backward(&cache.bn, n, &layer.w_1.data, &du, &mut gl.w_1.data, &mut gl.b_1.data, &mut dbn);
        layer_norm_backward(&cache.ln2, &layer.ln2_g.data, &dbn, &mut gl.ln2_g.data, &mut gl.ln2_b.data, &mut dx);

        // attention block
        let mut dctx = vec![0.0; n * d];
        linear_rows_backward(&cache.ctx, n, &layer.w_o.data, &dx, &mut gl.w_o.data, &mut gl.b_o.data, &mut dctx);
        let mut dq = vec![0.0; n * d];
        let mut dk_ = vec![0.0; n * d];
        let mut dv = vec![0.0; n * d];
        let mut dp = vec![0.0; n * n];
        for h in 0..heads {
            let off = h * dk;
            let ph = &cache.p[h * n * n..(h + 1) * n * n];
            dp.fill(0.0);
            gemm_acc(n, dk, n, &dctx[off..], (d, 1), &cache.v[off..], (1, d), &mut dp, (n, 1));
            gemm_acc(n, n, dk, ph, (1, n), &dctx[off..], (d, 1), &mut dv[off..], (d, 1));
            // dp becomes dL/dscores in place
            for (prow, drow) in ph.chunks_exact(n).zip(dp.chunks_exact_mut(n)) {
                let weighted = dot(prow, drow);
                for (g, &w) in drow.iter_mut().zip(prow) {
                    *g = w * (*g - weighted) * scale;
                }
            }
            gemm_acc(n, n, dk, &dp, (n, 1), &cache.k[off..], (d, 1), &mut dq[off..], (d, 1));
            gemm_acc(n, n, dk, &dp, (1, n), &cache.q[off..], (d, 1), &mut dk_[off..], (d, 1));
        }
        let mut da = vec![0.0; n * d];
        linear_rows_backward(&cache.a, n, &layer.w_q.data, &dq, &mut gl.w_q.data, &mut gl.b_q.data, &mut da);
        linear_rows_backward(&cache.a, n, &layer.w_k.data, &dk_, &mut gl.w_k.data, &mut gl.b_k.data, &mut da);
        linear_rows_backward(&cache.a, n, &layer.w_v.data, &dv, &mut gl.w_v.data, &mut gl.b_v.data, &mut da);
        layer_norm_backward(&cache.ln1, &layer.ln1_g.data, &da, &mut gl.ln1_g.data, &mut gl.ln1_b.data, &mut dx);
    }

    for (t, &tok) in trace.tokens.iter().enumerate() {
        let g = &dx[t * d..(t + 1) * d];
        for (e, v) in grad.tok_emb.row_mut(usize::from(tok)).iter_mut().zip(g) {
            *e += v;
        }
        for (e, v) in grad.pos_emb.row_mut(t).iter_mut().zip(g) {
            *e += v;
        }
    }
}
