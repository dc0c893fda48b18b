//! LSTM feature extractor.
//!
//! Gates act on the concatenation `[h_{t-1}, x_t]`:
//!
//! ```text
//! i_t = σ(W_i [h, x] + b_i)      f_t = σ(W_f [h, x] + b_f)
//! o_t = σ(W_o [h, x] + b_o)      c̃_t = tanh(W_c [h, x] + b_c)
//! c_t = f_t ⊙ c_{t-1} + i_t ⊙ c̃_t
//! h_t = o_t ⊙ tanh(c_t)
//! ```
//!
//! The feature of a sample is the final hidden state after scanning every
//! token (pad tokens included) from a zero state.

use rand::Rng;

use super::math::{dot, gemm_acc, matvec_acc, sigmoid};
use super::{NnError, ParamSet, Tensor};
use crate::ingest::{TrafficSample, VOCAB_SIZE};

#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams {
    pub d: usize,
    pub d_in: usize,
    /// Token embedding table, `VOCAB_SIZE × d_in`.
    pub embedding: Tensor,
    pub w_i: Tensor,
    pub w_f: Tensor,
    pub w_o: Tensor,
    pub w_c: Tensor,
    pub b_i: Tensor,
    pub b_f: Tensor,
    pub b_o: Tensor,
    pub b_c: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmState {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

impl LstmState {
    pub fn zeros(d: usize) -> Self {
        Self { h: vec![0.0; d], c: vec![0.0; d] }
    }
}

impl LstmParams {
    pub fn zeros(d: usize, d_in: usize) -> Self {
        let w = |n: &str| Tensor::zeros(format!("lstm.{n}"), &[d, d + d_in]);
        let b = |n: &str| Tensor::zeros(format!("lstm.{n}"), &[d]);
        Self {
            d,
            d_in,
            embedding: Tensor::zeros("lstm.embedding", &[VOCAB_SIZE, d_in]),
            w_i: w("w_i"),
            w_f: w("w_f"),
            w_o: w("w_o"),
            w_c: w("w_c"),
            b_i: b("b_i"),
            b_f: b("b_f"),
            b_o: b("b_o"),
            b_c: b("b_c"),
        }
    }

    pub fn init(d: usize, d_in: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / ((d + d_in) as f64).sqrt();
        let emb_bound = 1.0 / (d_in as f64).sqrt();
        let w = |n: &str, rng: &mut _| Tensor::uniform(format!("lstm.{n}"), &[d, d + d_in], bound, rng);
        let b = |n: &str, rng: &mut _| Tensor::uniform(format!("lstm.{n}"), &[d], bound, rng);
        Self {
            d,
            d_in,
            embedding: Tensor::uniform("lstm.embedding", &[VOCAB_SIZE, d_in], emb_bound, rng),
            w_i: w("w_i", rng),
            w_f: w("w_f", rng),
            w_o: w("w_o", rng),
            w_c: w("w_c", rng),
            b_i: b("b_i", rng),
            b_f: b("b_f", rng),
            b_o: b("b_o", rng),
            b_c: b("b_c", rng),
        }
    }

    fn check_shapes(&self) -> Result<(), NnError> {
        let want = [self.d, self.d + self.d_in];
        for w in [&self.w_i, &self.w_f, &self.w_o, &self.w_c] {
            if w.shape != want {
                return Err(NnError::DimensionMismatch(format!("{} has shape {:?}, expected {want:?}", w.name, w.shape)));
            }
        }
        for b in [&self.b_i, &self.b_f, &self.b_o, &self.b_c] {
            if b.len() != self.d {
                return Err(NnError::DimensionMismatch(format!("{} has length {}, expected {}", b.name, b.len(), self.d)));
            }
        }
        Ok(())
    }

    pub fn embed(&self, token: u16) -> &[f64] {
        self.embedding.row(usize::from(token))
    }
}

impl ParamSet for LstmParams {
    fn tensors(&self) -> Vec<&Tensor> {
        vec![
            &self.embedding,
            &self.w_i,
            &self.w_f,
            &self.w_o,
            &self.w_c,
            &self.b_i,
            &self.b_f,
            &self.b_o,
            &self.b_c,
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.embedding,
            &mut self.w_i,
            &mut self.w_f,
            &mut self.w_o,
            &mut self.w_c,
            &mut self.b_i,
            &mut self.b_f,
            &mut self.b_o,
            &mut self.b_c,
        ]
    }
}

fn step_inner(params: &LstmParams, state: &LstmState, x: &[f64]) -> LstmState {
    let d = params.d;
    let mut z = Vec::with_capacity(d + params.d_in);
    z.extend_from_slice(&state.h);
    z.extend_from_slice(x);
    let gate = |w: &Tensor, b: &Tensor| {
        let mut a = b.data.clone();
        matvec_acc(&w.data, &z, &mut a);
        a
    };
    let i: Vec<f64> = gate(&params.w_i, &params.b_i).into_iter().map(sigmoid).collect();
    let f: Vec<f64> = gate(&params.w_f, &params.b_f).into_iter().map(sigmoid).collect();
    let o: Vec<f64> = gate(&params.w_o, &params.b_o).into_iter().map(sigmoid).collect();
    let g: Vec<f64> = gate(&params.w_c, &params.b_c).into_iter().map(f64::tanh).collect();
    let c: Vec<f64> = (0..d).map(|k| f[k] * state.c[k] + i[k] * g[k]).collect();
    let h: Vec<f64> = (0..d).map(|k| o[k] * c[k].tanh()).collect();
    LstmState { h, c }
}

/// One recurrence step.
pub fn lstm_step(params: &LstmParams, state: &LstmState, x: &[f64]) -> Result<LstmState, NnError> {
    params.check_shapes()?;
    if state.h.len() != params.d || state.c.len() != params.d {
        return Err(NnError::DimensionMismatch(format!(
            "state has sizes ({}, {}), parameters expect {}",
            state.h.len(),
            state.c.len(),
            params.d
        )));
    }
    if x.len() != params.d_in {
        return Err(NnError::DimensionMismatch(format!("input has length {}, expected {}", x.len(), params.d_in)));
    }
    Ok(step_inner(params, state, x))
}

/// Final hidden state after scanning the whole sample.
pub fn extract_feature(params: &LstmParams, sample: &TrafficSample) -> Result<Vec<f64>, NnError> {
    params.check_shapes()?;
    if params.embedding.shape != [VOCAB_SIZE, params.d_in] {
        return Err(NnError::DimensionMismatch("embedding table shape".into()));
    }
    Ok(forward_trace(params, &sample.tokens).h_last)
}

fn gates(params: &LstmParams) -> [&Tensor; 4] {
    [&params.w_i, &params.w_f, &params.w_o, &params.w_c]
}

/// Forward pass retaining every step for backpropagation through time.
///
/// The input half of every gate (`W[:, d..] x_t + b`) is computed for all
/// steps at once; only the recurrent half runs step by step.
pub(crate) struct LstmTrace {
    tokens: Vec<u16>,
    /// Embedded inputs, `n × d_in`.
    x: Vec<f64>,
    /// Hidden states `h_0..h_n`, `(n + 1) × d`.
    h: Vec<f64>,
    /// Cell states `c_0..c_n`, `(n + 1) × d`.
    c: Vec<f64>,
    /// Gate activations `i, f, o, c̃`, each `n × d`.
    act: [Vec<f64>; 4],
    pub h_last: Vec<f64>,
}

pub(crate) fn forward_trace(params: &LstmParams, tokens: &[u16]) -> LstmTrace {
    let (d, d_in) = (params.d, params.d_in);
    let cols = d + d_in;
    let n = tokens.len();
    let mut x = Vec::with_capacity(n * d_in);
    for &tok in tokens {
        x.extend_from_slice(params.embed(tok));
    }
    let biases = [&params.b_i, &params.b_f, &params.b_o, &params.b_c];
    let mut act: [Vec<f64>; 4] = Default::default();
    for ((a, w), b) in act.iter_mut().zip(gates(params)).zip(biases) {
        *a = b.data.repeat(n);
        gemm_acc(n, d_in, d, &x, (d_in, 1), &w.data[d..], (1, cols), a, (d, 1));
    }
    let mut h = vec![0.0; (n + 1) * d];
    let mut c = vec![0.0; (n + 1) * d];
    for t in 0..n {
        let (h_done, h_rest) = h.split_at_mut((t + 1) * d);
        let h_prev = &h_done[t * d..];
        for (gi, w) in gates(params).into_iter().enumerate() {
            let row = &mut act[gi][t * d..(t + 1) * d];
            for (r, pre) in row.iter_mut().enumerate() {
                let z = *pre + dot(&w.data[r * cols..r * cols + d], h_prev);
                *pre = if gi == 3 { z.tanh() } else { sigmoid(z) };
            }
        }
        for k in 0..d {
            let (i, f, o, g) = (act[0][t * d + k], act[1][t * d + k], act[2][t * d + k], act[3][t * d + k]);
            let ct = f * c[t * d + k] + i * g;
            c[(t + 1) * d + k] = ct;
            h_rest[k] = o * ct.tanh();
        }
    }
    let h_last = h[n * d..].to_vec();
    LstmTrace { tokens: tokens.to_vec(), x, h, c, act, h_last }
}

/// Backpropagates `dL/dh_last` through the whole sequence, accumulating into `grad`.
pub(crate) fn backward(params: &LstmParams, trace: &LstmTrace, dh_last: &[f64], grad: &mut LstmParams) {
    let (d, d_in) = (params.d, params.d_in);
    let cols = d + d_in;
    let n = trace.tokens.len();
    let [ai, af, ao, ag] = &trace.act;
    let mut dh = dh_last.to_vec();
    let mut dc_next = vec![0.0; d];
    // pre-activation gradients, n × d per gate
    let mut da: [Vec<f64>; 4] = std::array::from_fn(|_| vec![0.0; n * d]);
    for t in (0..n).rev() {
        for k in 0..d {
            let j = t * d + k;
            let ct = trace.c[(t + 1) * d + k];
            let tc = ct.tanh();
            let dc = dc_next[k] + dh[k] * ao[j] * (1.0 - tc * tc);
            dc_next[k] = dc * af[j];
            da[0][j] = dc * ag[j] * ai[j] * (1.0 - ai[j]);
            da[1][j] = dc * trace.c[t * d + k] * af[j] * (1.0 - af[j]);
            da[2][j] = dh[k] * tc * ao[j] * (1.0 - ao[j]);
            da[3][j] = dc * ai[j] * (1.0 - ag[j] * ag[j]);
        }
        dh.fill(0.0);
        for (w, dag) in gates(params).into_iter().zip(&da) {
            for (r, &g) in dag[t * d..(t + 1) * d].iter().enumerate() {
                if g != 0.0 {
                    for (o, wv) in dh.iter_mut().zip(&w.data[r * cols..r * cols + d]) {
                        *o += g * wv;
                    }
                }
            }
        }
    }
    let mut dx = vec![0.0; n * d_in];
    let grads = [&mut grad.w_i, &mut grad.w_f, &mut grad.w_o, &mut grad.w_c];
    let bgrads = [&mut grad.b_i, &mut grad.b_f, &mut grad.b_o, &mut grad.b_c];
    for (((w, gw), gb), dag) in gates(params).into_iter().zip(grads).zip(bgrads).zip(&da) {
        gemm_acc(d, n, d, dag, (1, d), &trace.h, (d, 1), &mut gw.data, (cols, 1));
        gemm_acc(d, n, d_in, dag, (1, d), &trace.x, (d_in, 1), &mut gw.data[d..], (cols, 1));
        for row in dag.chunks_exact(d) {
            for (g, a) in gb.data.iter_mut().zip(row) {
                *g += a;
            }
        }
        gemm_acc(n, d, d_in, dag, (d, 1), &w.data[d..], (cols, 1), &mut dx, (d_in, 1));
    }
    for (&tok, dxr) in trace.tokens.iter().zip(dx.chunks_exact(d_in)) {
        for (g, v) in grad.embedding.row_mut(usize::from(tok)).iter_mut().zip(dxr) {
            *g += v;
        }
    }
}
