//! From-scratch neural components: an LSTM feature extractor, a transformer
//! encoder exposing per-layer pooled states, Adam/AdamW, training loops,
//! finite-difference gradient checks and the checkpoint container.
//!
//! Everything computes in `f64`. Parameters are rounded to `f32`-representable
//! values at initialization and after training so that the `f32` checkpoint
//! payload reproduces them bit for bit.

pub mod checkpoint;
pub mod encoder;
pub mod gradcheck;
pub mod lstm;
pub mod optim;
pub mod train;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use checkpoint::{Checkpoint, Component};
pub use encoder::{encoder_forward, EncoderConfig, EncoderOutput, EncoderParams};
pub use lstm::{extract_feature, lstm_step, LstmParams, LstmState};
pub use train::{train_classifier, train_feature_extractor, TrainConfig, TrainReport};

#[derive(Debug, Error)]
pub enum NnError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("training split is empty")]
    EmptyTrainingSet,
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("corrupt checkpoint payload: {0}")]
    CorruptPayload(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A named dense parameter block, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(name: impl Into<String>, shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self { name: name.into(), shape: shape.to_vec(), data: vec![0.0; n] }
    }

    pub fn filled(name: impl Into<String>, shape: &[usize], value: f64) -> Self {
        let mut t = Self::zeros(name, shape);
        t.data.fill(value);
        t
    }

    /// Uniform in `[-bound, bound]`, rounded to `f32` precision.
    pub fn uniform(name: impl Into<String>, shape: &[usize], bound: f64, rng: &mut impl Rng) -> Self {
        let mut t = Self::zeros(name, shape);
        for x in &mut t.data {
            *x = f64::from(rng.gen_range(-bound..=bound) as f32);
        }
        t
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape.get(1).copied().unwrap_or(1)
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[r * c..(r + 1) * c]
    }
}

/// A model whose trainable state is an ordered list of tensors.
pub trait ParamSet {
    fn tensors(&self) -> Vec<&Tensor>;
    fn tensors_mut(&mut self) -> Vec<&mut Tensor>;

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn zero_grad(&mut self) {
        for t in self.tensors_mut() {
            t.data.fill(0.0);
        }
    }

    fn snap_f32(&mut self) {
        for t in self.tensors_mut() {
            for x in &mut t.data {
                *x = f64::from(*x as f32);
            }
        }
    }

    fn scale(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            for x in &mut t.data {
                *x *= factor;
            }
        }
    }

    /// Flat view: tensors concatenated in `tensors()` order.
    fn flat(&self) -> Vec<f64> {
        self.tensors().iter().flat_map(|t| t.data.iter().copied()).collect()
    }

    fn get_flat(&self, mut index: usize) -> f64 {
        for t in self.tensors() {
            if index < t.len() {
                return t.data[index];
            }
            index -= t.len();
        }
        panic!("parameter index out of range");
    }

    fn set_flat(&mut self, mut index: usize, value: f64) {
        for t in self.tensors_mut() {
            if index < t.len() {
                t.data[index] = value;
                return;
            }
            index -= t.len();
        }
        panic!("parameter index out of range");
    }

    /// Copies tensor data by name; every tensor must be present with a matching shape.
    fn load_tensors(&mut self, source: &[Tensor]) -> Result<(), NnError> {
        for t in self.tensors_mut() {
            let src = source
                .iter()
                .find(|s| s.name == t.name)
                .ok_or_else(|| NnError::CorruptPayload(format!("missing tensor {}", t.name)))?;
            if src.shape != t.shape {
                return Err(NnError::DimensionMismatch(format!(
                    "tensor {} has shape {:?}, expected {:?}",
                    t.name, src.shape, t.shape
                )));
            }
            t.data.copy_from_slice(&src.data);
        }
        Ok(())
    }
}

/// Dense affine head `y = W x + b` with `W: out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearHead {
    pub w: Tensor,
    pub b: Tensor,
}

impl LinearHead {
    pub fn new(prefix: &str, out: usize, input: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        Self {
            w: Tensor::uniform(format!("{prefix}.w"), &[out, input], bound, rng),
            b: Tensor::uniform(format!("{prefix}.b"), &[out], bound, rng),
        }
    }

    pub fn zeros(prefix: &str, out: usize, input: usize) -> Self {
        Self { w: Tensor::zeros(format!("{prefix}.w"), &[out, input]), b: Tensor::zeros(format!("{prefix}.b"), &[out]) }
    }

    pub fn out_dim(&self) -> usize {
        self.w.rows()
    }

    pub fn in_dim(&self) -> usize {
        self.w.cols()
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut out = self.b.data.clone();
        math::matvec_acc(&self.w.data, x, &mut out);
        out
    }

    /// Accumulates parameter gradients and returns `dL/dx`.
    pub fn backward(&self, x: &[f64], dy: &[f64], grad: &mut LinearHead) -> Vec<f64> {
        math::outer_acc(&mut grad.w.data, dy, x);
        for (g, d) in grad.b.data.iter_mut().zip(dy) {
            *g += d;
        }
        let mut dx = vec![0.0; x.len()];
        math::matvec_t_acc(&self.w.data, dy, &mut dx);
        dx
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        vec![&self.w, &self.b]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.w, &mut self.b]
    }
}

impl ParamSet for LinearHead {
    fn tensors(&self) -> Vec<&Tensor> {
        LinearHead::tensors(self)
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        LinearHead::tensors_mut(self)
    }
}

pub mod math {
    //! Small dense kernels over row-major slices.

    #[inline]
    pub fn sigmoid(x: f64) -> f64 {
        if x >= 0.0 {
            1.0 / (1.0 + (-x).exp())
        } else {
            let e = x.exp();
            e / (1.0 + e)
        }
    }

    pub fn softmax(logits: &[f64]) -> Vec<f64> {
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        exps.into_iter().map(|e| e / sum).collect()
    }

    pub fn l2_norm(v: &[f64]) -> f64 {
        v.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    /// `out += W x` for `W: out.len() × x.len()`.
    pub fn matvec_acc(w: &[f64], x: &[f64], out: &mut [f64]) {
        let cols = x.len();
        for (o, row) in out.iter_mut().zip(w.chunks_exact(cols)) {
            *o += dot(row, x);
        }
    }

    /// `out += Wᵀ y` for `W: y.len() × out.len()`.
    pub fn matvec_t_acc(w: &[f64], y: &[f64], out: &mut [f64]) {
        let cols = out.len();
        for (&yo, row) in y.iter().zip(w.chunks_exact(cols)) {
            if yo != 0.0 {
                for (o, &wv) in out.iter_mut().zip(row) {
                    *o += yo * wv;
                }
            }
        }
    }

    /// `g += a bᵀ` for `g: a.len() × b.len()`.
    pub fn outer_acc(g: &mut [f64], a: &[f64], b: &[f64]) {
        let cols = b.len();
        for (&av, row) in a.iter().zip(g.chunks_exact_mut(cols)) {
            if av != 0.0 {
                for (gv, &bv) in row.iter_mut().zip(b) {
                    *gv += av * bv;
                }
            }
        }
    }

    /// Strides `(row, col)` of a matrix stored in a slice.
    pub type Strides = (usize, usize);

    fn max_index(rows: usize, cols: usize, (rs, cs): Strides) -> usize {
        (rows - 1) * rs + (cols - 1) * cs
    }

    /// `C += A B` with `A: m × k`, `B: k × n`, `C: m × n`, each read through
    /// its own strides so transposed and column-sliced operands need no copy.
    pub fn gemm_acc(
        m: usize,
        k: usize,
        n: usize,
        a: &[f64],
        sa: Strides,
        b: &[f64],
        sb: Strides,
        c: &mut [f64],
        sc: Strides,
    ) {
        if m == 0 || n == 0 || k == 0 {
            return;
        }
        assert!(max_index(m, k, sa) < a.len(), "A operand out of bounds");
        assert!(max_index(k, n, sb) < b.len(), "B operand out of bounds");
        assert!(max_index(m, n, sc) < c.len(), "C operand out of bounds");
        // SAFETY: every index touched by the kernel is bounded by the asserts
        // above, and `c` is uniquely borrowed so it cannot alias `a` or `b`.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                sa.0 as isize,
                sa.1 as isize,
                b.as_ptr(),
                sb.0 as isize,
                sb.1 as isize,
                1.0,
                c.as_mut_ptr(),
                sc.0 as isize,
                sc.1 as isize,
            );
        }
    }

    /// Row-wise affine map: `y[t] = W x[t] + b` for `n` rows.
    pub fn linear_rows(x: &[f64], n: usize, w: &[f64], b: &[f64], y: &mut [f64]) {
        let input = x.len() / n;
        let out = b.len();
        for yr in y.chunks_exact_mut(out) {
            yr.copy_from_slice(b);
        }
        gemm_acc(n, input, out, x, (input, 1), w, (1, input), y, (out, 1));
    }

    /// Backward of [`linear_rows`]: accumulates `dW`, `db` and `dx`.
    pub fn linear_rows_backward(
        x: &[f64],
        n: usize,
        w: &[f64],
        dy: &[f64],
        dw: &mut [f64],
        db: &mut [f64],
        dx: &mut [f64],
    ) {
        let input = x.len() / n;
        let out = db.len();
        for dyr in dy.chunks_exact(out) {
            for (g, d) in db.iter_mut().zip(dyr) {
                *g += d;
            }
        }
        gemm_acc(out, n, input, dy, (1, out), x, (input, 1), dw, (input, 1));
        gemm_acc(n, out, input, dy, (out, 1), w, (input, 1), dx, (input, 1));
    }
}
