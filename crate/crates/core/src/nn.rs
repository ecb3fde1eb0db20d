//! Dense layers and multi-layer perceptrons with hand-written reverse mode.
//!
//! Everything here is `f64`. A [`Mlp`] applies its activation between
//! layers and leaves the final layer linear.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Gelu,
    Relu,
    Tanh,
    Identity,
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

impl Activation {
    /// GELU uses the tanh approximation so the derivative stays closed-form.
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => {
                let inner = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
                0.5 * x * (1.0 + inner.tanh())
            }
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => {
                let inner = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
                let t = inner.tanh();
                let dinner = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x);
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
            }
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::Identity => 1.0,
        }
    }

    pub fn code(self) -> u32 {
        match self {
            Activation::Gelu => 0,
            Activation::Relu => 1,
            Activation::Tanh => 2,
            Activation::Identity => 3,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(Activation::Gelu),
            1 => Some(Activation::Relu),
            2 => Some(Activation::Tanh),
            3 => Some(Activation::Identity),
            _ => None,
        }
    }
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            assert_eq!(row.len(), cols, "ragged matrix rows");
            data.extend_from_slice(row);
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// `out += W[:, offset..offset+x.len()] · x`
    pub fn matvec_block_acc(&self, offset: usize, x: &[f64], out: &mut [f64]) {
        debug_assert!(offset + x.len() <= self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for (r, o) in out.iter_mut().enumerate() {
            let row = &self.data[r * self.cols + offset..r * self.cols + offset + x.len()];
            *o += dot(row, x);
        }
    }

    /// `out += W[:, offset..offset+out.len()]ᵀ · g`
    pub fn matvec_t_block_acc(&self, offset: usize, g: &[f64], out: &mut [f64]) {
        debug_assert_eq!(g.len(), self.rows);
        debug_assert!(offset + out.len() <= self.cols);
        for (r, &gr) in g.iter().enumerate() {
            if gr == 0.0 {
                continue;
            }
            let row = &self.data[r * self.cols + offset..r * self.cols + offset + out.len()];
            for (o, &w) in out.iter_mut().zip(row) {
                *o += gr * w;
            }
        }
    }

    /// `W[:, offset..offset+x.len()] += g ⊗ x`
    pub fn outer_block_acc(&mut self, offset: usize, g: &[f64], x: &[f64]) {
        debug_assert_eq!(g.len(), self.rows);
        debug_assert!(offset + x.len() <= self.cols);
        let cols = self.cols;
        for (r, &gr) in g.iter().enumerate() {
            if gr == 0.0 {
                continue;
            }
            let row = &mut self.data[r * cols + offset..r * cols + offset + x.len()];
            for (w, &xv) in row.iter_mut().zip(x) {
                *w += gr * xv;
            }
        }
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn add_assign(acc: &mut [f64], x: &[f64]) {
    for (a, v) in acc.iter_mut().zip(x) {
        *a += v;
    }
}

#[inline]
pub fn axpy(acc: &mut [f64], alpha: f64, x: &[f64]) {
    for (a, v) in acc.iter_mut().zip(x) {
        *a += alpha * v;
    }
}

/// Fully connected layer `y = W x + b`, with `W` of shape `out × in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Matrix::zeros(output, input),
            bias: vec![0.0; output],
        }
    }

    /// Glorot-uniform weights, zero bias.
    pub fn glorot(input: usize, output: usize, rng: &mut ChaCha8Rng) -> Self {
        let limit = (6.0 / (input + output) as f64).sqrt();
        let mut layer = Self::zeros(input, output);
        for w in &mut layer.weight.data {
            *w = rng.random_range(-limit..=limit);
        }
        layer
    }

    pub fn input_dim(&self) -> usize {
        self.weight.cols
    }

    pub fn output_dim(&self) -> usize {
        self.weight.rows
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut out = self.bias.clone();
        self.weight.matvec_block_acc(0, x, &mut out);
        out
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    pub fn backward(&self, x: &[f64], dy: &[f64], grad: &mut Linear) -> Vec<f64> {
        grad.weight.outer_block_acc(0, dy, x);
        add_assign(&mut grad.bias, dy);
        let mut dx = vec![0.0; self.input_dim()];
        self.weight.matvec_t_block_acc(0, dy, &mut dx);
        dx
    }

    pub fn param_count(&self) -> usize {
        self.weight.data.len() + self.bias.len()
    }
}

/// Stack of linear layers with an activation between consecutive layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activation: Activation,
}

/// Intermediate values of one MLP evaluation, needed for backprop.
#[derive(Debug, Clone, Default)]
pub struct MlpTrace {
    /// Input to each evaluated layer.
    pub inputs: Vec<Vec<f64>>,
    /// Pre-activation output of each evaluated layer.
    pub preacts: Vec<Vec<f64>>,
}

impl MlpTrace {
    pub fn output(&self) -> &[f64] {
        self.preacts.last().expect("empty trace")
    }
}

impl Mlp {
    /// `widths = [in, hidden..., out]`; needs at least two entries.
    pub fn new(widths: &[usize], activation: Activation, rng: &mut ChaCha8Rng) -> Self {
        assert!(widths.len() >= 2, "an MLP needs input and output widths");
        let layers = widths
            .windows(2)
            .map(|w| Linear::glorot(w[0], w[1], rng))
            .collect();
        Self { layers, activation }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| Linear::zeros(l.input_dim(), l.output_dim()))
                .collect(),
            activation: self.activation,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("empty MLP").output_dim()
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_dim()];
        w.extend(self.layers.iter().map(Linear::output_dim));
        w
    }

    /// True if layer `idx` is followed by the activation.
    #[inline]
    fn activated(&self, idx: usize) -> bool {
        idx + 1 < self.layers.len()
    }

    /// Applies the activation that follows layer `idx` (identity after the last).
    pub fn post(&self, idx: usize, preact: &[f64]) -> Vec<f64> {
        if self.activated(idx) {
            preact.iter().map(|&v| self.activation.apply(v)).collect()
        } else {
            preact.to_vec()
        }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        self.forward_range(0, self.layers.len(), x)
            .preacts
            .pop()
            .unwrap_or_else(|| x.to_vec())
    }

    /// Runs layers `from..to`, where `x` is the input to layer `from`.
    pub fn forward_range(&self, from: usize, to: usize, x: &[f64]) -> MlpTrace {
        let mut trace = MlpTrace::default();
        let mut cur = x.to_vec();
        for idx in from..to {
            let pre = self.layers[idx].forward(&cur);
            let next = if idx + 1 < to {
                self.post(idx, &pre)
            } else {
                Vec::new()
            };
            trace.inputs.push(cur);
            trace.preacts.push(pre);
            cur = next;
        }
        trace
    }

    pub fn forward_traced(&self, x: &[f64]) -> MlpTrace {
        self.forward_range(0, self.layers.len(), x)
    }

    /// Backprop through layers `from..to` recorded in `trace`.
    ///
    /// `dy` is the gradient w.r.t. the pre-activation output of layer `to-1`.
    /// Returns the gradient w.r.t. the input of layer `from`.
    pub fn backward_range(
        &self,
        from: usize,
        trace: &MlpTrace,
        dy: &[f64],
        grad: &mut Mlp,
    ) -> Vec<f64> {
        let n = trace.preacts.len();
        let mut d = dy.to_vec();
        for k in (0..n).rev() {
            let idx = from + k;
            let dx = self.layers[idx].backward(&trace.inputs[k], &d, &mut grad.layers[idx]);
            if k == 0 {
                return dx;
            }
            // through the activation following layer idx-1
            let prev_pre = &trace.preacts[k - 1];
            d = dx
                .iter()
                .zip(prev_pre)
                .map(|(g, &p)| g * self.activation.derivative(p))
                .collect();
        }
        d
    }

    pub fn backward(&self, trace: &MlpTrace, dy: &[f64], grad: &mut Mlp) -> Vec<f64> {
        self.backward_range(0, trace, dy, grad)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Linear::param_count).sum()
    }

    pub fn visit(&self, f: &mut dyn FnMut(&Matrix, &[f64])) {
        for l in &self.layers {
            f(&l.weight, &l.bias);
        }
    }

    pub fn zero_all(&mut self) {
        for l in &mut self.layers {
            l.weight.data.fill(0.0);
            l.bias.fill(0.0);
        }
    }
}

/// Ordered, mutable view over every parameter slice of a model.
///
/// Implementors list tensors in a fixed declared order; the optimizer,
/// the checkpoint writer and gradient checks all rely on that order.
pub trait Parameters {
    fn tensors(&self) -> Vec<&[f64]>;
    fn tensors_mut(&mut self) -> Vec<&mut [f64]>;

    fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }
}

pub(crate) fn linear_tensors(l: &Linear) -> [&[f64]; 2] {
    [&l.weight.data, &l.bias]
}

pub(crate) fn linear_tensors_mut(l: &mut Linear) -> [&mut [f64]; 2] {
    [&mut l.weight.data, &mut l.bias]
}

impl Parameters for Mlp {
    fn tensors(&self) -> Vec<&[f64]> {
        self.layers.iter().flat_map(linear_tensors).collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers.iter_mut().flat_map(linear_tensors_mut).collect()
    }
}

/// Adds `other` into `acc`, tensor by tensor.
pub fn accumulate<P: Parameters>(acc: &mut P, other: &P) {
    let src = other.tensors();
    for (dst, s) in acc.tensors_mut().into_iter().zip(src) {
        add_assign(dst, s);
    }
}

pub fn scale<P: Parameters>(p: &mut P, factor: f64) {
    for t in p.tensors_mut() {
        for v in t.iter_mut() {
            *v *= factor;
        }
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}
