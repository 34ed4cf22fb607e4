//! Dense network substrate: matrices, affine layers, MLPs, and the stable
//! softmax / cross-entropy pair. All gradients are hand-derived.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngState;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
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

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "matrix {rows}x{cols} needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite matrix entry {bad}")));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("ragged rows"));
        }
        Self::from_vec(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Keeps the rows at `indices`, in that order.
    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    /// `self · x`.
    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(Error::shape(format!(
                "matvec: matrix has {} cols, vector has {}",
                self.cols,
                x.len()
            )));
        }
        Ok(self
            .data
            .chunks_exact(self.cols.max(1))
            .take(self.rows)
            .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
            .collect())
    }

    /// `selfᵀ · y`.
    pub fn matvec_transposed(&self, y: &[f64]) -> Result<Vec<f64>> {
        if y.len() != self.rows {
            return Err(Error::shape(format!(
                "transposed matvec: matrix has {} rows, vector has {}",
                self.rows,
                y.len()
            )));
        }
        let mut out = vec![0.0; self.cols];
        for (r, &yr) in y.iter().enumerate() {
            if yr == 0.0 {
                continue;
            }
            for (o, &w) in out.iter_mut().zip(self.row(r)) {
                *o += w * yr;
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Relu,
    Sigmoid,
    Tanh,
}

const ONE_BELOW: f64 = 1.0 - f64::EPSILON / 2.0;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            // Kept strictly inside (0, 1) even where f64 would round to 0 or 1.
            Activation::Sigmoid => sigmoid(x).clamp(f64::MIN_POSITIVE, ONE_BELOW),
            Activation::Tanh => x.tanh(),
        }
    }

    /// d(out)/d(pre), given both.
    #[inline]
    pub fn derivative(self, pre: f64, out: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => out * (1.0 - out),
            Activation::Tanh => 1.0 - out * out,
        }
    }
}

/// Flat parameter access in a fixed canonical order.
pub trait FlatParams {
    fn num_params(&self) -> usize;

    fn to_flat(&self) -> Vec<f64>;

    /// Overwrites all parameters from `flat`, which must have exactly
    /// `num_params()` entries.
    fn set_flat(&mut self, flat: &[f64]) -> Result<()>;
}

/// `activation(W·x + b)`; parameters flatten as W row-major, then b.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub weights: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub grad_weights: Matrix,
    pub grad_bias: Vec<f64>,
    pub grad_input: Vec<f64>,
}

impl DenseLayer {
    pub fn new(weights: Matrix, bias: Vec<f64>, activation: Activation) -> Result<Self> {
        if bias.len() != weights.rows() {
            return Err(Error::shape(format!(
                "bias length {} does not match {} output rows",
                bias.len(),
                weights.rows()
            )));
        }
        Ok(Self {
            weights,
            bias,
            activation,
        })
    }

    pub fn zeros(input: usize, output: usize, activation: Activation) -> Self {
        Self {
            weights: Matrix::zeros(output, input),
            bias: vec![0.0; output],
            activation,
        }
    }

    /// Glorot-uniform weights, zero bias.
    pub fn glorot(input: usize, output: usize, activation: Activation, rng: &mut RngState) -> Self {
        let limit = (6.0 / (input + output) as f64).sqrt();
        let data = (0..input * output)
            .map(|_| rng.uniform_range(-limit, limit))
            .collect();
        Self {
            weights: Matrix {
                rows: output,
                cols: input,
                data,
            },
            bias: vec![0.0; output],
            activation,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.rows()
    }

    /// Pre-activation `W·x + b`.
    pub fn pre_activation(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut pre = self.weights.matvec(x)?;
        for (p, b) in pre.iter_mut().zip(&self.bias) {
            *p += b;
        }
        Ok(pre)
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut out = self.pre_activation(x)?;
        for v in &mut out {
            *v = self.activation.apply(*v);
        }
        Ok(out)
    }

    /// Gradients of `upstream · forward(x)` with respect to W, b and x.
    pub fn backward(&self, x: &[f64], upstream: &[f64]) -> Result<LayerGrad> {
        let pre = self.pre_activation(x)?;
        let out: Vec<f64> = pre.iter().map(|&p| self.activation.apply(p)).collect();
        self.backward_cached(x, &pre, &out, upstream)
    }

    pub(crate) fn backward_cached(
        &self,
        x: &[f64],
        pre: &[f64],
        out: &[f64],
        upstream: &[f64],
    ) -> Result<LayerGrad> {
        if upstream.len() != self.output_dim() {
            return Err(Error::shape(format!(
                "upstream length {} does not match layer output {}",
                upstream.len(),
                self.output_dim()
            )));
        }
        if x.len() != self.input_dim() {
            return Err(Error::shape(format!(
                "input length {} does not match layer input {}",
                x.len(),
                self.input_dim()
            )));
        }
        let delta: Vec<f64> = upstream
            .iter()
            .zip(pre.iter().zip(out))
            .map(|(u, (&p, &o))| u * self.activation.derivative(p, o))
            .collect();
        let mut grad_weights = Matrix::zeros(self.output_dim(), self.input_dim());
        for (r, &d) in delta.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            let row = &mut grad_weights.data[r * x.len()..(r + 1) * x.len()];
            for (g, &xi) in row.iter_mut().zip(x) {
                *g = d * xi;
            }
        }
        let grad_input = self.weights.matvec_transposed(&delta)?;
        Ok(LayerGrad {
            grad_weights,
            grad_bias: delta,
            grad_input,
        })
    }
}

impl FlatParams for DenseLayer {
    fn num_params(&self) -> usize {
        self.weights.data.len() + self.bias.len()
    }

    fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.num_params());
        v.extend_from_slice(&self.weights.data);
        v.extend_from_slice(&self.bias);
        v
    }

    fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::shape(format!(
                "layer expects {} parameters, got {}",
                self.num_params(),
                flat.len()
            )));
        }
        let (w, b) = flat.split_at(self.weights.data.len());
        self.weights.data.copy_from_slice(w);
        self.bias.copy_from_slice(b);
        Ok(())
    }
}

/// Convenience wrapper over [`DenseLayer::forward`].
pub fn affine_forward(layer: &DenseLayer, x: &[f64]) -> Result<Vec<f64>> {
    layer.forward(x)
}

/// Convenience wrapper over [`DenseLayer::backward`].
pub fn affine_backward(layer: &DenseLayer, x: &[f64], upstream: &[f64]) -> Result<LayerGrad> {
    layer.backward(x, upstream)
}

/// Stack of dense layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<DenseLayer>,
}

/// Per-layer inputs and pre-activations kept from a forward pass.
#[derive(Debug, Clone)]
pub struct MlpTrace {
    inputs: Vec<Vec<f64>>,
    pres: Vec<Vec<f64>>,
    output: Vec<f64>,
}

impl MlpTrace {
    pub fn output(&self) -> &[f64] {
        &self.output
    }
}

impl Mlp {
    pub fn new(layers: Vec<DenseLayer>) -> Result<Self> {
        for pair in layers.windows(2) {
            if pair[0].output_dim() != pair[1].input_dim() {
                return Err(Error::shape(format!(
                    "layer output {} does not chain into input {}",
                    pair[0].output_dim(),
                    pair[1].input_dim()
                )));
            }
        }
        Ok(Self { layers })
    }

    /// Glorot-initialized MLP over `dims` (input, hidden..., output).
    pub fn glorot(
        dims: &[usize],
        hidden: Activation,
        output: Activation,
        rng: &mut RngState,
    ) -> Self {
        let last = dims.len().saturating_sub(2);
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let act = if i == last { output } else { hidden };
                DenseLayer::glorot(w[0], w[1], act, rng)
            })
            .collect();
        Self { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, DenseLayer::input_dim)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, DenseLayer::output_dim)
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.input_dim()];
        d.extend(self.layers.iter().map(DenseLayer::output_dim));
        d
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut h = x.to_vec();
        for layer in &self.layers {
            h = layer.forward(&h)?;
        }
        Ok(h)
    }

    pub fn trace(&self, x: &[f64]) -> Result<MlpTrace> {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pres = Vec::with_capacity(self.layers.len());
        let mut h = x.to_vec();
        for layer in &self.layers {
            let pre = layer.pre_activation(&h)?;
            let out = pre.iter().map(|&p| layer.activation.apply(p)).collect();
            inputs.push(std::mem::replace(&mut h, out));
            pres.push(pre);
        }
        Ok(MlpTrace {
            inputs,
            pres,
            output: h,
        })
    }

    /// Flat parameter gradient and input gradient of `upstream · output`.
    pub fn backward(&self, trace: &MlpTrace, upstream: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut grad = vec![0.0; self.num_params()];
        let grad_input = self.backward_into(trace, upstream, 1.0, &mut grad)?;
        Ok((grad, grad_input))
    }

    /// Adds `scale ·` the parameter gradient into `grad`; returns the input gradient.
    pub fn backward_into(
        &self,
        trace: &MlpTrace,
        upstream: &[f64],
        scale: f64,
        grad: &mut [f64],
    ) -> Result<Vec<f64>> {
        if grad.len() != self.num_params() {
            return Err(Error::shape("gradient buffer length mismatch"));
        }
        let mut offsets = Vec::with_capacity(self.layers.len());
        let mut off = 0;
        for layer in &self.layers {
            offsets.push(off);
            off += layer.num_params();
        }
        let mut up = upstream.to_vec();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let out: &[f64] = if i + 1 < self.layers.len() {
                &trace.inputs[i + 1]
            } else {
                &trace.output
            };
            let g = layer.backward_cached(&trace.inputs[i], &trace.pres[i], out, &up)?;
            let dst = &mut grad[offsets[i]..offsets[i] + layer.num_params()];
            let (dw, db) = dst.split_at_mut(g.grad_weights.data.len());
            for (d, s) in dw.iter_mut().zip(&g.grad_weights.data) {
                *d += scale * s;
            }
            for (d, s) in db.iter_mut().zip(&g.grad_bias) {
                *d += scale * s;
            }
            up = g.grad_input;
        }
        Ok(up)
    }
}

impl FlatParams for Mlp {
    fn num_params(&self) -> usize {
        self.layers.iter().map(FlatParams::num_params).sum()
    }

    fn to_flat(&self) -> Vec<f64> {
        self.layers.iter().flat_map(|l| l.to_flat()).collect()
    }

    fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::shape(format!(
                "mlp expects {} parameters, got {}",
                self.num_params(),
                flat.len()
            )));
        }
        let mut rest = flat;
        for layer in &mut self.layers {
            let (head, tail) = rest.split_at(layer.num_params());
            layer.set_flat(head)?;
            rest = tail;
        }
        Ok(())
    }
}

pub fn log_sum_exp(z: &[f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Max-subtracted softmax.
pub fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// `−log softmax(z)[y]`.
pub fn cross_entropy_with_logits(z: &[f64], y: usize) -> Result<f64> {
    if y >= z.len() {
        return Err(Error::Index(format!("label {y} with {} logits", z.len())));
    }
    Ok(log_sum_exp(z) - z[y])
}

/// Gradient of [`cross_entropy_with_logits`] with respect to `z`:
/// `softmax(z) − onehot(y)`.
pub fn cross_entropy_grad(z: &[f64], y: usize) -> Result<Vec<f64>> {
    if y >= z.len() {
        return Err(Error::Index(format!("label {y} with {} logits", z.len())));
    }
    let mut p = softmax(z);
    p[y] -= 1.0;
    Ok(p)
}

/// `dim` standard normal draws from `rng`.
pub fn sample_standard_normal(rng: &mut RngState, dim: usize) -> Vec<f64> {
    rng.standard_normal(dim)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm_sq(a: &[f64]) -> f64 {
    dot(a, a)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layer(w: Vec<f64>, rows: usize, cols: usize, b: Vec<f64>, act: Activation) -> DenseLayer {
        DenseLayer::new(Matrix::from_vec(rows, cols, w).unwrap(), b, act).unwrap()
    }

    #[test]
    fn affine_forward_cases() {
        let eye = |act| layer(vec![1.0, 0.0, 0.0, 1.0], 2, 2, vec![0.0, 0.0], act);
        assert_eq!(
            affine_forward(&eye(Activation::Identity), &[3.0, -1.0]).unwrap(),
            vec![3.0, -1.0]
        );
        assert_eq!(
            affine_forward(&eye(Activation::Relu), &[3.0, -1.0]).unwrap(),
            vec![3.0, 0.0]
        );
        let s = layer(vec![0.0], 1, 1, vec![0.0], Activation::Sigmoid);
        assert_eq!(affine_forward(&s, &[5.0]).unwrap(), vec![0.5]);
    }

    #[test]
    fn affine_shape_errors() {
        let l = DenseLayer::zeros(3, 2, Activation::Identity);
        assert!(matches!(l.forward(&[1.0]), Err(Error::Shape(_))));
        assert!(matches!(
            l.backward(&[1.0, 2.0, 3.0], &[1.0]),
            Err(Error::Shape(_))
        ));
        assert!(DenseLayer::new(Matrix::zeros(2, 2), vec![0.0], Activation::Relu).is_err());
    }

    #[test]
    fn affine_backward_hand_cases() {
        let l = layer(
            vec![0.7, -0.2, 0.4, 1.1],
            2,
            2,
            vec![0.1, 0.3],
            Activation::Identity,
        );
        let g = affine_backward(&l, &[1.0, 2.0], &[0.0, 0.0]).unwrap();
        assert!(g.grad_weights.data().iter().all(|&v| v == 0.0));
        assert!(g.grad_bias.iter().chain(&g.grad_input).all(|&v| v == 0.0));

        let w = 1.7;
        let l = layer(vec![w], 1, 1, vec![0.4], Activation::Identity);
        let g = affine_backward(&l, &[2.0], &[3.0]).unwrap();
        assert_eq!(g.grad_weights.data(), &[6.0]);
        assert_eq!(g.grad_bias, vec![3.0]);
        assert_eq!(g.grad_input, vec![3.0 * w]);
    }

    #[test]
    fn softmax_cases() {
        assert_eq!(softmax(&[0.0; 4]), vec![0.25; 4]);
        let p = softmax(&[1000.0, 0.0]);
        assert!((p[0] - 1.0).abs() < 1e-12 && p[1] < 1e-300);
        let p = softmax(&[1.0f64.ln(), 3.0f64.ln()]);
        assert!((p[0] - 0.25).abs() < 1e-15 && (p[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_cases() {
        assert!(
            (cross_entropy_with_logits(&[0.0, 0.0], 0).unwrap() - std::f64::consts::LN_2).abs()
                < 1e-15
        );
        assert!(cross_entropy_with_logits(&[1000.0, 0.0], 0).unwrap().abs() < 1e-12);
        assert!((cross_entropy_with_logits(&[0.0, 1000.0], 0).unwrap() - 1000.0).abs() < 1e-9);
        assert!(matches!(
            cross_entropy_with_logits(&[0.0, 0.0], 2),
            Err(Error::Index(_))
        ));
    }

    #[test]
    fn mlp_rejects_unchained_layers() {
        let a = DenseLayer::zeros(2, 3, Activation::Relu);
        let b = DenseLayer::zeros(4, 1, Activation::Identity);
        assert!(Mlp::new(vec![a, b]).is_err());
    }

    #[test]
    fn flat_round_trip() {
        let mut rng = RngState::new(1);
        let mut mlp = Mlp::glorot(&[3, 5, 2], Activation::Tanh, Activation::Identity, &mut rng);
        let flat = mlp.to_flat();
        assert_eq!(flat.len(), 3 * 5 + 5 + 5 * 2 + 2);
        let doubled: Vec<f64> = flat.iter().map(|v| v * 2.0).collect();
        mlp.set_flat(&doubled).unwrap();
        assert_eq!(mlp.to_flat(), doubled);
        assert!(mlp.set_flat(&doubled[1..]).is_err());
    }

    #[test]
    fn glorot_bounds() {
        let mut rng = RngState::new(9);
        let l = DenseLayer::glorot(10, 6, Activation::Relu, &mut rng);
        let limit = (6.0f64 / 16.0).sqrt();
        assert!(l.weights.data().iter().all(|w| w.abs() <= limit));
        assert!(l.bias.iter().all(|&b| b == 0.0));
    }
}
