//! Straight-line reference implementation of one meta iteration, generic over
//! the scalar type. Derivatives come from forward-mode dual numbers, one
//! coordinate at a time, so nothing here shares code with the library's
//! reverse-mode passes. Parameters are read from flat vectors using the
//! documented layout: per dense layer, weights row-major (output × input)
//! then bias.

#![allow(dead_code)]

use std::ops::{Add, Div, Mul, Neg, Sub};

use metaweight::classifier::Batch;
use metaweight::mwnet::Variant;

pub trait Scalar:
    Copy
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
{
    fn c(v: f64) -> Self;
    fn val(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn tanh(self) -> Self;
}

impl Scalar for f64 {
    fn c(v: f64) -> Self {
        v
    }
    fn val(self) -> f64 {
        self
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dual {
    pub v: f64,
    pub d: f64,
}

impl Add for Dual {
    type Output = Dual;
    fn add(self, o: Dual) -> Dual {
        Dual {
            v: self.v + o.v,
            d: self.d + o.d,
        }
    }
}

impl Sub for Dual {
    type Output = Dual;
    fn sub(self, o: Dual) -> Dual {
        Dual {
            v: self.v - o.v,
            d: self.d - o.d,
        }
    }
}

impl Mul for Dual {
    type Output = Dual;
    fn mul(self, o: Dual) -> Dual {
        Dual {
            v: self.v * o.v,
            d: self.d * o.v + self.v * o.d,
        }
    }
}

impl Div for Dual {
    type Output = Dual;
    fn div(self, o: Dual) -> Dual {
        Dual {
            v: self.v / o.v,
            d: (self.d * o.v - self.v * o.d) / (o.v * o.v),
        }
    }
}

impl Neg for Dual {
    type Output = Dual;
    fn neg(self) -> Dual {
        Dual {
            v: -self.v,
            d: -self.d,
        }
    }
}

impl Scalar for Dual {
    fn c(v: f64) -> Self {
        Dual { v, d: 0.0 }
    }
    fn val(self) -> f64 {
        self.v
    }
    fn exp(self) -> Self {
        let e = self.v.exp();
        Dual {
            v: e,
            d: self.d * e,
        }
    }
    fn ln(self) -> Self {
        Dual {
            v: self.v.ln(),
            d: self.d / self.v,
        }
    }
    fn tanh(self) -> Self {
        let t = self.v.tanh();
        Dual {
            v: t,
            d: self.d * (1.0 - t * t),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Act {
    Identity,
    Relu,
    Tanh,
    Sigmoid,
}

fn act<S: Scalar>(a: Act, x: S) -> S {
    match a {
        Act::Identity => x,
        Act::Relu => {
            if x.val() > 0.0 {
                x
            } else {
                S::c(0.0)
            }
        }
        Act::Tanh => x.tanh(),
        Act::Sigmoid => S::c(1.0) / (S::c(1.0) + (-x).exp()),
    }
}

/// One dense layer read from `p` starting at `*off`.
fn dense<S: Scalar>(p: &[S], off: &mut usize, input: &[S], out_dim: usize, a: Act) -> Vec<S> {
    let in_dim = input.len();
    let w = &p[*off..*off + in_dim * out_dim];
    let b = &p[*off + in_dim * out_dim..*off + in_dim * out_dim + out_dim];
    *off += in_dim * out_dim + out_dim;
    (0..out_dim)
        .map(|j| {
            let mut s = b[j];
            for k in 0..in_dim {
                s = s + w[j * in_dim + k] * input[k];
            }
            act(a, s)
        })
        .collect()
}

fn mlp<S: Scalar>(
    p: &[S],
    off: &mut usize,
    x: &[S],
    dims: &[usize],
    hidden: Act,
    out: Act,
) -> Vec<S> {
    let mut h = x.to_vec();
    for (i, &d) in dims[1..].iter().enumerate() {
        let a = if i + 2 == dims.len() { out } else { hidden };
        h = dense(p, off, &h, d, a);
    }
    h
}

pub fn cross_entropy<S: Scalar>(z: &[S], y: usize) -> S {
    let m = z.iter().map(|v| v.val()).fold(f64::NEG_INFINITY, f64::max);
    let mut s = S::c(0.0);
    for &v in z {
        s = s + (v - S::c(m)).exp();
    }
    S::c(m) + s.ln() - z[y]
}

#[derive(Debug, Clone)]
pub struct Problem {
    pub variant: Variant,
    pub classifier_dims: Vec<usize>,
    pub classifier_hidden: Act,
    pub k: usize,
    pub hidden: usize,
    pub psi: usize,
    pub x: Vec<Vec<f64>>,
    pub y: Vec<usize>,
    pub meta_x: Vec<Vec<f64>>,
    pub meta_y: Vec<usize>,
    pub eps: Option<Vec<Vec<f64>>>,
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
}

pub fn batch_rows(b: &Batch) -> (Vec<Vec<f64>>, Vec<usize>) {
    (
        (0..b.len()).map(|i| b.features.row(i).to_vec()).collect(),
        b.labels.clone(),
    )
}

impl Problem {
    pub fn logits<S: Scalar>(&self, theta: &[S], x: &[f64]) -> Vec<S> {
        let xs: Vec<S> = x.iter().map(|&v| S::c(v)).collect();
        let mut off = 0;
        mlp(
            theta,
            &mut off,
            &xs,
            &self.classifier_dims,
            self.classifier_hidden,
            Act::Identity,
        )
    }

    /// Raw weight and KL of one sample.
    pub fn weight<S: Scalar>(&self, phi: &[S], z: &[f64], y: usize, eps: Option<&[f64]>) -> (S, S) {
        let k = self.k;
        let zs: Vec<S> = z.iter().map(|&v| S::c(v)).collect();
        let mlp_dims = |input| vec![input, self.hidden, 1];
        match self.variant {
            Variant::Standard => (S::c(1.0), S::c(0.0)),
            Variant::LossNet => {
                let mut off = 0;
                let l = cross_entropy(&zs, y);
                (
                    mlp(phi, &mut off, &[l], &mlp_dims(1), Act::Relu, Act::Sigmoid)[0],
                    S::c(0.0),
                )
            }
            Variant::LogitNet => {
                let e = &phi[y * k..(y + 1) * k];
                let mut off = k * k;
                let input: Vec<S> = zs.iter().zip(e).map(|(&a, &b)| a * b).collect();
                (
                    mlp(phi, &mut off, &input, &mlp_dims(k), Act::Relu, Act::Sigmoid)[0],
                    S::c(0.0),
                )
            }
            Variant::MetaInfoNet => {
                let e: Vec<S> = phi[y * k..(y + 1) * k].to_vec();
                let mut off = k * k;
                let mu = dense(phi, &mut off, &zs, self.psi, Act::Identity);
                let logvar = dense(phi, &mut off, &zs, self.psi, Act::Identity);
                let mut kl = S::c(0.0);
                let mut concat = Vec::with_capacity(self.psi + k);
                for j in 0..self.psi {
                    let sigma = (S::c(0.5) * logvar[j]).exp();
                    let e_j = eps.map_or(0.0, |v| v[j]);
                    concat.push(mu[j] + sigma * S::c(e_j));
                    kl = kl + S::c(0.5) * (mu[j] * mu[j] + logvar[j].exp() - logvar[j] - S::c(1.0));
                }
                concat.extend(zs.iter().copied());
                let r = dense(phi, &mut off, &concat, k, Act::Identity);
                let input: Vec<S> = r.iter().zip(&e).map(|(&a, &b)| a * b).collect();
                (
                    mlp(phi, &mut off, &input, &mlp_dims(k), Act::Relu, Act::Sigmoid)[0],
                    kl,
                )
            }
        }
    }

    fn eps_row(&self, i: usize) -> Option<&[f64]> {
        self.eps.as_ref().map(|e| e[i].as_slice())
    }

    /// Per-sample loss gradients in Θ by forward mode.
    pub fn per_sample_grads(&self, theta: &[f64]) -> Vec<Vec<f64>> {
        let mut grads = vec![vec![0.0; theta.len()]; self.x.len()];
        for j in 0..theta.len() {
            let t = seeded(theta, j);
            for (row, (x, &y)) in grads.iter_mut().zip(self.x.iter().zip(&self.y)) {
                row[j] = cross_entropy(&self.logits(&t, x), y).d;
            }
        }
        grads
    }

    fn normalized<S: Scalar>(&self, phi: &[S], logits: &[Vec<f64>]) -> (Vec<S>, S) {
        let mut raw = Vec::with_capacity(logits.len());
        let mut kl = S::c(0.0);
        for (i, z) in logits.iter().enumerate() {
            let (w, k) = self.weight(phi, z, self.y[i], self.eps_row(i));
            raw.push(w);
            kl = kl + k;
        }
        let mut sum = S::c(0.0);
        for &w in &raw {
            sum = sum + w;
        }
        let denom = if sum.val() == 0.0 {
            sum + S::c(1.0)
        } else {
            sum
        };
        let n = logits.len() as f64;
        (raw.into_iter().map(|w| w / denom).collect(), kl / S::c(n))
    }

    /// Meta objective at Φ with Θ fixed: meta loss after the virtual step
    /// plus λ times the batch-mean KL.
    pub fn meta_objective<S: Scalar>(&self, theta: &[f64], grads: &[Vec<f64>], phi: &[S]) -> S {
        let logits: Vec<Vec<f64>> = self
            .x
            .iter()
            .map(|x| self.logits::<f64>(theta, x))
            .collect();
        let (w, kl) = self.normalized(phi, &logits);
        let n = self.x.len() as f64;
        let theta_hat: Vec<S> = (0..theta.len())
            .map(|j| {
                let mut step = S::c(0.0);
                for (wi, g) in w.iter().zip(grads) {
                    step = step + *wi * S::c(g[j]);
                }
                S::c(theta[j]) - S::c(self.alpha / n) * step
            })
            .collect();
        let mut meta = S::c(0.0);
        for (x, &y) in self.meta_x.iter().zip(&self.meta_y) {
            meta = meta + cross_entropy(&self.logits(&theta_hat, x), y);
        }
        meta / S::c(self.meta_x.len() as f64) + S::c(self.lambda) * kl
    }

    pub fn hypergradient(&self, theta: &[f64], phi: &[f64]) -> Vec<f64> {
        let grads = self.per_sample_grads(theta);
        (0..phi.len())
            .map(|c| self.meta_objective(theta, &grads, &seeded(phi, c)).d)
            .collect()
    }

    /// One full iteration: returns `(Θ', Φ')`.
    pub fn iteration(&self, theta: &[f64], phi: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let grads = self.per_sample_grads(theta);
        let hyper: Vec<f64> = (0..phi.len())
            .map(|c| self.meta_objective(theta, &grads, &seeded(phi, c)).d)
            .collect();
        let phi_next: Vec<f64> = phi
            .iter()
            .zip(&hyper)
            .map(|(p, g)| p - self.beta * g)
            .collect();
        let logits: Vec<Vec<f64>> = self
            .x
            .iter()
            .map(|x| self.logits::<f64>(theta, x))
            .collect();
        let (w, _) = self.normalized::<f64>(&phi_next, &logits);
        let n = self.x.len() as f64;
        let theta_next = (0..theta.len())
            .map(|j| {
                theta[j]
                    - self.alpha / n * w.iter().zip(&grads).map(|(wi, g)| wi * g[j]).sum::<f64>()
            })
            .collect();
        (theta_next, phi_next)
    }
}

pub fn seeded(x: &[f64], j: usize) -> Vec<Dual> {
    x.iter()
        .enumerate()
        .map(|(i, &v)| Dual {
            v,
            d: if i == j { 1.0 } else { 0.0 },
        })
        .collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}
