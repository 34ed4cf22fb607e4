//! Weighting networks `V_Φ(z, y) → w̃ ∈ (0, 1)`.
//!
//! * `lossnet`: `sigmoid(MLP(ℓ(z, y)))`
//! * `logitnet`: `sigmoid(MLP(z ⊙ e(y)))`
//! * `metainfonet`: an information-bottleneck layer samples
//!   `ψ = μ(z) + σ(z) ⊙ ε`, a linear layer maps `[ψ, z]` back to `K` dims, and
//!   `sigmoid(MLP(r ⊙ e(y)))` gives the weight. The KL of `N(μ, σ²)` from
//!   `N(0, I)` is the bottleneck penalty.
//! * `standard`: constant raw weight 1, no parameters (uniform weighting).
//!
//! Flat parameter order: embedding (row-major), ib_mean, ib_logvar, align,
//! then the MLP layers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    cross_entropy_with_logits, Activation, DenseLayer, FlatParams, Matrix, Mlp, MlpTrace,
};
use crate::rng::RngState;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Standard,
    LossNet,
    LogitNet,
    MetaInfoNet,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Standard => "standard",
            Variant::LossNet => "lossnet",
            Variant::LogitNet => "logitnet",
            Variant::MetaInfoNet => "metainfonet",
        }
    }

    pub const META: [Variant; 3] = [Variant::LossNet, Variant::LogitNet, Variant::MetaInfoNet];
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(Variant::Standard),
            "lossnet" => Ok(Variant::LossNet),
            "logitnet" => Ok(Variant::LogitNet),
            "metainfonet" => Ok(Variant::MetaInfoNet),
            other => Err(Error::Config(format!("unknown variant '{other}'"))),
        }
    }
}

/// Architecture of a weighting network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MwNetShape {
    pub variant: Variant,
    pub num_classes: usize,
    pub hidden: usize,
    pub psi_dim: usize,
}

#[derive(Debug, Clone, PartialEq)]
#[allow(clippy::large_enum_variant)]
pub enum MwNetParams {
    Standard {
        num_classes: usize,
    },
    LossNet {
        mlp: Mlp,
    },
    LogitNet {
        embedding: Matrix,
        mlp: Mlp,
    },
    MetaInfoNet {
        embedding: Matrix,
        ib_mean: DenseLayer,
        ib_logvar: DenseLayer,
        align: DenseLayer,
        mlp: Mlp,
    },
}

fn glorot_matrix(rows: usize, cols: usize, rng: &mut RngState) -> Matrix {
    DenseLayer::glorot(cols, rows, Activation::Identity, rng).weights
}

impl MwNetParams {
    /// Glorot-initialized network; hidden layers use relu, the output sigmoid.
    pub fn init(shape: MwNetShape, rng: &mut RngState) -> Result<Self> {
        let k = shape.num_classes;
        if k < 2 && shape.variant != Variant::LossNet {
            return Err(Error::Config(
                "weighting network needs at least 2 classes".into(),
            ));
        }
        if shape.variant != Variant::Standard && shape.hidden == 0 {
            return Err(Error::Config("hidden width must be positive".into()));
        }
        let mlp = |input: usize, rng: &mut RngState| {
            Mlp::glorot(
                &[input, shape.hidden, 1],
                Activation::Relu,
                Activation::Sigmoid,
                rng,
            )
        };
        Ok(match shape.variant {
            Variant::Standard => MwNetParams::Standard { num_classes: k },
            Variant::LossNet => MwNetParams::LossNet { mlp: mlp(1, rng) },
            Variant::LogitNet => MwNetParams::LogitNet {
                embedding: glorot_matrix(k, k, rng),
                mlp: mlp(k, rng),
            },
            Variant::MetaInfoNet => {
                let psi = shape.psi_dim;
                if psi == 0 {
                    return Err(Error::Config("psi dimension must be positive".into()));
                }
                MwNetParams::MetaInfoNet {
                    embedding: glorot_matrix(k, k, rng),
                    ib_mean: DenseLayer::glorot(k, psi, Activation::Identity, rng),
                    ib_logvar: DenseLayer::glorot(k, psi, Activation::Identity, rng),
                    align: DenseLayer::glorot(psi + k, k, Activation::Identity, rng),
                    mlp: mlp(k, rng),
                }
            }
        })
    }

    /// Same architecture with every parameter zero: raw weight 0.5 everywhere.
    pub fn zeroed(&self) -> Self {
        let mut z = self.clone();
        let n = z.num_params();
        z.set_flat(&vec![0.0; n]).expect("length matches");
        z
    }

    pub fn variant(&self) -> Variant {
        match self {
            MwNetParams::Standard { .. } => Variant::Standard,
            MwNetParams::LossNet { .. } => Variant::LossNet,
            MwNetParams::LogitNet { .. } => Variant::LogitNet,
            MwNetParams::MetaInfoNet { .. } => Variant::MetaInfoNet,
        }
    }

    pub fn shape(&self) -> MwNetShape {
        let hidden_of = |mlp: &Mlp| mlp.layers.first().map_or(0, DenseLayer::output_dim);
        match self {
            MwNetParams::Standard { num_classes } => MwNetShape {
                variant: Variant::Standard,
                num_classes: *num_classes,
                hidden: 0,
                psi_dim: 0,
            },
            MwNetParams::LossNet { mlp } => MwNetShape {
                variant: Variant::LossNet,
                num_classes: 0,
                hidden: hidden_of(mlp),
                psi_dim: 0,
            },
            MwNetParams::LogitNet { embedding, mlp } => MwNetShape {
                variant: Variant::LogitNet,
                num_classes: embedding.rows(),
                hidden: hidden_of(mlp),
                psi_dim: 0,
            },
            MwNetParams::MetaInfoNet {
                embedding,
                ib_mean,
                mlp,
                ..
            } => MwNetShape {
                variant: Variant::MetaInfoNet,
                num_classes: embedding.rows(),
                hidden: hidden_of(mlp),
                psi_dim: ib_mean.output_dim(),
            },
        }
    }

    /// Named contiguous ranges of the flat parameter vector.
    pub fn blocks(&self) -> Vec<(String, std::ops::Range<usize>)> {
        let mut out = Vec::new();
        let mut off = 0;
        let mut push = |name: String, len: usize| {
            out.push((name, off..off + len));
            off += len;
        };
        let mlp_blocks = |mlp: &Mlp, push: &mut dyn FnMut(String, usize)| {
            for (i, l) in mlp.layers.iter().enumerate() {
                push(format!("mlp.{i}"), l.num_params());
            }
        };
        match self {
            MwNetParams::Standard { .. } => {}
            MwNetParams::LossNet { mlp } => mlp_blocks(mlp, &mut push),
            MwNetParams::LogitNet { embedding, mlp } => {
                push("embedding".into(), embedding.data().len());
                mlp_blocks(mlp, &mut push);
            }
            MwNetParams::MetaInfoNet {
                embedding,
                ib_mean,
                ib_logvar,
                align,
                mlp,
            } => {
                push("embedding".into(), embedding.data().len());
                push("ib_mean".into(), ib_mean.num_params());
                push("ib_logvar".into(), ib_logvar.num_params());
                push("align".into(), align.num_params());
                mlp_blocks(mlp, &mut push);
            }
        }
        out
    }

    /// Dimension of ε per sample (0 unless metainfonet).
    pub fn noise_dim(&self) -> usize {
        match self {
            MwNetParams::MetaInfoNet { ib_mean, .. } => ib_mean.output_dim(),
            _ => 0,
        }
    }

    fn fingerprint(&self) -> u64 {
        self.to_flat()
            .iter()
            .fold(0xcbf2_9ce4_8422_2325u64, |h, v| {
                (h ^ v.to_bits()).wrapping_mul(0x0000_0100_0000_01b3)
            })
    }

    /// Raw weight of one sample; `epsilon` is ignored except by metainfonet,
    /// where `None` means deterministic `ψ = μ`.
    pub fn raw_weight(&self, logits: &[f64], label: usize, epsilon: Option<&[f64]>) -> Result<f64> {
        Ok(self.forward_sample(logits, label, epsilon)?.raw_weight)
    }

    /// Forward pass for one sample, keeping what the backward pass needs.
    pub fn forward_sample(
        &self,
        logits: &[f64],
        label: usize,
        epsilon: Option<&[f64]>,
    ) -> Result<SampleForward> {
        match self {
            MwNetParams::Standard { num_classes } => {
                if label >= *num_classes {
                    return Err(Error::Index(format!(
                        "label {label} with {num_classes} classes"
                    )));
                }
                Ok(SampleForward::bare(logits, label, 1.0))
            }
            MwNetParams::LossNet { mlp } => {
                let loss = cross_entropy_with_logits(logits, label)?;
                let trace = mlp.trace(&[loss])?;
                let w = trace.output()[0];
                Ok(SampleForward {
                    trace: Some(trace),
                    ..SampleForward::bare(logits, label, w)
                })
            }
            MwNetParams::LogitNet { embedding, mlp } => {
                let e = label_embedding(embedding, label)?;
                let input = hadamard(logits, &e)?;
                let trace = mlp.trace(&input)?;
                let w = trace.output()[0];
                Ok(SampleForward {
                    trace: Some(trace),
                    ..SampleForward::bare(logits, label, w)
                })
            }
            MwNetParams::MetaInfoNet {
                embedding,
                ib_mean,
                ib_logvar,
                align,
                mlp,
            } => {
                let psi_dim = ib_mean.output_dim();
                let eps = match epsilon {
                    Some(eps) if eps.len() != psi_dim => {
                        return Err(Error::shape(format!(
                            "epsilon has {} entries, need {psi_dim}",
                            eps.len()
                        )))
                    }
                    Some(eps) => eps.to_vec(),
                    None => vec![0.0; psi_dim],
                };
                let e = label_embedding(embedding, label)?;
                let mean = ib_mean.forward(logits)?;
                let logvar = ib_logvar.forward(logits)?;
                let std: Vec<f64> = logvar.iter().map(|lv| (0.5 * lv).exp()).collect();
                let psi = mean
                    .iter()
                    .zip(&std)
                    .zip(&eps)
                    .map(|((m, s), e)| m + s * e)
                    .collect::<Vec<_>>();
                let mut concat = psi.clone();
                concat.extend_from_slice(logits);
                let aligned = align.forward(&concat)?;
                let input = hadamard(&aligned, &e)?;
                let trace = mlp.trace(&input)?;
                let w = trace.output()[0];
                Ok(SampleForward {
                    trace: Some(trace),
                    ib: Some(IbForward {
                        sample: IbSample {
                            mean,
                            std,
                            epsilon: eps,
                            psi,
                        },
                        logvar,
                        concat,
                        aligned,
                    }),
                    ..SampleForward::bare(logits, label, w)
                })
            }
        }
    }

    /// Forward over a batch. `epsilon`, when given, holds one row per sample.
    pub fn forward_batch(
        &self,
        logits: &[Vec<f64>],
        labels: &[usize],
        epsilon: Option<&[Vec<f64>]>,
    ) -> Result<ForwardCache> {
        if logits.len() != labels.len() || epsilon.is_some_and(|e| e.len() != labels.len()) {
            return Err(Error::shape("logits, labels and epsilon rows must align"));
        }
        let samples = logits
            .iter()
            .zip(labels)
            .enumerate()
            .map(|(i, (z, &y))| self.forward_sample(z, y, epsilon.map(|e| e[i].as_slice())))
            .collect::<Result<Vec<_>>>()?;
        Ok(ForwardCache {
            fingerprint: self.fingerprint(),
            samples,
        })
    }

    /// `∇Φ [Σᵢ upstreamᵢ·w̃ᵢ(Φ) + kl_coeff·Σᵢ KLᵢ(Φ)]`, the KL term only for
    /// metainfonet with `kl_enabled`.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        upstream: &[f64],
        kl_coeff: f64,
        kl_enabled: bool,
    ) -> Result<Vec<f64>> {
        if cache.fingerprint != self.fingerprint() {
            return Err(Error::contract(
                "forward cache was produced by different parameters",
            ));
        }
        if upstream.len() != cache.samples.len() {
            return Err(Error::shape(format!(
                "{} upstream values for {} cached samples",
                upstream.len(),
                cache.samples.len()
            )));
        }
        let mut grad = vec![0.0; self.num_params()];
        let kl = if kl_enabled { kl_coeff } else { 0.0 };
        for (s, &u) in cache.samples.iter().zip(upstream) {
            self.accumulate_sample(s, u, kl, &mut grad)?;
        }
        Ok(grad)
    }

    fn accumulate_sample(
        &self,
        s: &SampleForward,
        u: f64,
        kl: f64,
        grad: &mut [f64],
    ) -> Result<()> {
        match self {
            MwNetParams::Standard { .. } => Ok(()),
            MwNetParams::LossNet { mlp } => {
                if u != 0.0 {
                    mlp.backward_into(s.trace()?, &[u], 1.0, grad)?;
                }
                Ok(())
            }
            MwNetParams::LogitNet { embedding, mlp } => {
                if u == 0.0 {
                    return Ok(());
                }
                let k = embedding.cols();
                let emb_len = embedding.data().len();
                let (g_emb, g_mlp) = grad.split_at_mut(emb_len);
                let d_input = mlp.backward_into(s.trace()?, &[u], 1.0, g_mlp)?;
                let row = &mut g_emb[s.label * k..(s.label + 1) * k];
                for ((g, d), z) in row.iter_mut().zip(&d_input).zip(&s.logits) {
                    *g += d * z;
                }
                Ok(())
            }
            MwNetParams::MetaInfoNet {
                embedding,
                ib_mean,
                ib_logvar,
                align,
                mlp,
            } => {
                let ib =
                    s.ib.as_ref()
                        .ok_or_else(|| Error::contract("cache lacks bottleneck state"))?;
                let k = embedding.cols();
                let psi_dim = ib_mean.output_dim();
                let (g_emb, rest) = grad.split_at_mut(embedding.data().len());
                let (g_mean, rest) = rest.split_at_mut(ib_mean.num_params());
                let (g_logvar, rest) = rest.split_at_mut(ib_logvar.num_params());
                let (g_align, g_mlp) = rest.split_at_mut(align.num_params());

                let mut d_psi = vec![0.0; psi_dim];
                if u != 0.0 {
                    let e = embedding.row(s.label);
                    let d_input = mlp.backward_into(s.trace()?, &[u], 1.0, g_mlp)?;
                    let row = &mut g_emb[s.label * k..(s.label + 1) * k];
                    for ((g, d), r) in row.iter_mut().zip(&d_input).zip(&ib.aligned) {
                        *g += d * r;
                    }
                    let d_aligned: Vec<f64> = d_input.iter().zip(e).map(|(d, e)| d * e).collect();
                    let ga =
                        align.backward_cached(&ib.concat, &ib.aligned, &ib.aligned, &d_aligned)?;
                    add_layer_grad(g_align, &ga.grad_weights, &ga.grad_bias);
                    d_psi.copy_from_slice(&ga.grad_input[..psi_dim]);
                }
                let sample = &ib.sample;
                let d_mean: Vec<f64> = d_psi
                    .iter()
                    .zip(&sample.mean)
                    .map(|(d, m)| d + kl * m)
                    .collect();
                let d_logvar: Vec<f64> = (0..psi_dim)
                    .map(|j| {
                        let var = sample.std[j] * sample.std[j];
                        d_psi[j] * sample.epsilon[j] * 0.5 * sample.std[j] + kl * 0.5 * (var - 1.0)
                    })
                    .collect();
                accumulate_identity_layer(g_mean, &s.logits, &d_mean);
                accumulate_identity_layer(g_logvar, &s.logits, &d_logvar);
                Ok(())
            }
        }
    }
}

fn add_layer_grad(dst: &mut [f64], gw: &Matrix, gb: &[f64]) {
    let (dw, db) = dst.split_at_mut(gw.data().len());
    for (d, s) in dw.iter_mut().zip(gw.data()) {
        *d += s;
    }
    for (d, s) in db.iter_mut().zip(gb) {
        *d += s;
    }
}

/// Adds `delta ⊗ x` and `delta` into an identity layer's (W, b) gradient slot.
fn accumulate_identity_layer(dst: &mut [f64], x: &[f64], delta: &[f64]) {
    let (dw, db) = dst.split_at_mut(delta.len() * x.len());
    for (r, &d) in delta.iter().enumerate() {
        for (g, xi) in dw[r * x.len()..(r + 1) * x.len()].iter_mut().zip(x) {
            *g += d * xi;
        }
    }
    for (g, d) in db.iter_mut().zip(delta) {
        *g += d;
    }
}

fn hadamard(a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    if a.len() != b.len() {
        return Err(Error::shape(format!(
            "element-wise product of {} and {} entries",
            a.len(),
            b.len()
        )));
    }
    Ok(a.iter().zip(b).map(|(x, y)| x * y).collect())
}

impl FlatParams for MwNetParams {
    fn num_params(&self) -> usize {
        match self {
            MwNetParams::Standard { .. } => 0,
            MwNetParams::LossNet { mlp } => mlp.num_params(),
            MwNetParams::LogitNet { embedding, mlp } => embedding.data().len() + mlp.num_params(),
            MwNetParams::MetaInfoNet {
                embedding,
                ib_mean,
                ib_logvar,
                align,
                mlp,
            } => {
                embedding.data().len()
                    + ib_mean.num_params()
                    + ib_logvar.num_params()
                    + align.num_params()
                    + mlp.num_params()
            }
        }
    }

    fn to_flat(&self) -> Vec<f64> {
        match self {
            MwNetParams::Standard { .. } => Vec::new(),
            MwNetParams::LossNet { mlp } => mlp.to_flat(),
            MwNetParams::LogitNet { embedding, mlp } => {
                let mut v = embedding.data().to_vec();
                v.extend(mlp.to_flat());
                v
            }
            MwNetParams::MetaInfoNet {
                embedding,
                ib_mean,
                ib_logvar,
                align,
                mlp,
            } => {
                let mut v = embedding.data().to_vec();
                v.extend(ib_mean.to_flat());
                v.extend(ib_logvar.to_flat());
                v.extend(align.to_flat());
                v.extend(mlp.to_flat());
                v
            }
        }
    }

    fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::shape(format!(
                "weighting network expects {} parameters, got {}",
                self.num_params(),
                flat.len()
            )));
        }
        match self {
            MwNetParams::Standard { .. } => {}
            MwNetParams::LossNet { mlp } => mlp.set_flat(flat)?,
            MwNetParams::LogitNet { embedding, mlp } => {
                let (e, m) = flat.split_at(embedding.data().len());
                embedding.data_mut().copy_from_slice(e);
                mlp.set_flat(m)?;
            }
            MwNetParams::MetaInfoNet {
                embedding,
                ib_mean,
                ib_logvar,
                align,
                mlp,
            } => {
                let (e, rest) = flat.split_at(embedding.data().len());
                embedding.data_mut().copy_from_slice(e);
                let (a, rest) = rest.split_at(ib_mean.num_params());
                ib_mean.set_flat(a)?;
                let (b, rest) = rest.split_at(ib_logvar.num_params());
                ib_logvar.set_flat(b)?;
                let (c, rest) = rest.split_at(align.num_params());
                align.set_flat(c)?;
                mlp.set_flat(rest)?;
            }
        }
        Ok(())
    }
}

/// Reparameterized draw from the bottleneck layer.
#[derive(Debug, Clone, PartialEq)]
pub struct IbSample {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub epsilon: Vec<f64>,
    pub psi: Vec<f64>,
}

#[derive(Debug, Clone)]
struct IbForward {
    sample: IbSample,
    logvar: Vec<f64>,
    concat: Vec<f64>,
    aligned: Vec<f64>,
}

/// Cached forward state of one sample.
#[derive(Debug, Clone)]
pub struct SampleForward {
    pub raw_weight: f64,
    logits: Vec<f64>,
    label: usize,
    trace: Option<MlpTrace>,
    ib: Option<IbForward>,
}

impl SampleForward {
    fn bare(logits: &[f64], label: usize, raw_weight: f64) -> Self {
        Self {
            raw_weight,
            logits: logits.to_vec(),
            label,
            trace: None,
            ib: None,
        }
    }

    fn trace(&self) -> Result<&MlpTrace> {
        self.trace
            .as_ref()
            .ok_or_else(|| Error::contract("cache lacks MLP trace"))
    }

    pub fn ib_sample(&self) -> Option<&IbSample> {
        self.ib.as_ref().map(|ib| &ib.sample)
    }

    /// Bottleneck KL for this sample (0 for variants without one).
    pub fn kl(&self) -> f64 {
        self.ib
            .as_ref()
            .map_or(0.0, |ib| kl_from_logvar(&ib.sample.mean, &ib.logvar))
    }
}

/// Forward state of a batch, tagged with the parameters that produced it.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    fingerprint: u64,
    pub samples: Vec<SampleForward>,
}

impl ForwardCache {
    pub fn raw_weights(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.raw_weight).collect()
    }

    pub fn kl_values(&self) -> Vec<f64> {
        self.samples.iter().map(SampleForward::kl).collect()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Row `y` of the embedding matrix, i.e. `E · onehot(y)`.
pub fn label_embedding(embedding: &Matrix, y: usize) -> Result<Vec<f64>> {
    if y >= embedding.rows() {
        return Err(Error::Index(format!(
            "label {y} with {} embedding rows",
            embedding.rows()
        )));
    }
    Ok(embedding.row(y).to_vec())
}

pub fn lossnet_forward(params: &MwNetParams, loss: f64) -> Result<f64> {
    match params {
        MwNetParams::LossNet { mlp } => Ok(mlp.forward(&[loss])?[0]),
        _ => Err(Error::contract("lossnet_forward needs lossnet parameters")),
    }
}

pub fn logitnet_forward(params: &MwNetParams, logits: &[f64], y: usize) -> Result<f64> {
    match params {
        MwNetParams::LogitNet { .. } => params.raw_weight(logits, y, None),
        _ => Err(Error::contract(
            "logitnet_forward needs logitnet parameters",
        )),
    }
}

/// `None` for `epsilon` runs the deterministic `ψ = μ` path.
pub fn metainfonet_forward(
    params: &MwNetParams,
    logits: &[f64],
    y: usize,
    epsilon: Option<&[f64]>,
) -> Result<(f64, IbSample)> {
    match params {
        MwNetParams::MetaInfoNet { .. } => {
            let s = params.forward_sample(logits, y, epsilon)?;
            let sample = s
                .ib_sample()
                .cloned()
                .expect("metainfonet caches its sample");
            Ok((s.raw_weight, sample))
        }
        _ => Err(Error::contract(
            "metainfonet_forward needs metainfonet parameters",
        )),
    }
}

fn kl_from_logvar(mean: &[f64], logvar: &[f64]) -> f64 {
    mean.iter()
        .zip(logvar)
        .map(|(m, lv)| 0.5 * (m * m + lv.exp() - lv - 1.0))
        .sum()
}

/// `Σⱼ ½(μⱼ² + σⱼ² − ln σⱼ² − 1)`: KL of `N(μ, diag σ²)` from `N(0, I)`.
pub fn kl_to_standard_normal(sample: &IbSample) -> Result<f64> {
    if let Some(s) = sample.std.iter().find(|s| s.is_nan() || **s <= 0.0) {
        return Err(Error::contract(format!(
            "standard deviation must be positive, got {s}"
        )));
    }
    Ok(sample
        .mean
        .iter()
        .zip(&sample.std)
        .map(|(m, s)| {
            let var = s * s;
            0.5 * (m * m + var - var.ln() - 1.0)
        })
        .sum())
}

/// `wᵢ = w̃ᵢ / (Σ w̃ + δ(Σ w̃))` where `δ(s) = 1` iff `s = 0`.
pub fn normalize_weights(raw: &[f64]) -> Result<Vec<f64>> {
    if let Some(w) = raw.iter().find(|w| w.is_nan() || **w < 0.0) {
        return Err(Error::contract(format!(
            "raw weights must be nonnegative, got {w}"
        )));
    }
    let sum: f64 = raw.iter().sum();
    let denom = if sum == 0.0 { 1.0 } else { sum };
    Ok(raw.iter().map(|w| w / denom).collect())
}

/// Pulls `∂L/∂wᵢ` back through [`normalize_weights`] to `∂L/∂w̃ⱼ`.
pub fn normalization_vjp(raw: &[f64], upstream: &[f64]) -> Vec<f64> {
    let sum: f64 = raw.iter().sum();
    if sum == 0.0 {
        return upstream.to_vec();
    }
    let weighted: f64 = raw.iter().zip(upstream).map(|(w, c)| w * c).sum::<f64>() / sum;
    upstream.iter().map(|c| (c - weighted) / sum).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_difference, max_relative_error};

    fn shape(variant: Variant) -> MwNetShape {
        MwNetShape {
            variant,
            num_classes: 3,
            hidden: 6,
            psi_dim: 2,
        }
    }

    fn net(variant: Variant, seed: u64) -> MwNetParams {
        MwNetParams::init(shape(variant), &mut RngState::new(seed)).unwrap()
    }

    #[test]
    fn embedding_lookup() {
        let e = Matrix::identity(3);
        assert_eq!(label_embedding(&e, 1).unwrap(), vec![0.0, 1.0, 0.0]);
        assert_eq!(
            label_embedding(&Matrix::zeros(3, 3), 2).unwrap(),
            vec![0.0; 3]
        );
        assert!(matches!(label_embedding(&e, 3), Err(Error::Index(_))));
    }

    #[test]
    fn zeroed_lossnet_gives_half() {
        let z = net(Variant::LossNet, 1).zeroed();
        for loss in [0.0, 1.0, 1e6] {
            assert_eq!(lossnet_forward(&z, loss).unwrap(), 0.5);
        }
        let p = net(Variant::LossNet, 2);
        for loss in [0.0, 3.0, 1e3, 1e6] {
            let w = lossnet_forward(&p, loss).unwrap();
            assert!(w > 0.0 && w < 1.0, "w {w}");
        }
    }

    #[test]
    fn logitnet_gate_and_annihilation() {
        let mut p = net(Variant::LogitNet, 3);
        let z = [0.4, -1.3, 2.2];
        if let MwNetParams::LogitNet { embedding, mlp } = &mut p {
            embedding.data_mut().fill(1.0);
            let direct = mlp.forward(&z).unwrap()[0];
            assert_eq!(logitnet_forward(&p, &z, 1).unwrap(), direct);
        }
        if let MwNetParams::LogitNet { embedding, mlp } = &mut p {
            embedding.data_mut().fill(0.0);
            let base = mlp.forward(&[0.0; 3]).unwrap()[0];
            assert_eq!(logitnet_forward(&p, &z, 2).unwrap(), base);
            assert_eq!(logitnet_forward(&p, &[9.0, 9.0, 9.0], 2).unwrap(), base);
        }
    }

    #[test]
    fn metainfonet_deterministic_paths() {
        let p = net(Variant::MetaInfoNet, 4);
        let z = [1.0, 0.5, -0.7];
        let (w_det, s_det) = metainfonet_forward(&p, &z, 0, None).unwrap();
        assert_eq!(s_det.psi, s_det.mean);
        let (w_zero, _) = metainfonet_forward(&p, &z, 0, Some(&[0.0, 0.0])).unwrap();
        assert_eq!(w_det, w_zero);
        let (w_eps, s_eps) = metainfonet_forward(&p, &z, 0, Some(&[0.3, -1.1])).unwrap();
        assert_ne!(w_eps, w_det);
        for j in 0..2 {
            assert_eq!(
                s_eps.psi[j],
                s_eps.mean[j] + s_eps.std[j] * s_eps.epsilon[j]
            );
            assert_eq!(s_eps.std[j], s_det.std[j]);
        }
        let (again, _) = metainfonet_forward(&p, &z, 0, Some(&[0.3, -1.1])).unwrap();
        assert_eq!(again, w_eps);
        assert!(metainfonet_forward(&p, &z, 0, Some(&[0.3])).is_err());
    }

    #[test]
    fn kl_cases() {
        let s = |m: Vec<f64>, sd: Vec<f64>| IbSample {
            psi: m.clone(),
            epsilon: vec![0.0; m.len()],
            mean: m,
            std: sd,
        };
        assert_eq!(
            kl_to_standard_normal(&s(vec![0.0, 0.0], vec![1.0, 1.0])).unwrap(),
            0.0
        );
        assert!((kl_to_standard_normal(&s(vec![1.0], vec![1.0])).unwrap() - 0.5).abs() < 1e-15);
        let v = kl_to_standard_normal(&s(vec![0.5], vec![0.5])).unwrap();
        assert!((v - (0.5 * (0.25 + 0.25 - 0.25f64.ln() - 1.0))).abs() < 1e-15);
        assert!((v - 0.443147).abs() < 1e-6);
        assert!(kl_to_standard_normal(&s(vec![0.0], vec![0.0])).is_err());
    }

    #[test]
    fn normalization_cases() {
        assert_eq!(
            normalize_weights(&[1.0, 1.0, 2.0]).unwrap(),
            vec![0.25, 0.25, 0.5]
        );
        assert_eq!(normalize_weights(&[0.0; 3]).unwrap(), vec![0.0; 3]);
        let w = normalize_weights(&[0.2, 0.3, 0.5]).unwrap();
        for (a, b) in w.iter().zip([0.2, 0.3, 0.5]) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(normalize_weights(&[0.1, -0.1]).is_err());
    }

    #[test]
    fn normalization_vjp_matches_fd() {
        let raw = [0.3, 0.9, 0.1, 0.55];
        let c = [0.7, -1.2, 0.4, 2.0];
        let f = |w: &[f64]| -> f64 {
            normalize_weights(w)
                .unwrap()
                .iter()
                .zip(&c)
                .map(|(a, b)| a * b)
                .sum()
        };
        let fd = central_difference(f, &raw, 1e-6);
        let an = normalization_vjp(&raw, &c);
        assert!(max_relative_error(&an, &fd, 1e-8).0 < 1e-6);
    }

    fn objective(
        p: &MwNetParams,
        flat: &[f64],
        z: &[Vec<f64>],
        y: &[usize],
        eps: &[Vec<f64>],
        up: &[f64],
        kl: f64,
    ) -> f64 {
        let mut q = p.clone();
        q.set_flat(flat).unwrap();
        let cache = q.forward_batch(z, y, Some(eps)).unwrap();
        cache
            .raw_weights()
            .iter()
            .zip(up)
            .map(|(w, u)| w * u)
            .sum::<f64>()
            + kl * cache.kl_values().iter().sum::<f64>()
    }

    #[test]
    fn backward_matches_fd_all_variants() {
        let mut rng = RngState::new(99);
        let z: Vec<Vec<f64>> = (0..4).map(|_| rng.standard_normal(3)).collect();
        let y = vec![0, 2, 1, 2];
        let eps: Vec<Vec<f64>> = (0..4).map(|_| rng.standard_normal(2)).collect();
        let up = [0.8, -0.3, 1.4, -0.9];
        for variant in Variant::META {
            for kl in [0.0, 0.7] {
                let p = net(variant, 17);
                let cache = p.forward_batch(&z, &y, Some(&eps)).unwrap();
                let an = p.backward(&cache, &up, kl, true).unwrap();
                let fd = central_difference(
                    |f| objective(&p, f, &z, &y, &eps, &up, kl),
                    &p.to_flat(),
                    1e-5,
                );
                let (err, idx) = max_relative_error(&an, &fd, 1e-8);
                assert!(err < 1e-6, "{variant} kl={kl}: err {err} at {idx}");
            }
        }
    }

    #[test]
    fn backward_trivial_cases() {
        let p = net(Variant::MetaInfoNet, 5);
        let z = vec![vec![0.3, -0.2, 1.0]; 2];
        let y = vec![1, 0];
        let eps = vec![vec![0.5, -0.5]; 2];
        let cache = p.forward_batch(&z, &y, Some(&eps)).unwrap();
        assert!(p
            .backward(&cache, &[0.0, 0.0], 0.0, true)
            .unwrap()
            .iter()
            .all(|&g| g == 0.0));
        let up = [0.4, -0.6];
        assert_eq!(
            p.backward(&cache, &up, 0.0, true).unwrap(),
            p.backward(&cache, &up, 0.0, false).unwrap()
        );
        let mut stale = p.clone();
        let mut flat = stale.to_flat();
        flat[0] += 1.0;
        stale.set_flat(&flat).unwrap();
        assert!(matches!(
            stale.backward(&cache, &up, 0.0, true),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn blocks_tile_parameters() {
        for v in [
            Variant::Standard,
            Variant::LossNet,
            Variant::LogitNet,
            Variant::MetaInfoNet,
        ] {
            let p = net(v, 6);
            let blocks = p.blocks();
            let covered: usize = blocks.iter().map(|(_, r)| r.len()).sum();
            assert_eq!(covered, p.num_params());
            assert_eq!(p.shape().variant, v);
        }
    }
}
