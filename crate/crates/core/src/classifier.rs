//! The classifier `f_Θ`: an MLP producing raw logits, its weighted
//! cross-entropy objective, per-sample gradients and plain SGD.

use serde::{Deserialize, Serialize};

use crate::datagen::LabeledDataset;
use crate::error::{Error, Result};
use crate::nn::{
    cross_entropy_grad, cross_entropy_with_logits, Activation, FlatParams, Matrix, Mlp,
};
use crate::rng::RngState;

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierParams {
    mlp: Mlp,
}

impl ClassifierParams {
    /// Glorot-initialized MLP over `dims = [d, hidden..., K]` with `hidden`
    /// activations and identity logits.
    pub fn new(dims: &[usize], hidden: Activation, rng: &mut RngState) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::shape(format!("invalid classifier dims {dims:?}")));
        }
        Self::from_mlp(Mlp::glorot(dims, hidden, Activation::Identity, rng))
    }

    pub fn from_mlp(mlp: Mlp) -> Result<Self> {
        match mlp.layers.last() {
            None => Err(Error::shape("classifier needs at least one layer")),
            Some(l) if l.activation != Activation::Identity => Err(Error::shape(
                "classifier output layer must be identity (logits)",
            )),
            Some(_) => Ok(Self { mlp }),
        }
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    pub fn input_dim(&self) -> usize {
        self.mlp.input_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.mlp.output_dim()
    }

    pub fn dims(&self) -> Vec<usize> {
        self.mlp.dims()
    }

    pub fn hidden_activation(&self) -> Activation {
        let n = self.mlp.layers.len();
        if n > 1 {
            self.mlp.layers[0].activation
        } else {
            Activation::Identity
        }
    }

    pub fn forward_logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.mlp.forward(x)
    }
}

impl FlatParams for ClassifierParams {
    fn num_params(&self) -> usize {
        self.mlp.num_params()
    }

    fn to_flat(&self) -> Vec<f64> {
        self.mlp.to_flat()
    }

    fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        self.mlp.set_flat(flat)
    }
}

/// Feature rows with the labels the classifier is trained against.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub features: Matrix,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(features: Matrix, labels: Vec<usize>) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::shape(format!(
                "{} rows but {} labels",
                features.rows(),
                labels.len()
            )));
        }
        Ok(Self { features, labels })
    }

    /// Rows `indices` of `ds`, labeled with its observed labels.
    pub fn from_dataset(ds: &LabeledDataset, indices: &[usize]) -> Self {
        Self {
            features: ds.features.select_rows(indices),
            labels: indices.iter().map(|&i| ds.observed_labels[i]).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Logits, losses and loss gradients of every sample in a batch.
#[derive(Debug, Clone)]
pub struct PerSamplePass {
    pub logits: Vec<Vec<f64>>,
    pub losses: Vec<f64>,
    pub grads: Vec<Vec<f64>>,
}

/// `gᵢ = ∇_Θ ℓ(f_Θ(xᵢ), yᵢ)` for each sample, plus the logits and losses.
pub fn per_sample_pass(params: &ClassifierParams, batch: &Batch) -> Result<PerSamplePass> {
    let n = batch.len();
    let mut out = PerSamplePass {
        logits: Vec::with_capacity(n),
        losses: Vec::with_capacity(n),
        grads: Vec::with_capacity(n),
    };
    for (i, &y) in batch.labels.iter().enumerate() {
        let trace = params.mlp.trace(batch.features.row(i))?;
        let z = trace.output().to_vec();
        let loss = cross_entropy_with_logits(&z, y)?;
        let (g, _) = params.mlp.backward(&trace, &cross_entropy_grad(&z, y)?)?;
        out.logits.push(z);
        out.losses.push(loss);
        out.grads.push(g);
    }
    Ok(out)
}

/// Per-sample gradients, flattened in the canonical parameter order.
pub fn per_sample_gradients(params: &ClassifierParams, batch: &Batch) -> Result<Vec<Vec<f64>>> {
    if batch.is_empty() {
        return Err(Error::contract(
            "per-sample gradients need a nonempty batch",
        ));
    }
    Ok(per_sample_pass(params, batch)?.grads)
}

fn check_weights(batch: &Batch, weights: &[f64]) -> Result<()> {
    if weights.len() != batch.len() {
        return Err(Error::shape(format!(
            "{} weights for a batch of {}",
            weights.len(),
            batch.len()
        )));
    }
    if let Some(w) = weights.iter().find(|w| w.is_nan() || **w < 0.0) {
        return Err(Error::contract(format!(
            "sample weights must be nonnegative, got {w}"
        )));
    }
    Ok(())
}

/// `(1/n) Σ wᵢ ℓ(f_Θ(xᵢ), yᵢ)`.
pub fn weighted_batch_loss(
    params: &ClassifierParams,
    batch: &Batch,
    weights: &[f64],
) -> Result<f64> {
    check_weights(batch, weights)?;
    if batch.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (i, (&y, &w)) in batch.labels.iter().zip(weights).enumerate() {
        let z = params.forward_logits(batch.features.row(i))?;
        total += w * cross_entropy_with_logits(&z, y)?;
    }
    Ok(total / batch.len() as f64)
}

/// [`weighted_batch_loss`] and its gradient with respect to Θ.
pub fn weighted_batch_gradient(
    params: &ClassifierParams,
    batch: &Batch,
    weights: &[f64],
) -> Result<(f64, Vec<f64>)> {
    check_weights(batch, weights)?;
    let mut grad = vec![0.0; params.num_params()];
    if batch.is_empty() {
        return Ok((0.0, grad));
    }
    let inv_n = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    for (i, (&y, &w)) in batch.labels.iter().zip(weights).enumerate() {
        let trace = params.mlp.trace(batch.features.row(i))?;
        let z = trace.output();
        total += w * cross_entropy_with_logits(z, y)?;
        if w != 0.0 {
            params
                .mlp
                .backward_into(&trace, &cross_entropy_grad(z, y)?, w * inv_n, &mut grad)?;
        }
    }
    Ok((total * inv_n, grad))
}

/// Mean (unweighted) cross-entropy gradient over a batch, as used for the
/// meta loss.
pub fn mean_loss_gradient(params: &ClassifierParams, batch: &Batch) -> Result<(f64, Vec<f64>)> {
    let weights = vec![1.0; batch.len()];
    weighted_batch_gradient(params, batch, &weights)
}

/// `Θ − rate · gradient`.
pub fn sgd_step(
    params: &ClassifierParams,
    gradient: &[f64],
    rate: f64,
) -> Result<ClassifierParams> {
    if gradient.len() != params.num_params() {
        return Err(Error::shape(format!(
            "gradient has {} entries, classifier has {} parameters",
            gradient.len(),
            params.num_params()
        )));
    }
    let mut flat = params.to_flat();
    for (p, g) in flat.iter_mut().zip(gradient) {
        *p -= rate * g;
    }
    let mut next = params.clone();
    next.set_flat(&flat)?;
    Ok(next)
}

/// Index of the largest entry; ties go to the smallest index.
pub fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in z.iter().enumerate().skip(1) {
        if v > z[best] {
            best = i;
        }
    }
    best
}

pub fn predict(params: &ClassifierParams, x: &[f64]) -> Result<usize> {
    Ok(argmax(&params.forward_logits(x)?))
}

/// Fraction of samples whose argmax logit equals the observed label.
pub fn evaluate_accuracy(params: &ClassifierParams, ds: &LabeledDataset) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::contract("accuracy of an empty dataset"));
    }
    let mut hits = 0usize;
    for i in 0..ds.len() {
        if predict(params, ds.row(i))? == ds.observed_labels[i] {
            hits += 1;
        }
    }
    Ok(hits as f64 / ds.len() as f64)
}

/// Recall per class (observed labels); `None` for classes with no samples.
pub fn per_class_recall(
    params: &ClassifierParams,
    ds: &LabeledDataset,
) -> Result<Vec<Option<f64>>> {
    let k = ds.num_classes;
    let mut hits = vec![0usize; k];
    let mut totals = vec![0usize; k];
    for i in 0..ds.len() {
        let y = ds.observed_labels[i];
        totals[y] += 1;
        if predict(params, ds.row(i))? == y {
            hits[y] += 1;
        }
    }
    Ok(hits
        .into_iter()
        .zip(totals)
        .map(|(h, t)| (t > 0).then(|| h as f64 / t as f64))
        .collect())
}

/// Step decay: the rate is divided by `decay_factor` at each listed epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base_rate: f64,
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
}

impl LrSchedule {
    pub fn new(base_rate: f64, decay_epochs: Vec<usize>, decay_factor: f64) -> Result<Self> {
        if decay_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(
                "decay epochs must be strictly increasing".into(),
            ));
        }
        if decay_factor.is_nan() || decay_factor <= 0.0 {
            return Err(Error::Config("decay factor must be positive".into()));
        }
        Ok(Self {
            base_rate,
            decay_epochs,
            decay_factor,
        })
    }

    pub fn constant(base_rate: f64) -> Self {
        Self {
            base_rate,
            decay_epochs: Vec::new(),
            decay_factor: 10.0,
        }
    }

    /// Decays by 10 at 60% and 80% of `total_epochs`.
    pub fn scaled_default(base_rate: f64, total_epochs: usize) -> Self {
        let mut decay_epochs: Vec<usize> = [0.6, 0.8]
            .iter()
            .map(|f| (f * total_epochs as f64).round() as usize)
            .filter(|&e| e > 0)
            .collect();
        decay_epochs.dedup();
        Self {
            base_rate,
            decay_epochs,
            decay_factor: 10.0,
        }
    }

    /// Rate in effect during (0-based) `epoch`.
    pub fn rate_at(&self, epoch: usize) -> f64 {
        let decays = self.decay_epochs.iter().filter(|&&e| epoch >= e).count();
        self.base_rate / self.decay_factor.powi(decays as i32)
    }
}
