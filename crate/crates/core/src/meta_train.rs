//! The meta weighting loop.
//!
//! One iteration on a train batch `B` (size `n`) and meta batch `M` (size `m`):
//!
//! 1. `zᵢ = f_Θ(xᵢ)`, `w̃ = V_Φ(z, y)`, `w = normalize(w̃)`.
//! 2. Virtual step `Θ̂ = Θ − (α/n) Σ wᵢ gᵢ` with `gᵢ = ∇_Θ ℓ(zᵢ, yᵢ)`.
//! 3. Meta loss `(1/m) Σ ℓ(f_Θ̂(xᵛ), yᵛ)` (+ `λ · mean KL` for metainfonet)
//!    and `Φ ← Φ − β ∇Φ`.
//! 4. Recompute `w` under the new `Φ` (same `z`, same ε) and take the real
//!    step `Θ ← Θ − (α/n) Σ wᵢ gᵢ`.
//!
//! `Φ` reaches `Θ̂` only through the `n` scalars `w̃ᵢ`, so the hypergradient is
//! exact without second-order autodiff:
//!
//! ```text
//! ∂L/∂wᵢ  = −(α/n) ⟨gᵢ, ∇_Θ̂ L_meta⟩
//! ∂L/∂w̃ⱼ = (∂L/∂wⱼ − Σᵢ wᵢ ∂L/∂wᵢ) / Σ w̃        (normalization Jacobian)
//! ∇Φ L   = Σⱼ ∂L/∂w̃ⱼ · ∇Φ w̃ⱼ + (λ/n) Σⱼ ∇Φ KLⱼ
//! ```
//!
//! The logits `zᵢ` are computed from `Θ` and are constants with respect to `Φ`.

use serde::{Deserialize, Serialize};

use crate::classifier::{
    evaluate_accuracy, mean_loss_gradient, per_sample_pass, Batch, ClassifierParams, LrSchedule,
    PerSamplePass,
};
use crate::datagen::LabeledDataset;
use crate::error::{Error, Result};
use crate::eval_metrics::{summarize_run, EpochRecord, RunMetrics};
use crate::mwnet::{
    normalization_vjp, normalize_weights, ForwardCache, MwNetParams, MwNetShape, Variant,
};
use crate::nn::{dot, norm_sq, Activation, FlatParams};
use crate::rng::RngState;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    /// Classifier step size α. The training objective is `(1/n) Σ wᵢ ℓᵢ` with
    /// normalized `w`, so plain mean cross-entropy sees an effective rate `α/n`.
    pub alpha: f64,
    /// Weighting-network step size β.
    pub beta: f64,
    /// Bottleneck coefficient λ.
    pub lambda: f64,
    pub train_batch: usize,
    pub meta_batch: usize,
    /// Total iterations T.
    pub total_iters: usize,
    /// The weighting network is updated on iterations `t` with `t % interval == 0`.
    pub mwnet_interval: usize,
    pub mwnet_weight_decay: f64,
    /// L2 coefficient added to the classifier gradient.
    pub weight_decay: f64,
    /// Epochs at which α is divided by `lr_decay_factor`; `None` decays at 60% and 80%.
    pub lr_decay_epochs: Option<Vec<usize>>,
    pub lr_decay_factor: f64,
    pub variant: Variant,
    pub classifier_hidden: Vec<usize>,
    pub mwnet_hidden: usize,
    /// Bottleneck width; `None` uses `K`.
    pub psi_dim: Option<usize>,
    /// Use `ψ = μ` everywhere instead of sampling ε.
    pub deterministic_psi: bool,
    /// Debug: treat `w = w̃` when back-propagating the meta loss.
    pub skip_normalization_jacobian: bool,
    pub init_seed: u64,
    pub epsilon_seed: u64,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            alpha: 10.0,
            beta: 1e-3,
            lambda: 0.0,
            train_batch: 100,
            meta_batch: 40,
            total_iters: 0,
            mwnet_interval: 1,
            mwnet_weight_decay: 0.0,
            weight_decay: 0.0,
            lr_decay_epochs: None,
            lr_decay_factor: 10.0,
            variant: Variant::MetaInfoNet,
            classifier_hidden: vec![64, 64],
            mwnet_hidden: 100,
            psi_dim: None,
            deterministic_psi: false,
            skip_normalization_jacobian: false,
            init_seed: 0,
            epsilon_seed: 0,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!(
                "alpha must be positive, got {}",
                self.alpha
            )));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!(
                "beta must be nonnegative, got {}",
                self.beta
            )));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!(
                "lambda must be nonnegative, got {}",
                self.lambda
            )));
        }
        if self.train_batch == 0 || self.meta_batch == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if self.mwnet_interval == 0 {
            return Err(Error::Config(
                "weighting-network interval must be at least 1".into(),
            ));
        }
        if self.mwnet_weight_decay < 0.0 || self.weight_decay < 0.0 {
            return Err(Error::Config("weight decay must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn mwnet_shape(&self, num_classes: usize) -> MwNetShape {
        MwNetShape {
            variant: self.variant,
            num_classes,
            hidden: self.mwnet_hidden,
            psi_dim: self.psi_dim.unwrap_or(num_classes),
        }
    }

    /// Freshly initialized classifier and weighting network.
    pub fn init_params(
        &self,
        input_dim: usize,
        num_classes: usize,
    ) -> Result<(ClassifierParams, MwNetParams)> {
        let root = RngState::new(self.init_seed);
        let mut dims = vec![input_dim];
        dims.extend(&self.classifier_hidden);
        dims.push(num_classes);
        let classifier =
            ClassifierParams::new(&dims, Activation::Relu, &mut root.split("classifier"))?;
        let mwnet = MwNetParams::init(self.mwnet_shape(num_classes), &mut root.split("mwnet"))?;
        Ok((classifier, mwnet))
    }
}

/// Everything computed on the train batch by the virtual step.
#[derive(Debug, Clone)]
pub struct VirtualCache {
    pub pass: PerSamplePass,
    pub forward: ForwardCache,
    pub raw_weights: Vec<f64>,
    pub weights: Vec<f64>,
    pub epsilon: Option<Vec<Vec<f64>>>,
}

/// `Θ − (α/n) Σ wᵢ gᵢ`.
fn weighted_step(
    theta: &ClassifierParams,
    grads: &[Vec<f64>],
    weights: &[f64],
    alpha: f64,
) -> Result<ClassifierParams> {
    let step = weighted_mean_gradient(grads, weights, theta.num_params());
    crate::classifier::sgd_step(theta, &step, alpha)
}

/// `(1/n) Σ wᵢ gᵢ`.
fn weighted_mean_gradient(grads: &[Vec<f64>], weights: &[f64], len: usize) -> Vec<f64> {
    let mut out = vec![0.0; len];
    if grads.is_empty() {
        return out;
    }
    let inv_n = 1.0 / grads.len() as f64;
    for (g, &w) in grads.iter().zip(weights) {
        if w == 0.0 {
            continue;
        }
        for (o, v) in out.iter_mut().zip(g) {
            *o += w * inv_n * v;
        }
    }
    out
}

/// Computes logits, weights and per-sample gradients on `batch`, and the
/// virtually updated classifier.
pub fn virtual_update(
    theta: &ClassifierParams,
    phi: &MwNetParams,
    batch: &Batch,
    alpha: f64,
    epsilon: Option<&[Vec<f64>]>,
) -> Result<(ClassifierParams, VirtualCache)> {
    if batch.is_empty() {
        return Err(Error::contract("virtual update needs a nonempty batch"));
    }
    let pass = per_sample_pass(theta, batch)?;
    let forward = phi.forward_batch(&pass.logits, &batch.labels, epsilon)?;
    let raw_weights = forward.raw_weights();
    let weights = normalize_weights(&raw_weights)?;
    let theta_hat = weighted_step(theta, &pass.grads, &weights, alpha)?;
    Ok((
        theta_hat,
        VirtualCache {
            pass,
            forward,
            raw_weights,
            weights,
            epsilon: epsilon.map(<[_]>::to_vec),
        },
    ))
}

#[derive(Debug, Clone)]
pub struct MetaGradient {
    pub grad: Vec<f64>,
    pub meta_loss: f64,
    /// Mean KL over the train batch (0 unless metainfonet).
    pub kl_mean: f64,
    /// `⟨gᵢ, ∇_Θ̂ L_meta⟩` per train sample.
    pub alignments: Vec<f64>,
}

/// Exact gradient of `(1/m) Σ L_meta(Θ̂(Φ)) + λ · mean KL(Φ)` with respect to Φ.
pub fn meta_gradient(
    phi: &MwNetParams,
    cache: &VirtualCache,
    theta_hat: &ClassifierParams,
    meta_batch: &Batch,
    alpha: f64,
    lambda: f64,
    skip_normalization_jacobian: bool,
) -> Result<MetaGradient> {
    if meta_batch.is_empty() {
        return Err(Error::contract("meta gradient needs a nonempty meta batch"));
    }
    let n = cache.pass.grads.len() as f64;
    let (meta_loss, g_meta) = mean_loss_gradient(theta_hat, meta_batch)?;
    let alignments: Vec<f64> = cache.pass.grads.iter().map(|g| dot(g, &g_meta)).collect();
    let d_w: Vec<f64> = alignments.iter().map(|a| -alpha / n * a).collect();
    let d_raw = if skip_normalization_jacobian {
        d_w
    } else {
        normalization_vjp(&cache.raw_weights, &d_w)
    };
    let grad = phi.backward(&cache.forward, &d_raw, lambda / n, true)?;
    let kl_mean = cache.forward.kl_values().iter().sum::<f64>() / n;
    Ok(MetaGradient {
        grad,
        meta_loss,
        kl_mean,
        alignments,
    })
}

/// The scalar `meta_gradient` differentiates, evaluated directly from the
/// forward passes (no backward code involved).
pub fn composed_meta_objective(
    theta: &ClassifierParams,
    phi: &MwNetParams,
    batch: &Batch,
    meta_batch: &Batch,
    alpha: f64,
    lambda: f64,
    epsilon: Option<&[Vec<f64>]>,
) -> Result<f64> {
    let (theta_hat, cache) = virtual_update(theta, phi, batch, alpha, epsilon)?;
    let (meta_loss, _) = mean_loss_gradient(&theta_hat, meta_batch)?;
    let kl: f64 = cache.forward.kl_values().iter().sum::<f64>() / batch.len() as f64;
    Ok(meta_loss + lambda * kl)
}

/// Per-iteration record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaStepTrace {
    pub iteration: usize,
    pub mwnet_updated: bool,
    pub weights_before: Vec<f64>,
    pub weights_after: Vec<f64>,
    pub alignments: Vec<f64>,
    pub meta_loss: Option<f64>,
    pub kl_mean: f64,
    pub train_loss: f64,
    pub train_grad_norm_sq: f64,
    pub mwnet_grad_norm_sq: Option<f64>,
}

/// Classifier and weighting network being trained.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaState {
    pub classifier: ClassifierParams,
    pub mwnet: MwNetParams,
    pub iteration: usize,
}

fn ensure_finite(what: &str, values: &[f64]) -> Result<()> {
    match values.iter().find(|v| !v.is_finite()) {
        Some(v) => Err(Error::Numeric(format!("{what} became {v}"))),
        None => Ok(()),
    }
}

/// Runs one iteration on the given batches at classifier rate `alpha` and
/// advances `state`.
pub fn meta_iteration(
    state: &mut MetaState,
    hp: &HyperParams,
    alpha: f64,
    batch: &Batch,
    meta_batch: &Batch,
    epsilon: Option<&[Vec<f64>]>,
) -> Result<MetaStepTrace> {
    let (theta_hat, cache) =
        virtual_update(&state.classifier, &state.mwnet, batch, alpha, epsilon)?;
    ensure_finite("training loss", &cache.pass.losses)?;
    ensure_finite("sample weight", &cache.raw_weights)?;

    let update = state.iteration.is_multiple_of(hp.mwnet_interval) && state.mwnet.num_params() > 0;
    let mut meta_loss = None;
    let mut mwnet_grad_norm_sq = None;
    let mut alignments = Vec::new();
    let mut kl_mean = cache.forward.kl_values().iter().sum::<f64>() / batch.len() as f64;
    let weights_after = if update {
        let mg = meta_gradient(
            &state.mwnet,
            &cache,
            &theta_hat,
            meta_batch,
            alpha,
            hp.lambda,
            hp.skip_normalization_jacobian,
        )?;
        ensure_finite("meta loss", &[mg.meta_loss])?;
        ensure_finite("weighting-network gradient", &mg.grad)?;
        let mut phi = state.mwnet.to_flat();
        for (p, g) in phi.iter_mut().zip(&mg.grad) {
            *p -= hp.beta * (g + hp.mwnet_weight_decay * *p);
        }
        state.mwnet.set_flat(&phi)?;
        meta_loss = Some(mg.meta_loss);
        mwnet_grad_norm_sq = Some(norm_sq(&mg.grad));
        alignments = mg.alignments;
        kl_mean = mg.kl_mean;
        let refreshed = state
            .mwnet
            .forward_batch(&cache.pass.logits, &batch.labels, epsilon)?;
        let raw = refreshed.raw_weights();
        ensure_finite("sample weight", &raw)?;
        normalize_weights(&raw)?
    } else {
        cache.weights.clone()
    };

    let p = state.classifier.num_params();
    let grad = weighted_mean_gradient(&cache.pass.grads, &weights_after, p);
    let train_loss = cache
        .pass
        .losses
        .iter()
        .zip(&weights_after)
        .map(|(l, w)| l * w)
        .sum::<f64>()
        / batch.len() as f64;
    let train_grad_norm_sq = norm_sq(&grad);
    let step: Vec<f64> = if hp.weight_decay > 0.0 {
        grad.iter()
            .zip(state.classifier.to_flat())
            .map(|(g, t)| g + hp.weight_decay * t)
            .collect()
    } else {
        grad
    };
    let next = crate::classifier::sgd_step(&state.classifier, &step, alpha)?;
    ensure_finite("classifier parameter", &next.to_flat())?;
    state.classifier = next;

    let trace = MetaStepTrace {
        iteration: state.iteration,
        mwnet_updated: update,
        weights_before: cache.weights,
        weights_after,
        alignments,
        meta_loss,
        kl_mean,
        train_loss,
        train_grad_norm_sq,
        mwnet_grad_norm_sq,
    };
    state.iteration += 1;
    Ok(trace)
}

/// Raw weights the network assigns to every sample of `ds` (deterministic ψ).
pub fn dataset_weights(
    classifier: &ClassifierParams,
    mwnet: &MwNetParams,
    ds: &LabeledDataset,
) -> Result<Vec<f64>> {
    (0..ds.len())
        .map(|i| {
            let z = classifier.forward_logits(ds.row(i))?;
            mwnet.raw_weight(&z, ds.observed_labels[i], None)
        })
        .collect()
}

/// Hooks for streaming artifacts out of a training run.
pub trait TrainObserver {
    fn on_step(&mut self, _trace: &MetaStepTrace) -> Result<()> {
        Ok(())
    }

    fn on_epoch(&mut self, _record: &EpochRecord, _state: &MetaState) -> Result<()> {
        Ok(())
    }
}

impl TrainObserver for () {}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub classifier: ClassifierParams,
    pub mwnet: MwNetParams,
    pub metrics: RunMetrics,
}

pub fn iterations_per_epoch(num_train: usize, train_batch: usize) -> usize {
    num_train.div_ceil(train_batch).max(1)
}

pub fn train(
    train_ds: &LabeledDataset,
    meta_ds: &LabeledDataset,
    test_ds: &LabeledDataset,
    hp: &HyperParams,
) -> Result<TrainOutcome> {
    train_with(train_ds, meta_ds, test_ds, hp, &mut ())
}

/// Full training run with per-epoch evaluation.
pub fn train_with(
    train_ds: &LabeledDataset,
    meta_ds: &LabeledDataset,
    test_ds: &LabeledDataset,
    hp: &HyperParams,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome> {
    hp.validate()?;
    if meta_ds.corrupted.iter().any(|&c| c) {
        return Err(Error::contract("meta set must be clean"));
    }
    let k = train_ds.num_classes;
    if meta_ds.num_classes != k || test_ds.num_classes != k {
        return Err(Error::data(
            "train, meta and test sets disagree on the number of classes",
        ));
    }
    if meta_ds.dim() != train_ds.dim() || test_ds.dim() != train_ds.dim() {
        return Err(Error::data(
            "train, meta and test sets disagree on the feature dimension",
        ));
    }
    let (classifier, mwnet) = hp.init_params(train_ds.dim(), k)?;
    let mut state = MetaState {
        classifier,
        mwnet,
        iteration: 0,
    };
    let mut metrics = RunMetrics::default();
    if hp.total_iters == 0 {
        return Ok(TrainOutcome {
            classifier: state.classifier,
            mwnet: state.mwnet,
            metrics,
        });
    }
    if hp.train_batch > train_ds.len() {
        return Err(Error::Config(format!(
            "train batch {} exceeds {} training samples",
            hp.train_batch,
            train_ds.len()
        )));
    }
    if hp.meta_batch > meta_ds.len() {
        return Err(Error::Config(format!(
            "meta batch {} exceeds {} meta samples",
            hp.meta_batch,
            meta_ds.len()
        )));
    }
    if test_ds.is_empty() {
        return Err(Error::data("test set is empty"));
    }

    let ipe = iterations_per_epoch(train_ds.len(), hp.train_batch);
    let epochs = hp.total_iters.div_ceil(ipe);
    let schedule = match &hp.lr_decay_epochs {
        Some(e) => LrSchedule::new(hp.alpha, e.clone(), hp.lr_decay_factor)?,
        None => LrSchedule {
            decay_factor: hp.lr_decay_factor,
            ..LrSchedule::scaled_default(hp.alpha, epochs)
        },
    };
    let root = RngState::new(hp.init_seed);
    let mut shuffle_rng = root.split("shuffle");
    let mut meta_rng = root.split("meta-batch");
    let eps_root = RngState::new(hp.epsilon_seed).split("epsilon");
    let psi_dim = state.mwnet.noise_dim();
    let sample_eps = psi_dim > 0 && !hp.deterministic_psi;

    let mut order: Vec<usize> = (0..train_ds.len()).collect();
    let mut acc = EpochAccumulator::default();
    for t in 0..hp.total_iters {
        let epoch = t / ipe;
        let slot = t % ipe;
        if slot == 0 {
            shuffle_rng.shuffle(&mut order);
        }
        let lo = slot * hp.train_batch;
        let hi = (lo + hp.train_batch).min(order.len());
        let batch = Batch::from_dataset(train_ds, &order[lo..hi]);
        let meta_idx = meta_rng.sample_without_replacement(meta_ds.len(), hp.meta_batch);
        let meta_batch = Batch::from_dataset(meta_ds, &meta_idx);
        let eps = sample_eps.then(|| {
            let mut rng = eps_root.split_indexed("iteration", t as u64);
            (0..batch.len())
                .map(|_| rng.standard_normal(psi_dim))
                .collect::<Vec<_>>()
        });
        let alpha = schedule.rate_at(epoch);
        let trace = meta_iteration(&mut state, hp, alpha, &batch, &meta_batch, eps.as_deref())?;
        acc.push(&trace);
        metrics
            .iteration_grad_norm_sq
            .push(trace.train_grad_norm_sq);
        observer.on_step(&trace)?;

        if slot + 1 == ipe || t + 1 == hp.total_iters {
            let weights = dataset_weights(&state.classifier, &state.mwnet, train_ds)?;
            ensure_finite("sample weight", &weights)?;
            let sep = crate::eval_metrics::weight_separation(&weights, &train_ds.corrupted)?;
            let kl_mean = if psi_dim > 0 {
                dataset_kl_mean(&state.classifier, &state.mwnet, train_ds)?
            } else {
                0.0
            };
            let record = EpochRecord {
                epoch,
                train_loss: acc.train_loss(),
                test_acc: evaluate_accuracy(&state.classifier, test_ds)?,
                meta_val_acc: evaluate_accuracy(&state.classifier, meta_ds)?,
                mean_weight_clean: sep.mean_clean,
                mean_weight_corrupted: sep.mean_corrupted,
                kl_mean,
                grad_norm_sq: acc.grad_norm_sq(),
            };
            observer.on_epoch(&record, &state)?;
            metrics.epochs.push(record);
            acc = EpochAccumulator::default();
        }
    }
    metrics.summary = Some(summarize_run(&metrics.epochs)?);
    Ok(TrainOutcome {
        classifier: state.classifier,
        mwnet: state.mwnet,
        metrics,
    })
}

fn dataset_kl_mean(
    classifier: &ClassifierParams,
    mwnet: &MwNetParams,
    ds: &LabeledDataset,
) -> Result<f64> {
    if ds.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for i in 0..ds.len() {
        let z = classifier.forward_logits(ds.row(i))?;
        total += mwnet.forward_sample(&z, ds.observed_labels[i], None)?.kl();
    }
    Ok(total / ds.len() as f64)
}

#[derive(Default)]
struct EpochAccumulator {
    loss_sum: f64,
    grad_sum: f64,
    steps: usize,
}

impl EpochAccumulator {
    fn push(&mut self, trace: &MetaStepTrace) {
        self.loss_sum += trace.train_loss;
        self.grad_sum += trace.train_grad_norm_sq;
        self.steps += 1;
    }

    fn train_loss(&self) -> f64 {
        self.loss_sum / self.steps.max(1) as f64
    }

    fn grad_norm_sq(&self) -> f64 {
        self.grad_sum / self.steps.max(1) as f64
    }
}
