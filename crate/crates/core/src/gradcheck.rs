//! Central finite differences and the error metric used to compare them with
//! analytic gradients, plus the hypergradient check on a tiny instance.

use serde::{Deserialize, Serialize};

use crate::classifier::{Batch, ClassifierParams};
use crate::error::{Error, Result};
use crate::meta_train::{composed_meta_objective, meta_gradient, virtual_update};
use crate::mwnet::{MwNetParams, MwNetShape, Variant};
use crate::nn::{Activation, FlatParams, Matrix};
use crate::rng::RngState;

/// Central differences of `f` at `x` with step `h`, one coordinate at a time.
pub fn central_difference<F>(mut f: F, x: &[f64], h: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let plus = f(&probe);
            probe[i] = orig - h;
            let minus = f(&probe);
            probe[i] = orig;
            (plus - minus) / (2.0 * h)
        })
        .collect()
}

/// `|a − b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    let denom = a.abs().max(b.abs()).max(floor);
    (a - b).abs() / denom
}

/// Largest [`relative_error`] over paired slices, with its index.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> (f64, usize) {
    analytic
        .iter()
        .zip(numeric)
        .enumerate()
        .map(|(i, (&a, &n))| (relative_error(a, n, floor), i))
        .fold(
            (0.0, 0),
            |best, cur| if cur.0 > best.0 { cur } else { best },
        )
}

/// Largest weighting network the finite-difference check will run on.
pub const MAX_CHECK_PARAMS: usize = 500;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TinySpec {
    pub classifier_dims: Vec<usize>,
    pub variant: Variant,
    pub mwnet_hidden: usize,
    pub psi_dim: usize,
    pub train_batch: usize,
    pub meta_batch: usize,
    pub alpha: f64,
    pub lambda: f64,
    pub seed: u64,
}

impl Default for TinySpec {
    fn default() -> Self {
        Self {
            classifier_dims: vec![2, 3, 2],
            variant: Variant::MetaInfoNet,
            mwnet_hidden: 8,
            psi_dim: 2,
            train_batch: 4,
            meta_batch: 3,
            alpha: 1.0,
            lambda: 0.0,
            seed: 7,
        }
    }
}

/// Fixed classifier, weighting network, batches and ε for gradient checks.
#[derive(Debug, Clone)]
pub struct TinyInstance {
    pub theta: ClassifierParams,
    pub phi: MwNetParams,
    pub batch: Batch,
    pub meta_batch: Batch,
    pub epsilon: Option<Vec<Vec<f64>>>,
    pub alpha: f64,
    pub lambda: f64,
}

fn random_batch(rng: &mut RngState, n: usize, d: usize, k: usize) -> Result<Batch> {
    let mut data = Vec::with_capacity(n * d);
    for _ in 0..n {
        data.extend(rng.standard_normal(d).into_iter().map(|v| 1.5 * v));
    }
    let labels = (0..n).map(|_| rng.below(k)).collect();
    Batch::new(Matrix::from_vec(n, d, data)?, labels)
}

impl TinyInstance {
    pub fn build(spec: &TinySpec) -> Result<Self> {
        let dims = &spec.classifier_dims;
        if dims.len() < 2 {
            return Err(Error::Config(
                "classifier needs input and output dims".into(),
            ));
        }
        let (d, k) = (dims[0], dims[dims.len() - 1]);
        let root = RngState::new(spec.seed);
        let theta = ClassifierParams::new(dims, Activation::Tanh, &mut root.split("classifier"))?;
        let shape = MwNetShape {
            variant: spec.variant,
            num_classes: k,
            hidden: spec.mwnet_hidden,
            psi_dim: spec.psi_dim,
        };
        let phi = MwNetParams::init(shape, &mut root.split("mwnet"))?;
        if phi.num_params() > MAX_CHECK_PARAMS {
            return Err(Error::Config(format!(
                "weighting network has {} parameters; the finite-difference check is limited to {MAX_CHECK_PARAMS}",
                phi.num_params()
            )));
        }
        let batch = random_batch(&mut root.split("train"), spec.train_batch, d, k)?;
        let meta_batch = random_batch(&mut root.split("meta"), spec.meta_batch, d, k)?;
        let noise_dim = phi.noise_dim();
        let epsilon = (noise_dim > 0).then(|| {
            let mut rng = root.split("epsilon");
            (0..spec.train_batch)
                .map(|_| rng.standard_normal(noise_dim))
                .collect()
        });
        Ok(Self {
            theta,
            phi,
            batch,
            meta_batch,
            epsilon,
            alpha: spec.alpha,
            lambda: spec.lambda,
        })
    }

    pub fn objective(&self, phi_flat: &[f64]) -> Result<f64> {
        let mut phi = self.phi.clone();
        phi.set_flat(phi_flat)?;
        composed_meta_objective(
            &self.theta,
            &phi,
            &self.batch,
            &self.meta_batch,
            self.alpha,
            self.lambda,
            self.epsilon.as_deref(),
        )
    }

    pub fn analytic_gradient(&self) -> Result<Vec<f64>> {
        let (theta_hat, cache) = virtual_update(
            &self.theta,
            &self.phi,
            &self.batch,
            self.alpha,
            self.epsilon.as_deref(),
        )?;
        Ok(meta_gradient(
            &self.phi,
            &cache,
            &theta_hat,
            &self.meta_batch,
            self.alpha,
            self.lambda,
            false,
        )?
        .grad)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockReport {
    pub name: String,
    pub params: usize,
    pub max_rel_err: f64,
    /// Offset of the worst coordinate within the block.
    pub worst_index: usize,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HypergradReport {
    pub variant: Variant,
    pub lambda: f64,
    pub step: f64,
    pub tolerance: f64,
    pub blocks: Vec<BlockReport>,
    pub max_rel_err: f64,
    pub passed: bool,
}

impl HypergradReport {
    pub fn failing_blocks(&self) -> Vec<&str> {
        self.blocks
            .iter()
            .filter(|b| !b.passed)
            .map(|b| b.name.as_str())
            .collect()
    }
}

/// Settings for [`check_hypergradient`].
#[derive(Debug, Clone, PartialEq)]
pub struct CheckOptions {
    pub step: f64,
    pub floor: f64,
    pub tolerance: f64,
    /// Debug: perturb the analytic gradient of this block before comparing.
    pub corrupt_block: Option<String>,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            floor: 1e-7,
            tolerance: 1e-4,
            corrupt_block: None,
        }
    }
}

/// Compares the analytic hypergradient with central differences of the
/// composed objective, block by block.
pub fn check_hypergradient(inst: &TinyInstance, opts: &CheckOptions) -> Result<HypergradReport> {
    let mut analytic = inst.analytic_gradient()?;
    let flat = inst.phi.to_flat();
    let blocks = inst.phi.blocks();
    if let Some(name) = &opts.corrupt_block {
        let (_, range) = blocks
            .iter()
            .find(|(n, _)| n == name)
            .ok_or_else(|| Error::Config(format!("no parameter block named '{name}'")))?;
        for g in &mut analytic[range.clone()] {
            *g = *g * 1.5 + 1e-3;
        }
    }
    let mut failure = None;
    let numeric = central_difference(
        |p| match inst.objective(p) {
            Ok(v) => v,
            Err(e) => {
                failure.get_or_insert(e);
                f64::NAN
            }
        },
        &flat,
        opts.step,
    );
    if let Some(e) = failure {
        return Err(e);
    }
    let reports: Vec<BlockReport> = blocks
        .into_iter()
        .map(|(name, range)| {
            let (err, idx) = max_relative_error(
                &analytic[range.clone()],
                &numeric[range.clone()],
                opts.floor,
            );
            BlockReport {
                name,
                params: range.len(),
                max_rel_err: err,
                worst_index: idx,
                passed: err <= opts.tolerance,
            }
        })
        .collect();
    let max_rel_err = reports.iter().map(|b| b.max_rel_err).fold(0.0, f64::max);
    Ok(HypergradReport {
        variant: inst.phi.variant(),
        lambda: inst.lambda,
        step: opts.step,
        tolerance: opts.tolerance,
        passed: reports.iter().all(|b| b.passed),
        blocks: reports,
        max_rel_err,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let g = central_difference(|x| x[0] * x[0] + 3.0 * x[1], &[2.0, -1.0], 1e-3);
        assert!((g[0] - 4.0).abs() < 1e-9);
        assert!((g[1] - 3.0).abs() < 1e-9);
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0, 1e-8), 0.0);
        assert!((relative_error(1e-12, 0.0, 1e-8) - 1e-4).abs() < 1e-18);
        assert!((relative_error(1.0, 1.1, 1e-8) - 0.1 / 1.1).abs() < 1e-15);
    }

    fn run(variant: Variant, lambda: f64) -> HypergradReport {
        let spec = TinySpec {
            variant,
            lambda,
            ..TinySpec::default()
        };
        check_hypergradient(
            &TinyInstance::build(&spec).unwrap(),
            &CheckOptions::default(),
        )
        .unwrap()
    }

    #[test]
    fn hypergradient_matches_finite_differences() {
        for (variant, lambda) in [
            (Variant::LossNet, 0.0),
            (Variant::LogitNet, 0.0),
            (Variant::MetaInfoNet, 0.0),
            (Variant::MetaInfoNet, 0.1),
        ] {
            let r = run(variant, lambda);
            assert!(r.passed, "{variant} λ={lambda}: {:?}", r.blocks);
        }
    }

    #[test]
    fn corrupted_block_is_named() {
        let spec = TinySpec::default();
        let opts = CheckOptions {
            corrupt_block: Some("ib_logvar".into()),
            ..CheckOptions::default()
        };
        let r = check_hypergradient(&TinyInstance::build(&spec).unwrap(), &opts).unwrap();
        assert!(!r.passed);
        assert_eq!(r.failing_blocks(), vec!["ib_logvar"]);
    }

    #[test]
    fn oversize_network_is_refused() {
        let spec = TinySpec {
            mwnet_hidden: 200,
            ..TinySpec::default()
        };
        assert!(matches!(TinyInstance::build(&spec), Err(Error::Config(_))));
    }
}
