//! TOML experiment configuration.
//!
//! Every key has a default and unknown keys are rejected. The defaults
//! describe the desk-scale flip-1 experiment: a 4-class 2-D Gaussian
//! mixture with 40% flip-1 noise, 10 clean meta samples per class and a
//! metainfonet weighting network.
//!
//! ```toml
//! [data]
//! source = "mixture"          # or "csv"
//! num_classes = 4
//! train_per_class = 500
//!
//! [data.bias]
//! kind = "flip1"              # none | uniform | flip1 | flip2 | longtail
//! noise_rate = 0.4
//!
//! [model]
//! variant = "metainfonet"     # standard | lossnet | logitnet | metainfonet
//!
//! [optim]
//! lambda = 0.01
//! epochs = 60
//!
//! [sweep]
//! seeds = [0, 1, 2, 3, 4]
//! axes = { "optim.lambda" = [0.0, 0.01, 0.03, 0.1, 0.3, 1.0] }
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datagen::{BiasKind, BiasSpec};
use crate::error::{Error, Result};
use crate::gradcheck::{CheckOptions, TinySpec};
use crate::meta_train::{iterations_per_epoch, HyperParams};
use crate::mwnet::Variant;

/// Bottleneck coefficients searched in the reference experiments.
pub const LAMBDA_GRID: [f64; 6] = [0.0, 0.01, 0.03, 0.1, 0.3, 1.0];

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub output: OutputConfig,
    pub seeds: SeedConfig,
    pub gradcheck: GradcheckConfig,
    pub sweep: SweepConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Mixture,
    Csv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataSource,
    pub num_classes: usize,
    pub dim: usize,
    /// Class means sit evenly on a circle of this radius (first two coordinates).
    pub radius: f64,
    pub scale: f64,
    /// Clean training samples per class before bias is applied.
    pub train_per_class: usize,
    pub meta_per_class: usize,
    pub test_per_class: usize,
    pub train_csv: Option<PathBuf>,
    /// Without `meta_csv` the meta set is split off the training CSV.
    pub meta_csv: Option<PathBuf>,
    pub test_csv: Option<PathBuf>,
    pub csv_has_clean_column: bool,
    pub bias: BiasConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Mixture,
            num_classes: 4,
            dim: 2,
            radius: 3.0,
            scale: 1.0,
            train_per_class: 500,
            meta_per_class: 10,
            test_per_class: 500,
            train_csv: None,
            meta_csv: None,
            test_csv: None,
            csv_has_clean_column: true,
            bias: BiasConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BiasConfig {
    pub kind: BiasKind,
    pub noise_rate: f64,
    pub imbalance_factor: f64,
    /// Per-class target rows; flip-1 reads one class per row, flip-2 two.
    pub flip_targets: Option<Vec<Vec<usize>>>,
    pub long_tail_max: Option<usize>,
}

impl Default for BiasConfig {
    fn default() -> Self {
        Self {
            kind: BiasKind::Flip1,
            noise_rate: 0.4,
            imbalance_factor: 100.0,
            flip_targets: None,
            long_tail_max: None,
        }
    }
}

impl BiasConfig {
    pub fn spec(&self) -> BiasSpec {
        BiasSpec {
            kind: self.kind,
            noise_rate: self.noise_rate,
            imbalance_factor: self.imbalance_factor,
            flip_targets: self.flip_targets.clone(),
            long_tail_max: self.long_tail_max,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub variant: Variant,
    pub classifier_hidden: Vec<usize>,
    pub mwnet_hidden: usize,
    /// Bottleneck width; defaults to the number of classes.
    pub psi_dim: Option<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::MetaInfoNet,
            classifier_hidden: vec![64, 64],
            mwnet_hidden: 100,
            psi_dim: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    /// Classifier step size on the `(1/n) Σ wᵢ ℓᵢ` objective with normalized
    /// weights; `alpha / train_batch` is the equivalent mean-loss rate.
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
    pub train_batch: usize,
    pub meta_batch: usize,
    pub epochs: usize,
    /// Overrides `epochs` when set.
    pub total_iters: Option<usize>,
    pub mwnet_interval: usize,
    pub mwnet_weight_decay: f64,
    pub weight_decay: f64,
    /// Defaults to decays at 60% and 80% of the epochs.
    pub lr_decay_epochs: Option<Vec<usize>>,
    pub lr_decay_factor: f64,
    pub deterministic_psi: bool,
    pub skip_normalization_jacobian: bool,
}

impl Default for OptimConfig {
    fn default() -> Self {
        let hp = HyperParams::default();
        Self {
            alpha: hp.alpha,
            beta: hp.beta,
            lambda: hp.lambda,
            train_batch: hp.train_batch,
            meta_batch: hp.meta_batch,
            epochs: 60,
            total_iters: None,
            mwnet_interval: hp.mwnet_interval,
            mwnet_weight_decay: hp.mwnet_weight_decay,
            weight_decay: hp.weight_decay,
            lr_decay_epochs: None,
            lr_decay_factor: hp.lr_decay_factor,
            deterministic_psi: false,
            skip_normalization_jacobian: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: PathBuf,
    /// Write one JSON line per iteration to `trace.jsonl`.
    pub trace: bool,
    /// Epochs after which per-sample weights are dumped.
    pub weight_dump_epochs: Vec<usize>,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("runs/default"),
            trace: false,
            weight_dump_epochs: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SeedConfig {
    pub data: u64,
    pub init: u64,
    pub noise: u64,
    pub epsilon: u64,
}

impl SeedConfig {
    pub fn all(seed: u64) -> Self {
        Self {
            data: seed,
            init: seed,
            noise: seed,
            epsilon: seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckConfig {
    pub classifier_dims: Vec<usize>,
    pub mwnet_hidden: usize,
    pub psi_dim: usize,
    pub train_batch: usize,
    pub meta_batch: usize,
    pub alpha: f64,
    pub seed: u64,
    pub step: f64,
    pub floor: f64,
    pub tolerance: f64,
    /// Debug: perturb this block's analytic gradient (negative control).
    pub corrupt_block: Option<String>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        let tiny = TinySpec::default();
        let opts = CheckOptions::default();
        Self {
            classifier_dims: tiny.classifier_dims,
            mwnet_hidden: tiny.mwnet_hidden,
            psi_dim: tiny.psi_dim,
            train_batch: tiny.train_batch,
            meta_batch: tiny.meta_batch,
            alpha: tiny.alpha,
            seed: tiny.seed,
            step: opts.step,
            floor: opts.floor,
            tolerance: opts.tolerance,
            corrupt_block: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub seeds: Vec<u64>,
    /// Dotted config key to the values it takes; runs cover the cross product.
    pub axes: BTreeMap<String, Vec<toml::Value>>,
    /// Worker threads; 0 uses all cores.
    pub threads: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2, 3, 4],
            axes: BTreeMap::new(),
            threads: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Fully materialized TOML, defaults included.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("serializing config: {e}")))
    }

    pub fn set_all_seeds(&mut self, seed: u64) {
        self.seeds = SeedConfig::all(seed);
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if d.num_classes < 2 {
            return Err(Error::Config("data.num_classes must be at least 2".into()));
        }
        if d.source == DataSource::Mixture {
            if d.dim == 0 {
                return Err(Error::Config("data.dim must be positive".into()));
            }
            if !(d.scale > 0.0 && d.scale.is_finite() && d.radius.is_finite()) {
                return Err(Error::Config(
                    "data.scale must be positive and data.radius finite".into(),
                ));
            }
            if d.train_per_class == 0 || d.test_per_class == 0 {
                return Err(Error::Config(
                    "data.train_per_class and data.test_per_class must be positive".into(),
                ));
            }
        } else if d.train_csv.is_none() || d.test_csv.is_none() {
            return Err(Error::Config(
                "data.source = \"csv\" needs data.train_csv and data.test_csv".into(),
            ));
        }
        if d.meta_per_class == 0 && d.meta_csv.is_none() {
            return Err(Error::Config("data.meta_per_class must be positive".into()));
        }
        if !(0.0..=1.0).contains(&d.bias.noise_rate) {
            return Err(Error::Config(format!(
                "data.bias.noise_rate {} is outside [0, 1]",
                d.bias.noise_rate
            )));
        }
        if !(d.bias.imbalance_factor >= 1.0 && d.bias.imbalance_factor.is_finite()) {
            return Err(Error::Config(
                "data.bias.imbalance_factor must be at least 1".into(),
            ));
        }
        if self.model.classifier_hidden.contains(&0) {
            return Err(Error::Config(
                "model.classifier_hidden widths must be positive".into(),
            ));
        }
        if self.model.mwnet_hidden == 0 {
            return Err(Error::Config("model.mwnet_hidden must be positive".into()));
        }
        if self.model.psi_dim == Some(0) {
            return Err(Error::Config("model.psi_dim must be positive".into()));
        }
        if self.optim.lr_decay_factor <= 0.0 || !self.optim.lr_decay_factor.is_finite() {
            return Err(Error::Config(
                "optim.lr_decay_factor must be positive".into(),
            ));
        }
        for (name, v) in [
            ("data", self.seeds.data),
            ("init", self.seeds.init),
            ("noise", self.seeds.noise),
            ("epsilon", self.seeds.epsilon),
        ] {
            if v > i64::MAX as u64 {
                return Err(Error::Config(format!(
                    "seeds.{name} must fit in a signed 64-bit integer"
                )));
            }
        }
        self.hyper_params(d.train_per_class.max(1) * d.num_classes)?
            .validate()?;
        for key in self.sweep.axes.keys() {
            let values = &self.sweep.axes[key];
            if values.is_empty() {
                return Err(Error::Config(format!("sweep axis '{key}' has no values")));
            }
            let mut probe = self.clone();
            probe.sweep = SweepConfig::default();
            probe.apply_override(key, values[0].clone())?;
        }
        Ok(())
    }

    /// Advisory messages for settings outside the reference search space.
    pub fn warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        let off_grid = |l: f64| {
            !LAMBDA_GRID
                .iter()
                .any(|g| (g - l).abs() <= 1e-12 * g.max(1.0))
        };
        if off_grid(self.optim.lambda) {
            out.push(format!(
                "optim.lambda = {} is outside the reference grid {LAMBDA_GRID:?}",
                self.optim.lambda
            ));
        }
        if let Some(values) = self.sweep.axes.get("optim.lambda") {
            for v in values {
                if let Some(l) = v.as_float().or(v.as_integer().map(|i| i as f64)) {
                    if off_grid(l) {
                        out.push(format!(
                            "sweep value optim.lambda = {l} is outside the reference grid"
                        ));
                    }
                }
            }
        }
        out
    }

    /// Sets a dotted key (for example `optim.lambda`) to `value`. The parent
    /// table must exist and the result must still be a valid config.
    pub fn apply_override(&mut self, key: &str, value: toml::Value) -> Result<()> {
        let mut root = toml::Value::try_from(&*self).map_err(|e| Error::Config(e.to_string()))?;
        let parts: Vec<&str> = key.split('.').collect();
        if parts.iter().any(|p| p.is_empty()) {
            return Err(Error::Config(format!("invalid override key '{key}'")));
        }
        let (leaf, parents) = parts.split_last().expect("split yields at least one part");
        let mut node = &mut root;
        for p in parents {
            node = node
                .get_mut(*p)
                .filter(|n| n.is_table())
                .ok_or_else(|| Error::Config(format!("override '{key}': no section '{p}'")))?;
        }
        let table = node.as_table_mut().expect("checked above");
        if let (Some(toml::Value::Float(_)), toml::Value::Integer(i)) = (table.get(*leaf), &value) {
            table.insert(leaf.to_string(), toml::Value::Float(*i as f64));
        } else {
            table.insert(leaf.to_string(), value);
        }
        let next: Self = root.try_into().map_err(|e: toml::de::Error| {
            Error::Config(format!("override '{key}': {}", e.message()))
        })?;
        *self = next;
        Ok(())
    }

    /// Parses `key=value` with `value` in TOML syntax (bare words become strings).
    pub fn apply_override_str(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override '{assignment}' is not key=value")))?;
        self.apply_override(key.trim(), parse_value(raw.trim()))
    }

    /// Hyperparameters for a training set of `num_train` samples.
    pub fn hyper_params(&self, num_train: usize) -> Result<HyperParams> {
        let o = &self.optim;
        let ipe = iterations_per_epoch(num_train, o.train_batch.max(1));
        let total_iters = match o.total_iters {
            Some(t) => t,
            None => o
                .epochs
                .checked_mul(ipe)
                .ok_or_else(|| Error::Config("optim.epochs is too large".into()))?,
        };
        Ok(HyperParams {
            alpha: o.alpha,
            beta: o.beta,
            lambda: o.lambda,
            train_batch: o.train_batch,
            meta_batch: o.meta_batch,
            total_iters,
            mwnet_interval: o.mwnet_interval,
            mwnet_weight_decay: o.mwnet_weight_decay,
            weight_decay: o.weight_decay,
            lr_decay_epochs: o.lr_decay_epochs.clone(),
            lr_decay_factor: o.lr_decay_factor,
            variant: self.model.variant,
            classifier_hidden: self.model.classifier_hidden.clone(),
            mwnet_hidden: self.model.mwnet_hidden,
            psi_dim: self.model.psi_dim,
            deterministic_psi: o.deterministic_psi,
            skip_normalization_jacobian: o.skip_normalization_jacobian,
            init_seed: self.seeds.init,
            epsilon_seed: self.seeds.epsilon,
        })
    }

    pub fn tiny_spec(&self) -> TinySpec {
        let g = &self.gradcheck;
        TinySpec {
            classifier_dims: g.classifier_dims.clone(),
            variant: self.model.variant,
            mwnet_hidden: g.mwnet_hidden,
            psi_dim: g.psi_dim,
            train_batch: g.train_batch,
            meta_batch: g.meta_batch,
            alpha: g.alpha,
            lambda: self.optim.lambda,
            seed: g.seed,
        }
    }

    pub fn check_options(&self) -> CheckOptions {
        CheckOptions {
            step: self.gradcheck.step,
            floor: self.gradcheck.floor,
            tolerance: self.gradcheck.tolerance,
            corrupt_block: self.gradcheck.corrupt_block.clone(),
        }
    }
}

/// Reads a TOML scalar or array; anything unparseable is taken as a string.
pub fn parse_value(raw: &str) -> toml::Value {
    #[derive(Deserialize)]
    struct Probe {
        v: toml::Value,
    }
    toml::from_str::<Probe>(&format!("v = {raw}"))
        .map(|p| p.v)
        .unwrap_or_else(|_| toml::Value::String(raw.to_string()))
}

/// Human-readable form of an override value for labels and CSV keys.
pub fn display_value(v: &toml::Value) -> String {
    match v {
        toml::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = ExperimentConfig::from_toml("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!(cfg.data.bias.kind, BiasKind::Flip1);
        assert_eq!(cfg.model.variant, Variant::MetaInfoNet);
    }

    #[test]
    fn roundtrip_is_a_fixed_point() {
        let mut cfg = ExperimentConfig::default();
        cfg.optim.beta = 0.1 + 0.2;
        cfg.optim.lr_decay_epochs = Some(vec![3, 7]);
        cfg.sweep
            .axes
            .insert("optim.lambda".into(), vec![toml::Value::Float(0.03)]);
        let text = cfg.to_toml().unwrap();
        let back = ExperimentConfig::from_toml(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_toml().unwrap(), text);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(ExperimentConfig::from_toml("[optim]\nlamda = 0.1\n").is_err());
        assert!(ExperimentConfig::from_toml("[nonsense]\n").is_err());
    }

    #[test]
    fn overrides_touch_existing_keys_only() {
        let mut cfg = ExperimentConfig::default();
        cfg.apply_override_str("optim.lambda=0.3").unwrap();
        assert_eq!(cfg.optim.lambda, 0.3);
        cfg.apply_override_str("optim.lambda=1").unwrap();
        assert_eq!(cfg.optim.lambda, 1.0);
        cfg.apply_override_str("model.variant=lossnet").unwrap();
        assert_eq!(cfg.model.variant, Variant::LossNet);
        cfg.apply_override_str("optim.total_iters=5").unwrap();
        assert_eq!(cfg.optim.total_iters, Some(5));
        assert!(cfg.apply_override_str("optim.nope=1").is_err());
        assert!(cfg.apply_override_str("nosection.x=1").is_err());
        assert!(cfg.apply_override_str("model.variant=resnet").is_err());
    }

    #[test]
    fn lambda_off_grid_warns() {
        let mut cfg = ExperimentConfig::default();
        assert!(cfg.warnings().is_empty());
        cfg.optim.lambda = 0.05;
        assert_eq!(cfg.warnings().len(), 1);
    }

    #[test]
    fn invalid_values_are_config_errors() {
        assert!(matches!(
            ExperimentConfig::from_toml("[optim]\nalpha = -1.0\n"),
            Err(Error::Config(_))
        ));
        assert!(ExperimentConfig::from_toml("[data]\nsource = \"csv\"\n").is_err());
        assert!(
            ExperimentConfig::from_toml("[sweep]\naxes = { \"optim.bogus\" = [1] }\n").is_err()
        );
    }

    #[test]
    fn total_iters_follow_epochs() {
        let cfg = ExperimentConfig::default();
        assert_eq!(cfg.hyper_params(2000).unwrap().total_iters, 60 * 20);
        assert_eq!(cfg.hyper_params(2050).unwrap().total_iters, 60 * 21);
    }
}
