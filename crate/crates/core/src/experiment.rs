//! Experiment harness: dataset pipeline, run directories, sweeps and the
//! hypergradient check.
//!
//! A run directory holds:
//!
//! | file | contents |
//! |------|----------|
//! | `config.toml` | the fully resolved config |
//! | `provenance.json` | data settings, seeds, sizes and realized noise rate |
//! | `metrics.csv` | one row per epoch |
//! | `summary.json` | Best/Last summary (`null` fields when no epoch ran) |
//! | `classifier.json`, `mwnet.json` | final checkpoints |
//! | `weights_epoch<E>.csv` | per-sample weights after epoch `E`, when configured |
//! | `trace.jsonl` | one record per iteration, when tracing |

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::{display_value, DataConfig, DataSource, ExperimentConfig, SeedConfig};
use crate::datagen::{
    apply_bias, circle_means, generate_mixture, load_csv_dataset, save_csv_dataset, split_meta_set,
    BiasKind, LabeledDataset, MixtureSpec,
};
use crate::error::{Error, Result};
use crate::eval_metrics::{save_metrics_csv, EpochRecord, RunMetrics, RunSummary};
use crate::gradcheck::{check_hypergradient, HypergradReport, TinyInstance};
use crate::meta_train::{
    dataset_weights, train_with, MetaState, MetaStepTrace, TrainObserver, TrainOutcome,
};
use crate::mwnet::normalize_weights;
use crate::rng::RngState;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub data: DataConfig,
    pub seeds: SeedConfig,
    pub train_size: usize,
    pub meta_size: usize,
    pub test_size: usize,
    pub realized_noise_rate: f64,
    pub train_class_counts: Vec<usize>,
    pub meta_class_counts: Vec<usize>,
    pub test_class_counts: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct PreparedData {
    pub train: LabeledDataset,
    pub meta: LabeledDataset,
    pub test: LabeledDataset,
    pub provenance: Provenance,
}

fn mixture_means(d: &DataConfig) -> Vec<Vec<f64>> {
    circle_means(d.num_classes, d.radius)
        .into_iter()
        .map(|mut m| {
            m.resize(d.dim, 0.0);
            m
        })
        .collect()
}

/// Builds train/meta/test sets. The meta set is drawn from clean samples
/// before the bias is applied; the test set is balanced and clean.
pub fn prepare_data(cfg: &ExperimentConfig) -> Result<PreparedData> {
    let d = &cfg.data;
    let root = RngState::new(cfg.seeds.data);
    let mut bias_rng = RngState::new(cfg.seeds.noise).split("bias");
    let k = d.num_classes;
    let (train_clean, meta, test) = match d.source {
        DataSource::Mixture => {
            let means = mixture_means(d);
            let pool = generate_mixture(
                &MixtureSpec {
                    class_means: means.clone(),
                    class_scale: d.scale,
                    samples_per_class: vec![d.train_per_class + d.meta_per_class; k],
                },
                &mut root.split("train-pool"),
            )?;
            let (train, meta) =
                split_meta_set(&pool, d.meta_per_class, &mut root.split("meta-split"))?;
            let test = generate_mixture(
                &MixtureSpec {
                    class_means: means,
                    class_scale: d.scale,
                    samples_per_class: vec![d.test_per_class; k],
                },
                &mut root.split("test"),
            )?;
            (train, meta, test)
        }
        DataSource::Csv => {
            let load = |p: &Option<PathBuf>, what: &str| -> Result<LabeledDataset> {
                let path = p.as_ref().ok_or_else(|| {
                    Error::Config(format!("data.{what}_csv is required for csv data"))
                })?;
                load_csv_dataset(path, d.csv_has_clean_column, Some(k))
            };
            let train_all = load(&d.train_csv, "train")?;
            let test = load(&d.test_csv, "test")?;
            let (train, meta) = match &d.meta_csv {
                Some(_) => {
                    let meta = load(&d.meta_csv, "meta")?;
                    if meta.corrupted.iter().any(|&c| c) {
                        return Err(Error::data(
                            "meta CSV contains corrupted labels; the meta set must be clean",
                        ));
                    }
                    (train_all, meta)
                }
                None => {
                    split_meta_set(&train_all, d.meta_per_class, &mut root.split("meta-split"))?
                }
            };
            (train, meta, test)
        }
    };
    let train = if d.bias.kind == BiasKind::None {
        train_clean
    } else {
        apply_bias(&train_clean, &d.bias.spec(), &mut bias_rng)?
    };
    if train.is_empty() || meta.is_empty() || test.is_empty() {
        return Err(Error::data(format!(
            "empty split: {} train, {} meta, {} test samples",
            train.len(),
            meta.len(),
            test.len()
        )));
    }
    let provenance = Provenance {
        data: d.clone(),
        seeds: cfg.seeds.clone(),
        train_size: train.len(),
        meta_size: meta.len(),
        test_size: test.len(),
        realized_noise_rate: train.corrupted_fraction(),
        train_class_counts: train.observed_counts(),
        meta_class_counts: meta.observed_counts(),
        test_class_counts: test.observed_counts(),
    };
    Ok(PreparedData {
        train,
        meta,
        test,
        provenance,
    })
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Data(format!("encoding JSON: {e}")))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes `train.csv`, `meta.csv`, `test.csv` and `provenance.json`.
pub fn write_datasets(data: &PreparedData, dir: &Path) -> Result<()> {
    create_dir(dir)?;
    save_csv_dataset(&data.train, &dir.join("train.csv"), true)?;
    save_csv_dataset(&data.meta, &dir.join("meta.csv"), true)?;
    save_csv_dataset(&data.test, &dir.join("test.csv"), true)?;
    write_json(&dir.join("provenance.json"), &data.provenance)
}

/// `summary.json`; fields are `null` for a run without epochs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryFile {
    pub epochs: usize,
    pub best_test_acc: Option<f64>,
    pub best_epoch: Option<usize>,
    pub last10_mean_acc: Option<f64>,
    pub best_meta_val_acc: Option<f64>,
}

impl SummaryFile {
    pub fn from_summary(summary: Option<&RunSummary>) -> Self {
        Self {
            epochs: summary.map_or(0, |s| s.epochs),
            best_test_acc: summary.map(|s| s.best_test_acc),
            best_epoch: summary.map(|s| s.best_epoch),
            last10_mean_acc: summary.map(|s| s.last10_mean_acc),
            best_meta_val_acc: summary.map(|s| s.best_meta_val_acc),
        }
    }
}

/// Writes `sample_index,raw_weight,normalized_weight,corrupted`.
pub fn write_weight_dump(path: &Path, raw: &[f64], corrupted: &[bool]) -> Result<()> {
    let normalized = normalize_weights(raw)?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    let io = |e: csv::Error| Error::Data(format!("writing {}: {e}", path.display()));
    w.write_record([
        "sample_index",
        "raw_weight",
        "normalized_weight",
        "corrupted",
    ])
    .map_err(io)?;
    for (i, ((r, n), c)) in raw.iter().zip(&normalized).zip(corrupted).enumerate() {
        w.write_record([
            i.to_string(),
            r.to_string(),
            n.to_string(),
            u8::from(*c).to_string(),
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

struct RunRecorder<'a> {
    dir: &'a Path,
    train: &'a LabeledDataset,
    dump_epochs: &'a [usize],
    trace: Option<BufWriter<File>>,
}

impl TrainObserver for RunRecorder<'_> {
    fn on_step(&mut self, trace: &MetaStepTrace) -> Result<()> {
        if let Some(w) = &mut self.trace {
            let line = serde_json::to_string(trace)
                .map_err(|e| Error::Data(format!("encoding trace: {e}")))?;
            writeln!(w, "{line}").map_err(|e| Error::io(self.dir.join("trace.jsonl"), e))?;
        }
        Ok(())
    }

    fn on_epoch(&mut self, record: &EpochRecord, state: &MetaState) -> Result<()> {
        if self.dump_epochs.contains(&record.epoch) {
            let raw = dataset_weights(&state.classifier, &state.mwnet, self.train)?;
            let path = self.dir.join(format!("weights_epoch{}.csv", record.epoch));
            write_weight_dump(&path, &raw, &self.train.corrupted)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub dir: PathBuf,
    pub data: PreparedData,
    pub outcome: TrainOutcome,
}

impl RunResult {
    pub fn metrics(&self) -> &RunMetrics {
        &self.outcome.metrics
    }
}

/// Prepares data, trains and writes every artifact into `dir`.
pub fn run_training(cfg: &ExperimentConfig, dir: &Path) -> Result<RunResult> {
    cfg.validate()?;
    let data = prepare_data(cfg)?;
    create_dir(dir)?;
    std::fs::write(dir.join("config.toml"), cfg.to_toml()?)
        .map_err(|e| Error::io(dir.join("config.toml"), e))?;
    write_json(&dir.join("provenance.json"), &data.provenance)?;
    let hp = cfg.hyper_params(data.train.len())?;
    let trace = if cfg.output.trace {
        let path = dir.join("trace.jsonl");
        Some(BufWriter::new(
            File::create(&path).map_err(|e| Error::io(&path, e))?,
        ))
    } else {
        None
    };
    let mut recorder = RunRecorder {
        dir,
        train: &data.train,
        dump_epochs: &cfg.output.weight_dump_epochs,
        trace,
    };
    let outcome = train_with(&data.train, &data.meta, &data.test, &hp, &mut recorder)?;
    if let Some(mut w) = recorder.trace.take() {
        w.flush()
            .map_err(|e| Error::io(dir.join("trace.jsonl"), e))?;
    }
    save_metrics_csv(&dir.join("metrics.csv"), &outcome.metrics.epochs)?;
    write_json(
        &dir.join("summary.json"),
        &SummaryFile::from_summary(outcome.metrics.summary.as_ref()),
    )?;
    Checkpoint::from_classifier(&outcome.classifier).save(&dir.join("classifier.json"))?;
    Checkpoint::from_mwnet(&outcome.mwnet).save(&dir.join("mwnet.json"))?;
    Ok(RunResult {
        dir: dir.to_path_buf(),
        data,
        outcome,
    })
}

/// Runs the finite-difference hypergradient check for the configured variant.
pub fn run_gradcheck(cfg: &ExperimentConfig) -> Result<HypergradReport> {
    let inst = TinyInstance::build(&cfg.tiny_spec())?;
    check_hypergradient(&inst, &cfg.check_options())
}

/// One point of the override cross product.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub label: String,
    pub overrides: Vec<(String, toml::Value)>,
}

/// Cross product of the configured axes in key order; a single `base` point
/// when there are none.
pub fn sweep_points(cfg: &ExperimentConfig) -> Vec<SweepPoint> {
    let mut points = vec![Vec::<(String, toml::Value)>::new()];
    for (key, values) in &cfg.sweep.axes {
        points = points
            .into_iter()
            .flat_map(|p| {
                values.iter().map(move |v| {
                    let mut q = p.clone();
                    q.push((key.clone(), v.clone()));
                    q
                })
            })
            .collect();
    }
    points
        .into_iter()
        .map(|overrides| {
            let label = if overrides.is_empty() {
                "base".to_string()
            } else {
                overrides
                    .iter()
                    .map(|(k, v)| format!("{k}={}", display_value(v)))
                    .collect::<Vec<_>>()
                    .join(";")
            };
            SweepPoint { label, overrides }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRun {
    pub point: String,
    pub seed: u64,
    pub result: std::result::Result<RunSummary, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub kind: String,
    pub point: String,
    pub seed: Option<u64>,
    pub runs: usize,
    pub failed: usize,
    pub best_mean: Option<f64>,
    pub best_std: Option<f64>,
    pub last_mean: Option<f64>,
    pub last_std: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub runs: Vec<SweepRun>,
    pub rows: Vec<SweepRow>,
}

impl SweepOutcome {
    pub fn failures(&self) -> usize {
        self.runs.iter().filter(|r| r.result.is_err()).count()
    }

    pub fn aggregates(&self) -> impl Iterator<Item = &SweepRow> {
        self.rows.iter().filter(|r| r.kind == "aggregate")
    }
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    Some((mean, std))
}

fn child_config(
    cfg: &ExperimentConfig,
    point: &SweepPoint,
    seed: u64,
    dir: PathBuf,
) -> Result<ExperimentConfig> {
    let mut child = cfg.clone();
    child.sweep = Default::default();
    for (k, v) in &point.overrides {
        child.apply_override(k, v.clone())?;
    }
    child.set_all_seeds(seed);
    child.output.dir = dir;
    child.output.trace = false;
    Ok(child)
}

/// Runs every point × seed, each into `out/point<i>/seed<s>`, and writes
/// `out/sweep.csv`. Failed children are recorded and the sweep continues.
pub fn run_sweep(cfg: &ExperimentConfig, out: &Path) -> Result<SweepOutcome> {
    cfg.validate()?;
    if cfg.sweep.seeds.is_empty() {
        return Err(Error::Config("sweep.seeds is empty".into()));
    }
    let points = sweep_points(cfg);
    for point in &points {
        child_config(cfg, point, 0, out.to_path_buf())?.validate()?;
    }
    create_dir(out)?;
    std::fs::write(out.join("config.toml"), cfg.to_toml()?)
        .map_err(|e| Error::io(out.join("config.toml"), e))?;
    let jobs: Vec<(usize, u64)> = (0..points.len())
        .flat_map(|p| cfg.sweep.seeds.iter().map(move |&s| (p, s)))
        .collect();
    let run_one = |&(p, seed): &(usize, u64)| {
        let dir = out.join(format!("point{p}")).join(format!("seed{seed}"));
        let result = child_config(cfg, &points[p], seed, dir.clone())
            .and_then(|c| run_training(&c, &dir))
            .map_err(|e| e.to_string())
            .and_then(|r| {
                r.outcome
                    .metrics
                    .summary
                    .ok_or_else(|| "run finished without any epoch".to_string())
            });
        SweepRun {
            point: points[p].label.clone(),
            seed,
            result,
        }
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.sweep.threads)
        .build()
        .map_err(|e| Error::Config(format!("sweep thread pool: {e}")))?;
    let runs: Vec<SweepRun> = pool.install(|| jobs.par_iter().map(run_one).collect());

    let mut rows = Vec::with_capacity(runs.len() + points.len());
    for r in &runs {
        rows.push(match &r.result {
            Ok(s) => SweepRow {
                kind: "run".into(),
                point: r.point.clone(),
                seed: Some(r.seed),
                runs: 1,
                failed: 0,
                best_mean: Some(s.best_test_acc),
                best_std: Some(0.0),
                last_mean: Some(s.last10_mean_acc),
                last_std: Some(0.0),
                error: None,
            },
            Err(e) => SweepRow {
                kind: "run".into(),
                point: r.point.clone(),
                seed: Some(r.seed),
                runs: 1,
                failed: 1,
                best_mean: None,
                best_std: None,
                last_mean: None,
                last_std: None,
                error: Some(e.clone()),
            },
        });
    }
    for point in &points {
        let mine: Vec<&SweepRun> = runs.iter().filter(|r| r.point == point.label).collect();
        let ok: Vec<&RunSummary> = mine.iter().filter_map(|r| r.result.as_ref().ok()).collect();
        let best = mean_std(&ok.iter().map(|s| s.best_test_acc).collect::<Vec<_>>());
        let last = mean_std(&ok.iter().map(|s| s.last10_mean_acc).collect::<Vec<_>>());
        rows.push(SweepRow {
            kind: "aggregate".into(),
            point: point.label.clone(),
            seed: None,
            runs: mine.len(),
            failed: mine.len() - ok.len(),
            best_mean: best.map(|b| b.0),
            best_std: best.map(|b| b.1),
            last_mean: last.map(|l| l.0),
            last_std: last.map(|l| l.1),
            error: None,
        });
    }
    let path = out.join("sweep.csv");
    let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    for row in &rows {
        w.serialize(row)
            .map_err(|e| Error::Data(format!("writing {}: {e}", path.display())))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok(SweepOutcome { runs, rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.data.train_per_class = 40;
        cfg.data.test_per_class = 20;
        cfg.data.meta_per_class = 5;
        cfg.optim.train_batch = 20;
        cfg.optim.meta_batch = 10;
        cfg.optim.epochs = 2;
        cfg.model.classifier_hidden = vec![8];
        cfg.model.mwnet_hidden = 8;
        cfg
    }

    #[test]
    fn pipeline_sizes_and_clean_meta() {
        let data = prepare_data(&small_config()).unwrap();
        assert_eq!(data.train.len(), 160);
        assert_eq!(data.meta.len(), 20);
        assert_eq!(data.test.len(), 80);
        assert!(data.meta.corrupted.iter().all(|&c| !c));
        assert!(data.test.corrupted.iter().all(|&c| !c));
        assert_eq!(data.meta.observed_counts(), vec![5; 4]);
        assert!(data.provenance.realized_noise_rate > 0.0);
    }

    #[test]
    fn no_bias_means_zero_noise() {
        let mut cfg = small_config();
        cfg.data.bias.kind = BiasKind::None;
        assert_eq!(
            prepare_data(&cfg).unwrap().provenance.realized_noise_rate,
            0.0
        );
    }

    #[test]
    fn points_cover_the_cross_product() {
        let mut cfg = small_config();
        assert_eq!(sweep_points(&cfg)[0].label, "base");
        cfg.sweep.axes.insert(
            "model.variant".into(),
            vec!["standard".into(), "lossnet".into()],
        );
        cfg.sweep.axes.insert(
            "optim.lambda".into(),
            vec![0.0.into(), 0.1.into(), 1.0.into()],
        );
        let points = sweep_points(&cfg);
        assert_eq!(points.len(), 6);
        assert_eq!(points[0].label, "model.variant=standard;optim.lambda=0.0");
    }

    #[test]
    fn mean_std_conventions() {
        assert_eq!(mean_std(&[]), None);
        assert_eq!(mean_std(&[0.5]), Some((0.5, 0.0)));
        let (m, s) = mean_std(&[1.0, 3.0]).unwrap();
        assert_eq!(m, 2.0);
        assert!((s - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn run_directory_has_every_artifact() {
        let tmp = tempfile::tempdir().unwrap();
        let mut cfg = small_config();
        cfg.output.trace = true;
        cfg.output.weight_dump_epochs = vec![1];
        let run = run_training(&cfg, tmp.path()).unwrap();
        for f in [
            "config.toml",
            "provenance.json",
            "metrics.csv",
            "summary.json",
            "classifier.json",
            "mwnet.json",
            "trace.jsonl",
            "weights_epoch1.csv",
        ] {
            assert!(tmp.path().join(f).exists(), "missing {f}");
        }
        assert_eq!(run.metrics().epochs.len(), 2);
        let written = ExperimentConfig::load(&tmp.path().join("config.toml")).unwrap();
        assert_eq!(written, cfg);
        let lines = std::fs::read_to_string(tmp.path().join("trace.jsonl")).unwrap();
        assert_eq!(lines.lines().count(), 16);
    }
}
