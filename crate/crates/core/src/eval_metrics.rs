//! Per-epoch records, run summaries and weight statistics.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One row of `metrics.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_acc: f64,
    pub meta_val_acc: f64,
    /// Mean raw weight over clean training samples; empty when there are none.
    pub mean_weight_clean: Option<f64>,
    pub mean_weight_corrupted: Option<f64>,
    pub kl_mean: f64,
    pub grad_norm_sq: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub best_test_acc: f64,
    /// Earliest epoch with the highest meta-set accuracy.
    pub best_epoch: usize,
    /// Mean test accuracy over the final ten epochs (fewer if the run is shorter).
    pub last10_mean_acc: f64,
    pub best_meta_val_acc: f64,
    pub epochs: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunMetrics {
    pub epochs: Vec<EpochRecord>,
    pub summary: Option<RunSummary>,
    /// `‖∇L_train‖²` per iteration.
    pub iteration_grad_norm_sq: Vec<f64>,
}

/// Best: test accuracy at the epoch with the highest meta-set accuracy
/// (earliest on ties). Last: mean test accuracy over the final ten epochs.
pub fn summarize_run(records: &[EpochRecord]) -> Result<RunSummary> {
    let first = records
        .first()
        .ok_or_else(|| Error::contract("cannot summarize a run with no epochs"))?;
    let mut best = first;
    for r in &records[1..] {
        if r.meta_val_acc > best.meta_val_acc {
            best = r;
        }
    }
    let tail = &records[records.len().saturating_sub(10)..];
    let last10_mean_acc = tail.iter().map(|r| r.test_acc).sum::<f64>() / tail.len() as f64;
    Ok(RunSummary {
        best_test_acc: best.test_acc,
        best_epoch: best.epoch,
        last10_mean_acc,
        best_meta_val_acc: best.meta_val_acc,
        epochs: records.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightSeparation {
    pub mean_clean: Option<f64>,
    pub mean_corrupted: Option<f64>,
    /// `P(w_clean > w_corrupted)` over all clean/corrupted pairs, ties counted ½.
    pub rank_stat: Option<f64>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, count) = values.fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
    (count > 0).then(|| sum / count as f64)
}

pub fn weight_separation(weights: &[f64], corrupted: &[bool]) -> Result<WeightSeparation> {
    if weights.len() != corrupted.len() {
        return Err(Error::shape(format!(
            "{} weights but {} corruption flags",
            weights.len(),
            corrupted.len()
        )));
    }
    if weights.iter().any(|w| w.is_nan()) {
        return Err(Error::Numeric("NaN weight".into()));
    }
    let pick = |flag: bool| {
        weights
            .iter()
            .zip(corrupted)
            .filter(move |(_, &c)| c == flag)
            .map(|(&w, _)| w)
    };
    let mean_clean = mean(pick(false));
    let mean_corrupted = mean(pick(true));
    let mut bad: Vec<f64> = pick(true).collect();
    let rank_stat = if bad.is_empty() || mean_clean.is_none() {
        None
    } else {
        bad.sort_by(f64::total_cmp);
        let mut score = 0.0;
        let mut pairs = 0.0;
        for w in pick(false) {
            let below = bad.partition_point(|&b| b < w);
            let not_above = bad.partition_point(|&b| b <= w);
            score += below as f64 + 0.5 * (not_above - below) as f64;
            pairs += bad.len() as f64;
        }
        Some(score / pairs)
    };
    Ok(WeightSeparation {
        mean_clean,
        mean_corrupted,
        rank_stat,
    })
}

/// Counts of `values` in `bins` equal-width bins over `[lo, hi]`; values
/// outside the range are dropped and `hi` lands in the last bin.
pub fn histogram(values: &[f64], bins: usize, lo: f64, hi: f64) -> Result<Vec<usize>> {
    if bins == 0 {
        return Err(Error::contract("histogram needs at least one bin"));
    }
    if !(lo.is_finite() && hi.is_finite() && hi > lo) {
        return Err(Error::contract(format!(
            "invalid histogram range [{lo}, {hi}]"
        )));
    }
    let mut counts = vec![0; bins];
    let width = (hi - lo) / bins as f64;
    for &v in values {
        if !(lo..=hi).contains(&v) {
            continue;
        }
        let idx = (((v - lo) / width) as usize).min(bins - 1);
        counts[idx] += 1;
    }
    Ok(counts)
}

pub fn write_metrics_csv<W: Write>(writer: W, records: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    if records.is_empty() {
        w.write_record([
            "epoch",
            "train_loss",
            "test_acc",
            "meta_val_acc",
            "mean_weight_clean",
            "mean_weight_corrupted",
            "kl_mean",
            "grad_norm_sq",
        ])
        .map_err(csv_err)?;
    }
    for r in records {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()
        .map_err(|e| Error::Data(format!("writing metrics: {e}")))?;
    Ok(())
}

pub fn read_metrics_csv<R: Read>(reader: R) -> Result<Vec<EpochRecord>> {
    let mut r = csv::Reader::from_reader(reader);
    let mut out = Vec::new();
    for (i, row) in r.deserialize::<EpochRecord>().enumerate() {
        let rec = row.map_err(|e| Error::Parse {
            line: (i + 2) as u64,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn save_metrics_csv(path: &Path, records: &[EpochRecord]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_metrics_csv(std::io::BufWriter::new(file), records)
}

pub fn load_metrics_csv(path: &Path) -> Result<Vec<EpochRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_metrics_csv(std::io::BufReader::new(file))
}

fn csv_err(e: csv::Error) -> Error {
    Error::Data(format!("metrics csv: {e}"))
}
