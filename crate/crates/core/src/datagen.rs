//! Biased training data: Gaussian mixtures, long-tailed subsampling, the
//! uniform / flip-1 / flip-2 label-noise protocols, clean meta splits, and CSV
//! ingestion.
//!
//! Every noise injector decides the corruption relative to the *clean* label,
//! leaves features and clean labels untouched, and recomputes the corrupted
//! flags from `observed != clean`.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Matrix;
use crate::rng::RngState;

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub features: Matrix,
    pub observed_labels: Vec<usize>,
    pub clean_labels: Vec<usize>,
    pub corrupted: Vec<bool>,
    pub num_classes: usize,
}

impl LabeledDataset {
    /// A dataset whose observed labels are its clean labels.
    pub fn clean(features: Matrix, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let n = labels.len();
        Self::new(
            features,
            labels.clone(),
            labels,
            vec![false; n],
            num_classes,
        )
    }

    pub fn new(
        features: Matrix,
        observed_labels: Vec<usize>,
        clean_labels: Vec<usize>,
        corrupted: Vec<bool>,
        num_classes: usize,
    ) -> Result<Self> {
        let ds = Self {
            features,
            observed_labels,
            clean_labels,
            corrupted,
            num_classes,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.features.rows();
        if self.observed_labels.len() != n
            || self.clean_labels.len() != n
            || self.corrupted.len() != n
        {
            return Err(Error::shape(format!(
                "{} feature rows but {} observed / {} clean labels / {} flags",
                n,
                self.observed_labels.len(),
                self.clean_labels.len(),
                self.corrupted.len()
            )));
        }
        for i in 0..n {
            let (o, c) = (self.observed_labels[i], self.clean_labels[i]);
            if o >= self.num_classes || c >= self.num_classes {
                return Err(Error::data(format!(
                    "sample {i}: label out of range for {} classes",
                    self.num_classes
                )));
            }
            if self.corrupted[i] != (o != c) {
                return Err(Error::data(format!(
                    "sample {i}: corrupted flag inconsistent"
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.observed_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observed_labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.features.row(i)
    }

    /// Subset in the order of `indices`.
    pub fn select(&self, indices: &[usize]) -> LabeledDataset {
        LabeledDataset {
            features: self.features.select_rows(indices),
            observed_labels: indices.iter().map(|&i| self.observed_labels[i]).collect(),
            clean_labels: indices.iter().map(|&i| self.clean_labels[i]).collect(),
            corrupted: indices.iter().map(|&i| self.corrupted[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    /// Per-class counts of the observed labels.
    pub fn observed_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &y in &self.observed_labels {
            counts[y] += 1;
        }
        counts
    }

    /// Per-class counts of the clean labels.
    pub fn clean_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &y in &self.clean_labels {
            counts[y] += 1;
        }
        counts
    }

    pub fn corrupted_fraction(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        self.corrupted.iter().filter(|&&c| c).count() as f64 / self.len() as f64
    }

    fn refresh_flags(&mut self) {
        self.corrupted = self
            .observed_labels
            .iter()
            .zip(&self.clean_labels)
            .map(|(o, c)| o != c)
            .collect();
    }
}

/// Isotropic Gaussian mixture, one component per class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub class_means: Vec<Vec<f64>>,
    pub class_scale: f64,
    pub samples_per_class: Vec<usize>,
}

impl MixtureSpec {
    pub fn num_classes(&self) -> usize {
        self.class_means.len()
    }

    pub fn dim(&self) -> usize {
        self.class_means.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.num_classes();
        if k < 2 {
            return Err(Error::data("mixture needs at least 2 classes"));
        }
        let d = self.dim();
        if d == 0 || self.class_means.iter().any(|m| m.len() != d) {
            return Err(Error::data(
                "class means must share a dimension of at least 1",
            ));
        }
        if !(self.class_scale > 0.0 && self.class_scale.is_finite()) {
            return Err(Error::data(format!(
                "class scale must be positive, got {}",
                self.class_scale
            )));
        }
        if self.samples_per_class.len() != k {
            return Err(Error::data(format!(
                "{} sample counts for {} classes",
                self.samples_per_class.len(),
                k
            )));
        }
        Ok(())
    }
}

/// `k` points evenly spaced on a circle of `radius` in the plane.
pub fn circle_means(k: usize, radius: f64) -> Vec<Vec<f64>> {
    (0..k)
        .map(|c| {
            let angle = 2.0 * std::f64::consts::PI * c as f64 / k as f64;
            vec![radius * angle.cos(), radius * angle.sin()]
        })
        .collect()
}

/// Draws `samples_per_class[c]` points from `N(mean_c, scale²·I)`, class by class.
pub fn generate_mixture(spec: &MixtureSpec, rng: &mut RngState) -> Result<LabeledDataset> {
    spec.validate()?;
    let d = spec.dim();
    let total: usize = spec.samples_per_class.iter().sum();
    let mut data = Vec::with_capacity(total * d);
    let mut labels = Vec::with_capacity(total);
    for (c, (&count, mean)) in spec
        .samples_per_class
        .iter()
        .zip(&spec.class_means)
        .enumerate()
    {
        for _ in 0..count {
            let noise = rng.standard_normal(d);
            data.extend(
                mean.iter()
                    .zip(noise)
                    .map(|(m, e)| m + spec.class_scale * e),
            );
            labels.push(c);
        }
    }
    LabeledDataset::clean(
        Matrix::from_vec(total, d, data)?,
        labels,
        spec.num_classes(),
    )
}

/// Per-class counts `round(n_max · μ^i)`, floor 1, with `μ = IF^(−1/(K−1))`.
pub fn long_tail_counts(
    num_classes: usize,
    imbalance_factor: f64,
    n_max: usize,
) -> Result<Vec<usize>> {
    if !(imbalance_factor >= 1.0 && imbalance_factor.is_finite()) {
        return Err(Error::data(format!(
            "imbalance factor must be >= 1, got {imbalance_factor}"
        )));
    }
    if num_classes < 2 {
        return Ok(vec![n_max; num_classes]);
    }
    let mu = imbalance_factor.powf(-1.0 / (num_classes - 1) as f64);
    Ok((0..num_classes)
        .map(|i| ((n_max as f64 * mu.powi(i as i32)).round() as usize).max(1))
        .collect())
}

/// Subsamples each class (by observed label) without replacement to the
/// exponential long-tail profile. Survivors keep their original relative order.
pub fn make_long_tailed(
    ds: &LabeledDataset,
    imbalance_factor: f64,
    n_max: usize,
    rng: &mut RngState,
) -> Result<LabeledDataset> {
    let counts = long_tail_counts(ds.num_classes, imbalance_factor, n_max)?;
    let mut keep = Vec::new();
    for (c, &want) in counts.iter().enumerate() {
        let members: Vec<usize> = (0..ds.len())
            .filter(|&i| ds.observed_labels[i] == c)
            .collect();
        if members.len() < want {
            return Err(Error::data(format!(
                "class {c} has {} samples, long tail needs {want}",
                members.len()
            )));
        }
        keep.extend(
            rng.sample_without_replacement(members.len(), want)
                .into_iter()
                .map(|j| members[j]),
        );
    }
    keep.sort_unstable();
    Ok(ds.select(&keep))
}

fn check_rate(p: f64) -> Result<()> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::data(format!(
            "noise rate must lie in [0, 1], got {p}"
        )))
    }
}

/// With probability `p`, relabels a sample to one of the `K − 1` classes other
/// than its clean label, uniformly.
pub fn inject_uniform_noise(
    ds: &LabeledDataset,
    p: f64,
    rng: &mut RngState,
) -> Result<LabeledDataset> {
    check_rate(p)?;
    let k = ds.num_classes;
    if k < 2 {
        return Err(Error::data("uniform noise needs at least 2 classes"));
    }
    let mut out = ds.clone();
    for i in 0..out.len() {
        if rng.uniform() < p {
            let clean = out.clean_labels[i];
            let draw = rng.below(k - 1);
            out.observed_labels[i] = if draw >= clean { draw + 1 } else { draw };
        }
    }
    out.refresh_flags();
    Ok(out)
}

/// One fixed target `≠ c` per class, drawn uniformly.
pub fn flip1_targets(num_classes: usize, rng: &mut RngState) -> Result<Vec<usize>> {
    if num_classes < 2 {
        return Err(Error::data("flip-1 noise needs at least 2 classes"));
    }
    Ok((0..num_classes)
        .map(|c| {
            let draw = rng.below(num_classes - 1);
            if draw >= c {
                draw + 1
            } else {
                draw
            }
        })
        .collect())
}

/// Flip-1 noise: a per-class target is drawn once from the `"flip1-targets"`
/// child stream; each sample then moves to its clean class' target with
/// probability `p`.
pub fn inject_flip1(ds: &LabeledDataset, p: f64, rng: &mut RngState) -> Result<LabeledDataset> {
    let targets = flip1_targets(ds.num_classes, &mut rng.split("flip1-targets"))?;
    inject_flip1_with(ds, p, &targets, rng)
}

/// Flip-1 noise with an explicit target table.
pub fn inject_flip1_with(
    ds: &LabeledDataset,
    p: f64,
    targets: &[usize],
    rng: &mut RngState,
) -> Result<LabeledDataset> {
    check_rate(p)?;
    validate_flip1_targets(targets, ds.num_classes)?;
    let mut out = ds.clone();
    for i in 0..out.len() {
        if rng.uniform() < p {
            out.observed_labels[i] = targets[out.clean_labels[i]];
        }
    }
    out.refresh_flags();
    Ok(out)
}

pub fn validate_flip1_targets(targets: &[usize], num_classes: usize) -> Result<()> {
    if targets.len() != num_classes {
        return Err(Error::data(format!(
            "{} flip targets for {num_classes} classes",
            targets.len()
        )));
    }
    for (c, &t) in targets.iter().enumerate() {
        if t == c || t >= num_classes {
            return Err(Error::data(format!(
                "invalid flip-1 target {t} for class {c}"
            )));
        }
    }
    Ok(())
}

/// Default flip-2 table: `c → (c+1 mod K, c+2 mod K)`.
pub fn default_flip2_targets(num_classes: usize) -> Result<Vec<[usize; 2]>> {
    if num_classes < 3 {
        return Err(Error::data("flip-2 noise needs at least 3 classes"));
    }
    Ok((0..num_classes)
        .map(|c| [(c + 1) % num_classes, (c + 2) % num_classes])
        .collect())
}

pub fn validate_flip2_targets(targets: &[[usize; 2]], num_classes: usize) -> Result<()> {
    if targets.len() != num_classes {
        return Err(Error::data(format!(
            "{} flip-2 entries for {num_classes} classes",
            targets.len()
        )));
    }
    for (c, &[a, b]) in targets.iter().enumerate() {
        if a == b || a == c || b == c || a >= num_classes || b >= num_classes {
            return Err(Error::data(format!(
                "invalid flip-2 targets ({a}, {b}) for class {c}"
            )));
        }
    }
    Ok(())
}

/// Flip-2 noise: each sample moves to its first target with probability `p/2`
/// and to its second with probability `p/2`.
pub fn inject_flip2(
    ds: &LabeledDataset,
    p: f64,
    targets: &[[usize; 2]],
    rng: &mut RngState,
) -> Result<LabeledDataset> {
    check_rate(p)?;
    validate_flip2_targets(targets, ds.num_classes)?;
    let mut out = ds.clone();
    for i in 0..out.len() {
        let u = rng.uniform();
        let [a, b] = targets[out.clean_labels[i]];
        if u < p / 2.0 {
            out.observed_labels[i] = a;
        } else if u < p {
            out.observed_labels[i] = b;
        }
    }
    out.refresh_flags();
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BiasKind {
    None,
    Uniform,
    Flip1,
    Flip2,
    Longtail,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasSpec {
    pub kind: BiasKind,
    pub noise_rate: f64,
    pub imbalance_factor: f64,
    /// Per-class targets. Flip-1 uses the first entry of each row; flip-2 needs two.
    /// `None` draws flip-1 targets from the seed and uses the default flip-2 table.
    pub flip_targets: Option<Vec<Vec<usize>>>,
    /// Largest class size for the long tail; defaults to the smallest class count.
    pub long_tail_max: Option<usize>,
}

/// Applies the configured bias to `ds`.
pub fn apply_bias(
    ds: &LabeledDataset,
    spec: &BiasSpec,
    rng: &mut RngState,
) -> Result<LabeledDataset> {
    match spec.kind {
        BiasKind::None => Ok(ds.clone()),
        BiasKind::Uniform => inject_uniform_noise(ds, spec.noise_rate, rng),
        BiasKind::Flip1 => match &spec.flip_targets {
            Some(rows) => {
                let targets: Vec<usize> = rows
                    .iter()
                    .map(|r| {
                        r.first()
                            .copied()
                            .ok_or_else(|| Error::data("empty flip-1 target row"))
                    })
                    .collect::<Result<_>>()?;
                inject_flip1_with(ds, spec.noise_rate, &targets, rng)
            }
            None => inject_flip1(ds, spec.noise_rate, rng),
        },
        BiasKind::Flip2 => {
            let targets = match &spec.flip_targets {
                Some(rows) => rows
                    .iter()
                    .map(|r| match r.as_slice() {
                        [a, b] => Ok([*a, *b]),
                        _ => Err(Error::data("flip-2 target rows need exactly two classes")),
                    })
                    .collect::<Result<Vec<_>>>()?,
                None => default_flip2_targets(ds.num_classes)?,
            };
            inject_flip2(ds, spec.noise_rate, &targets, rng)
        }
        BiasKind::Longtail => {
            let n_max = match spec.long_tail_max {
                Some(n) => n,
                None => ds.observed_counts().into_iter().min().unwrap_or(0),
            };
            make_long_tailed(ds, spec.imbalance_factor, n_max, rng)
        }
    }
}

/// Indices of a class-balanced clean meta set and of the remaining samples.
pub fn split_meta_indices(
    ds: &LabeledDataset,
    per_class: usize,
    rng: &mut RngState,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut meta = Vec::with_capacity(per_class * ds.num_classes);
    for c in 0..ds.num_classes {
        let candidates: Vec<usize> = (0..ds.len())
            .filter(|&i| ds.clean_labels[i] == c && !ds.corrupted[i])
            .collect();
        if candidates.len() < per_class {
            return Err(Error::data(format!(
                "class {c} has {} clean samples, meta set needs {per_class}",
                candidates.len()
            )));
        }
        meta.extend(
            rng.sample_without_replacement(candidates.len(), per_class)
                .into_iter()
                .map(|j| candidates[j]),
        );
    }
    let mut in_meta = vec![false; ds.len()];
    for &i in &meta {
        in_meta[i] = true;
    }
    let train = (0..ds.len()).filter(|&i| !in_meta[i]).collect();
    Ok((train, meta))
}

/// Splits off `per_class` clean samples per class as the meta set.
pub fn split_meta_set(
    ds: &LabeledDataset,
    per_class: usize,
    rng: &mut RngState,
) -> Result<(LabeledDataset, LabeledDataset)> {
    let (train, meta) = split_meta_indices(ds, per_class, rng)?;
    Ok((ds.select(&train), ds.select(&meta)))
}

const LABEL: &str = "label";
const CLEAN_LABEL: &str = "clean_label";

/// Parses the dataset CSV schema `f0,…,f{d−1},label[,clean_label]`.
///
/// `num_classes = None` infers `K` as one more than the largest label seen.
pub fn parse_csv_dataset<R: Read>(
    reader: R,
    has_clean_column: bool,
    num_classes: Option<usize>,
) -> Result<LabeledDataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header = rdr
        .headers()
        .map_err(|e| csv_error(e, 1))?
        .iter()
        .map(str::to_owned)
        .collect::<Vec<_>>();

    let label_col = header
        .iter()
        .position(|h| h == LABEL)
        .ok_or_else(|| Error::Parse {
            line: 1,
            message: format!("missing column '{LABEL}'"),
        })?;
    for (j, name) in header[..label_col].iter().enumerate() {
        if *name != format!("f{j}") {
            return Err(Error::Parse {
                line: 1,
                message: format!("expected feature column 'f{j}', found '{name}'"),
            });
        }
    }
    let d = label_col;
    let expected_cols = if has_clean_column {
        if header.get(label_col + 1).map(String::as_str) != Some(CLEAN_LABEL) {
            return Err(Error::Parse {
                line: 1,
                message: format!("missing column '{CLEAN_LABEL}' after '{LABEL}'"),
            });
        }
        d + 2
    } else {
        d + 1
    };
    if header.len() != expected_cols {
        return Err(Error::Parse {
            line: 1,
            message: format!(
                "expected {expected_cols} columns, header has {}",
                header.len()
            ),
        });
    }

    let mut features = Vec::new();
    let mut observed = Vec::new();
    let mut clean = Vec::new();
    let mut record = csv::StringRecord::new();
    loop {
        match rdr.read_record(&mut record) {
            Ok(false) => break,
            Ok(true) => {}
            Err(e) => return Err(csv_error(e, 0)),
        }
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != expected_cols {
            return Err(Error::Parse {
                line,
                message: format!("expected {expected_cols} fields, found {}", record.len()),
            });
        }
        for (j, field) in record.iter().take(d).enumerate() {
            let v: f64 = field.parse().map_err(|_| Error::Parse {
                line,
                message: format!("feature f{j}: '{field}' is not a number"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    line,
                    message: format!("feature f{j}: '{field}' is not finite"),
                });
            }
            features.push(v);
        }
        let parse_label = |field: &str, col: &str| -> Result<usize> {
            let y: usize = field.parse().map_err(|_| Error::Parse {
                line,
                message: format!("{col}: '{field}' is not a class index"),
            })?;
            if let Some(k) = num_classes {
                if y >= k {
                    return Err(Error::Parse {
                        line,
                        message: format!("{col}: {y} out of range for {k} classes"),
                    });
                }
            }
            Ok(y)
        };
        let y = parse_label(&record[d], LABEL)?;
        observed.push(y);
        clean.push(if has_clean_column {
            parse_label(&record[d + 1], CLEAN_LABEL)?
        } else {
            y
        });
    }

    let k = num_classes.unwrap_or_else(|| {
        observed
            .iter()
            .chain(&clean)
            .copied()
            .max()
            .map_or(0, |m| m + 1)
    });
    let n = observed.len();
    let corrupted = observed.iter().zip(&clean).map(|(o, c)| o != c).collect();
    LabeledDataset::new(
        Matrix::from_vec(n, d, features)?,
        observed,
        clean,
        corrupted,
        k,
    )
}

fn csv_error(e: csv::Error, fallback_line: u64) -> Error {
    let line = e.position().map_or(fallback_line, |p| p.line());
    Error::Parse {
        line,
        message: e.to_string(),
    }
}

pub fn load_csv_dataset(
    path: &Path,
    has_clean_column: bool,
    num_classes: Option<usize>,
) -> Result<LabeledDataset> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_csv_dataset(std::io::BufReader::new(file), has_clean_column, num_classes)
}

/// Writes the dataset CSV schema; features use shortest round-trip formatting.
pub fn write_csv_dataset<W: Write>(
    ds: &LabeledDataset,
    writer: W,
    include_clean: bool,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<String> = (0..ds.dim()).map(|j| format!("f{j}")).collect();
    header.push(LABEL.into());
    if include_clean {
        header.push(CLEAN_LABEL.into());
    }
    let map = |e: csv::Error| Error::data(e.to_string());
    w.write_record(&header).map_err(map)?;
    for i in 0..ds.len() {
        let mut row: Vec<String> = ds.row(i).iter().map(f64::to_string).collect();
        row.push(ds.observed_labels[i].to_string());
        if include_clean {
            row.push(ds.clean_labels[i].to_string());
        }
        w.write_record(&row).map_err(map)?;
    }
    w.flush().map_err(|e| Error::data(e.to_string()))?;
    Ok(())
}

pub fn save_csv_dataset(ds: &LabeledDataset, path: &Path, include_clean: bool) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_csv_dataset(ds, std::io::BufWriter::new(file), include_clean)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn balanced(k: usize, per_class: usize, seed: u64) -> LabeledDataset {
        let spec = MixtureSpec {
            class_means: circle_means(k, 3.0),
            class_scale: 1.0,
            samples_per_class: vec![per_class; k],
        };
        generate_mixture(&spec, &mut RngState::new(seed)).unwrap()
    }

    #[test]
    fn empty_mixture() {
        let spec = MixtureSpec {
            class_means: circle_means(3, 1.0),
            class_scale: 1.0,
            samples_per_class: vec![0; 3],
        };
        let ds = generate_mixture(&spec, &mut RngState::new(0)).unwrap();
        assert!(ds.is_empty());
        assert_eq!(ds.dim(), 2);
    }

    #[test]
    fn degenerate_scale_hits_means() {
        let means = vec![vec![1.5, -2.0], vec![-3.0, 4.0]];
        let spec = MixtureSpec {
            class_means: means.clone(),
            class_scale: 1e-300,
            samples_per_class: vec![5, 5],
        };
        let ds = generate_mixture(&spec, &mut RngState::new(1)).unwrap();
        for i in 0..ds.len() {
            assert_eq!(ds.row(i), means[ds.clean_labels[i]].as_slice());
        }
    }

    #[test]
    fn invalid_mixture_rejected() {
        let spec = MixtureSpec {
            class_means: circle_means(2, 1.0),
            class_scale: 0.0,
            samples_per_class: vec![1, 1],
        };
        assert!(generate_mixture(&spec, &mut RngState::new(0)).is_err());
    }

    #[test]
    fn long_tail_profiles() {
        assert_eq!(long_tail_counts(4, 1.0, 50).unwrap(), vec![50; 4]);
        assert_eq!(
            long_tail_counts(5, 100.0, 100).unwrap(),
            vec![100, 32, 10, 3, 1]
        );
        let c = long_tail_counts(10, 100.0, 500).unwrap();
        assert_eq!((c[0], c[9]), (500, 5));
        assert!(c.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn long_tail_subsamples() {
        let ds = balanced(5, 120, 2);
        let lt = make_long_tailed(&ds, 100.0, 100, &mut RngState::new(3)).unwrap();
        assert_eq!(lt.observed_counts(), vec![100, 32, 10, 3, 1]);
        assert!(make_long_tailed(&ds, 100.0, 200, &mut RngState::new(3)).is_err());
        assert!(make_long_tailed(&ds, 0.5, 100, &mut RngState::new(3)).is_err());
    }

    #[test]
    fn uniform_noise_edges() {
        let ds = balanced(4, 50, 4);
        let same = inject_uniform_noise(&ds, 0.0, &mut RngState::new(5)).unwrap();
        assert_eq!(same, ds);
        let all = inject_uniform_noise(&ds, 1.0, &mut RngState::new(5)).unwrap();
        assert!(all.corrupted.iter().all(|&c| c));
        assert_eq!(all.features, ds.features);
        assert_eq!(all.clean_labels, ds.clean_labels);
        assert!(inject_uniform_noise(&ds, 1.5, &mut RngState::new(5)).is_err());
    }

    #[test]
    fn flip1_determinism_and_edges() {
        let ds = balanced(4, 50, 6);
        assert_eq!(inject_flip1(&ds, 0.0, &mut RngState::new(1)).unwrap(), ds);
        let a = inject_flip1(&ds, 0.4, &mut RngState::new(9)).unwrap();
        let b = inject_flip1(&ds, 0.4, &mut RngState::new(9)).unwrap();
        assert_eq!(a, b);
        let t = flip1_targets(4, &mut RngState::new(9).split("flip1-targets")).unwrap();
        for i in 0..a.len() {
            if a.corrupted[i] {
                assert_eq!(a.observed_labels[i], t[a.clean_labels[i]]);
            }
        }
    }

    #[test]
    fn flip2_rejects_bad_tables() {
        let ds = balanced(3, 10, 7);
        let mut rng = RngState::new(0);
        assert!(inject_flip2(&ds, 0.2, &[[0, 1], [2, 0], [0, 1]], &mut rng).is_err());
        assert!(inject_flip2(&ds, 0.2, &[[1, 1], [2, 0], [0, 1]], &mut rng).is_err());
        assert!(inject_flip2(&ds, 0.2, &[[1, 2]], &mut rng).is_err());
        assert!(default_flip2_targets(2).is_err());
        let t = default_flip2_targets(3).unwrap();
        assert_eq!(inject_flip2(&ds, 0.0, &t, &mut rng).unwrap(), ds);
    }

    #[test]
    fn meta_split_contract() {
        let ds = balanced(4, 30, 8);
        let noisy = inject_uniform_noise(&ds, 0.3, &mut RngState::new(2)).unwrap();
        let (train, meta) = split_meta_indices(&noisy, 10, &mut RngState::new(3)).unwrap();
        assert_eq!(meta.len(), 40);
        assert_eq!(train.len() + meta.len(), noisy.len());
        assert!(meta.iter().all(|i| !train.contains(i)));
        let (tr, me) = split_meta_set(&noisy, 10, &mut RngState::new(3)).unwrap();
        assert_eq!(me.observed_counts(), vec![10; 4]);
        assert!(me.corrupted.iter().all(|&c| !c));
        assert_eq!(tr, noisy.select(&train));

        let (tr0, me0) = split_meta_set(&noisy, 0, &mut RngState::new(3)).unwrap();
        assert!(me0.is_empty());
        assert_eq!(tr0, noisy);
        assert!(split_meta_set(&noisy, 31, &mut RngState::new(3)).is_err());
    }

    #[test]
    fn csv_round_trip_and_errors() {
        let ds = inject_flip1(&balanced(3, 7, 10), 0.5, &mut RngState::new(1)).unwrap();
        let mut buf = Vec::new();
        write_csv_dataset(&ds, &mut buf, true).unwrap();
        let back = parse_csv_dataset(buf.as_slice(), true, Some(3)).unwrap();
        assert_eq!(back, ds);

        let empty = parse_csv_dataset("f0,f1,label\n".as_bytes(), false, None).unwrap();
        assert!(empty.is_empty());
        assert_eq!(empty.dim(), 2);

        let crlf =
            parse_csv_dataset("f0,label\r\n1.5,1\r\n-2,0\r\n".as_bytes(), false, None).unwrap();
        assert_eq!(crlf.observed_labels, vec![1, 0]);
        assert_eq!(crlf.num_classes, 2);

        match parse_csv_dataset("f0,f1\n1,2\n".as_bytes(), false, None) {
            Err(Error::Parse { line: 1, message }) => assert!(message.contains("label")),
            other => panic!("unexpected {other:?}"),
        }
        match parse_csv_dataset("f0,label\n1,0\nx,1\n".as_bytes(), false, None) {
            Err(Error::Parse { line: 3, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
        match parse_csv_dataset("f0,label\n1,0\n2,5\n".as_bytes(), false, Some(3)) {
            Err(Error::Parse { line: 3, message }) => assert!(message.contains("out of range")),
            other => panic!("unexpected {other:?}"),
        }
        assert!(parse_csv_dataset("f0,label\n1\n".as_bytes(), false, None).is_err());
        assert!(parse_csv_dataset("f0,label\n1,0\n".as_bytes(), true, None).is_err());
        assert!(parse_csv_dataset("f0,label\nnan,0\n".as_bytes(), false, None).is_err());
    }
}
