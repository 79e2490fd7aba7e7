//! Datasets: synthetic generators, CSV ingestion, min-max normalization and
//! seeded train/test splitting.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::rng::substream;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error in {path}: {source}")]
    Csv {
        path: String,
        #[source]
        source: csv::Error,
    },
    #[error("{path}: empty file (no header or no data rows)")]
    Empty { path: String },
    #[error("{path}: missing column {column:?}")]
    MissingColumn { path: String, column: String },
    #[error("{path}: row {row}, column {column:?}: cannot parse {value:?} as a number")]
    NotNumeric {
        path: String,
        row: usize,
        column: String,
        value: String,
    },
    #[error("{path}: row {row} has {found} fields, expected {expected}")]
    Ragged {
        path: String,
        row: usize,
        found: usize,
        expected: usize,
    },
    #[error("unknown class label {label:?} (not present in training data)")]
    UnknownLabel { label: String },
    #[error("split with test fraction {fraction} of {n} rows leaves an empty side")]
    EmptySplit { fraction: f64, n: usize },
    #[error("feature count mismatch: expected {expected}, got {found}")]
    FeatureMismatch { expected: usize, found: usize },
    #[error("unknown builtin dataset {0:?}")]
    UnknownBuiltin(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Regression,
    Classification { n_classes: usize },
}

impl Task {
    pub fn is_regression(&self) -> bool {
        matches!(self, Task::Regression)
    }

    pub fn n_classes(&self) -> Option<usize> {
        match self {
            Task::Regression => None,
            Task::Classification { n_classes } => Some(*n_classes),
        }
    }
}

/// Task kind before the class count is known (CLI / schema level).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    Regression,
    Classification,
}

impl std::str::FromStr for TaskKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "regression" => Ok(TaskKind::Regression),
            "classification" => Ok(TaskKind::Classification),
            _ => Err(format!("unknown task {s:?} (expected regression|classification)")),
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskKind::Regression => "regression",
            TaskKind::Classification => "classification",
        })
    }
}

/// Per-feature min/max used to map raw inputs onto `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalization {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl Normalization {
    pub fn fit(raw: &[f64], n_features: usize) -> Self {
        let mut min = vec![f64::INFINITY; n_features];
        let mut max = vec![f64::NEG_INFINITY; n_features];
        for row in raw.chunks_exact(n_features.max(1)) {
            for (j, &v) in row.iter().enumerate() {
                min[j] = min[j].min(v);
                max[j] = max[j].max(v);
            }
        }
        for j in 0..n_features {
            if !min[j].is_finite() {
                min[j] = 0.0;
                max[j] = 0.0;
            }
        }
        Self { min, max }
    }

    /// Zero-range features map to 0; values outside the fitted range are clamped.
    pub fn apply(&self, j: usize, v: f64) -> f64 {
        let range = self.max[j] - self.min[j];
        if range <= 0.0 {
            0.0
        } else {
            ((v - self.min[j]) / range).clamp(0.0, 1.0)
        }
    }

    pub fn invert(&self, j: usize, v: f64) -> f64 {
        self.min[j] + v * (self.max[j] - self.min[j])
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    x: Vec<f64>,
    /// Feature-major copy of `x`.
    x_cols: Vec<f64>,
    raw_x: Vec<f64>,
    y: Vec<f64>,
    n_features: usize,
    task: Task,
    normalization: Normalization,
    pub feature_names: Vec<String>,
    pub target_name: String,
    /// Class labels indexed by class id (classification only).
    pub class_labels: Vec<String>,
}

impl Dataset {
    /// Builds a dataset normalized with its own min/max.
    pub fn from_raw(raw_x: Vec<f64>, y: Vec<f64>, n_features: usize, task: Task) -> Self {
        let norm = Normalization::fit(&raw_x, n_features);
        Self::with_normalization(raw_x, y, n_features, task, norm)
    }

    /// Builds a dataset normalized with externally supplied statistics.
    pub fn with_normalization(
        raw_x: Vec<f64>,
        y: Vec<f64>,
        n_features: usize,
        task: Task,
        normalization: Normalization,
    ) -> Self {
        assert_eq!(raw_x.len(), y.len() * n_features, "feature matrix shape");
        let x: Vec<f64> = raw_x
            .chunks_exact(n_features.max(1))
            .flat_map(|row| {
                row.iter()
                    .enumerate()
                    .map(|(j, &v)| normalization.apply(j, v))
                    .collect::<Vec<_>>()
            })
            .collect();
        let n = y.len();
        let mut x_cols = vec![0.0; x.len()];
        for i in 0..n {
            for j in 0..n_features {
                x_cols[j * n + i] = x[i * n_features + j];
            }
        }
        let class_labels = match task {
            Task::Classification { n_classes } => (0..n_classes).map(|c| c.to_string()).collect(),
            Task::Regression => Vec::new(),
        };
        Self {
            x,
            x_cols,
            raw_x,
            y,
            n_features,
            task,
            normalization,
            feature_names: (0..n_features).map(|j| format!("x{j}")).collect(),
            target_name: "y".into(),
            class_labels,
        }
    }

    /// A dataset with no rows; its likelihood is identically one.
    pub fn empty(n_features: usize, task: Task) -> Self {
        Self::with_normalization(
            Vec::new(),
            Vec::new(),
            n_features,
            task,
            Normalization {
                min: vec![0.0; n_features],
                max: vec![1.0; n_features],
            },
        )
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn task(&self) -> Task {
        self.task
    }

    /// Normalized feature row.
    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.n_features..(i + 1) * self.n_features]
    }

    /// Normalized values of feature `j` for every row.
    #[inline]
    pub fn column(&self, j: usize) -> &[f64] {
        let n = self.len();
        &self.x_cols[j * n..(j + 1) * n]
    }

    pub fn raw_row(&self, i: usize) -> &[f64] {
        &self.raw_x[i * self.n_features..(i + 1) * self.n_features]
    }

    pub fn x(&self) -> &[f64] {
        &self.x
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn class_of(&self, i: usize) -> usize {
        self.y[i] as usize
    }

    pub fn normalization(&self) -> &Normalization {
        &self.normalization
    }

    pub fn target_mean(&self) -> f64 {
        self.y.iter().sum::<f64>() / self.len() as f64
    }

    /// Population variance of the targets.
    pub fn target_variance(&self) -> f64 {
        let m = self.target_mean();
        self.y.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / self.len() as f64
    }

    fn subset(&self, idx: &[usize]) -> (Vec<f64>, Vec<f64>) {
        let mut raw = Vec::with_capacity(idx.len() * self.n_features);
        let mut y = Vec::with_capacity(idx.len());
        for &i in idx {
            raw.extend_from_slice(self.raw_row(i));
            y.push(self.y[i]);
        }
        (raw, y)
    }

    fn relabel(mut self, like: &Dataset) -> Self {
        self.feature_names = like.feature_names.clone();
        self.target_name = like.target_name.clone();
        self.class_labels = like.class_labels.clone();
        self
    }
}

/// Seeded shuffle-then-split; the test side is normalized with training
/// statistics.
pub fn split(data: &Dataset, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset), DataError> {
    let n = data.len();
    let n_test = (test_fraction * n as f64).round() as usize;
    if !(test_fraction > 0.0 && test_fraction < 1.0) || n_test == 0 || n_test >= n {
        return Err(DataError::EmptySplit {
            fraction: test_fraction,
            n,
        });
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut substream(seed, "split", 0, 0));
    let (test_idx, train_idx) = idx.split_at(n_test);
    let (raw_tr, y_tr) = data.subset(train_idx);
    let (raw_te, y_te) = data.subset(test_idx);
    let train = Dataset::from_raw(raw_tr, y_tr, data.n_features, data.task).relabel(data);
    let test = Dataset::with_normalization(
        raw_te,
        y_te,
        data.n_features,
        data.task,
        train.normalization.clone(),
    )
    .relabel(data);
    Ok((train, test))
}

/// Split indices exposed for partition checks.
pub fn split_indices(n: usize, test_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let n_test = (test_fraction * n as f64).round() as usize;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut substream(seed, "split", 0, 0));
    let (te, tr) = idx.split_at(n_test.min(n));
    (tr.to_vec(), te.to_vec())
}

// ---------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct CsvSchema {
    pub target_col: String,
    pub task: TaskKind,
}

/// Parsed CSV before normalization and label mapping.
#[derive(Debug, Clone)]
pub struct RawTable {
    pub feature_names: Vec<String>,
    pub target_name: String,
    pub features: Vec<f64>,
    pub targets: Vec<String>,
}

pub fn read_csv_table(path: &Path, target_col: &str) -> Result<RawTable, DataError> {
    let p = path.display().to_string();
    let file = std::fs::File::open(path).map_err(|source| DataError::Io {
        path: p.clone(),
        source,
    })?;
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .comment(Some(b'#'))
        .flexible(true)
        .from_reader(file);
    let headers: Vec<String> = rdr
        .headers()
        .map_err(|source| DataError::Csv {
            path: p.clone(),
            source,
        })?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    if headers.is_empty() || headers.iter().all(String::is_empty) {
        return Err(DataError::Empty { path: p });
    }
    let target_idx = headers
        .iter()
        .position(|h| h == target_col)
        .ok_or_else(|| DataError::MissingColumn {
            path: p.clone(),
            column: target_col.to_string(),
        })?;
    let feature_names: Vec<String> = headers
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != target_idx)
        .map(|(_, h)| h.clone())
        .collect();
    let mut features = Vec::new();
    let mut targets = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|source| DataError::Csv {
            path: p.clone(),
            source,
        })?;
        // header is line 1
        let row = r + 2;
        if rec.len() != headers.len() {
            return Err(DataError::Ragged {
                path: p.clone(),
                row,
                found: rec.len(),
                expected: headers.len(),
            });
        }
        for (j, field) in rec.iter().enumerate() {
            let field = field.trim();
            if j == target_idx {
                targets.push(field.to_string());
            } else {
                let v: f64 = field.parse().map_err(|_| DataError::NotNumeric {
                    path: p.clone(),
                    row,
                    column: headers[j].clone(),
                    value: field.to_string(),
                })?;
                features.push(v);
            }
        }
    }
    if targets.is_empty() {
        return Err(DataError::Empty { path: p });
    }
    Ok(RawTable {
        feature_names,
        target_name: target_col.to_string(),
        features,
        targets,
    })
}

/// Converts a parsed table into a dataset. `reference` supplies the
/// normalization and label map of an already-loaded training set.
pub fn table_to_dataset(
    table: RawTable,
    task: TaskKind,
    reference: Option<&Dataset>,
    path: &str,
) -> Result<Dataset, DataError> {
    let n_features = table.feature_names.len();
    if let Some(r) = reference {
        if r.n_features() != n_features {
            return Err(DataError::FeatureMismatch {
                expected: r.n_features(),
                found: n_features,
            });
        }
    }
    let (y, task, labels) = match task {
        TaskKind::Regression => {
            let y = table
                .targets
                .iter()
                .enumerate()
                .map(|(r, s)| {
                    s.parse::<f64>().map_err(|_| DataError::NotNumeric {
                        path: path.to_string(),
                        row: r + 2,
                        column: table.target_name.clone(),
                        value: s.clone(),
                    })
                })
                .collect::<Result<Vec<_>, _>>()?;
            (y, Task::Regression, Vec::new())
        }
        TaskKind::Classification => {
            let mut labels: Vec<String> = reference.map(|r| r.class_labels.clone()).unwrap_or_default();
            let mut index: HashMap<String, usize> =
                labels.iter().enumerate().map(|(i, l)| (l.clone(), i)).collect();
            let mut y = Vec::with_capacity(table.targets.len());
            for s in &table.targets {
                let id = match index.get(s) {
                    Some(&id) => id,
                    None if reference.is_some() => {
                        return Err(DataError::UnknownLabel { label: s.clone() })
                    }
                    None => {
                        labels.push(s.clone());
                        index.insert(s.clone(), labels.len() - 1);
                        labels.len() - 1
                    }
                };
                y.push(id as f64);
            }
            let n_classes = labels.len();
            (y, Task::Classification { n_classes }, labels)
        }
    };
    let mut ds = match reference {
        Some(r) => {
            Dataset::with_normalization(table.features, y, n_features, task, r.normalization().clone())
        }
        None => Dataset::from_raw(table.features, y, n_features, task),
    };
    ds.feature_names = table.feature_names;
    ds.target_name = table.target_name;
    ds.class_labels = labels;
    Ok(ds)
}

pub fn load_csv(path: &Path, schema: &CsvSchema) -> Result<Dataset, DataError> {
    let table = read_csv_table(path, &schema.target_col)?;
    table_to_dataset(table, schema.task, None, &path.display().to_string())
}

/// Loads a held-out file using the training set's normalization and labels.
pub fn load_csv_like(path: &Path, schema: &CsvSchema, train: &Dataset) -> Result<Dataset, DataError> {
    let table = read_csv_table(path, &schema.target_col)?;
    table_to_dataset(table, schema.task, Some(train), &path.display().to_string())
}

/// Writes raw (unnormalized) features and targets with a header row.
pub fn write_csv(data: &Dataset, path: &Path) -> Result<(), DataError> {
    let p = path.display().to_string();
    let mut w = csv::Writer::from_path(path).map_err(|source| DataError::Csv {
        path: p.clone(),
        source,
    })?;
    let mut header = data.feature_names.clone();
    header.push(data.target_name.clone());
    let io = |source: csv::Error| DataError::Csv {
        path: p.clone(),
        source,
    };
    w.write_record(&header).map_err(io)?;
    for i in 0..data.len() {
        let mut rec: Vec<String> = data.raw_row(i).iter().map(|v| format!("{v:?}")).collect();
        rec.push(match data.task() {
            Task::Regression => format!("{:?}", data.y()[i]),
            Task::Classification { .. } => data.class_labels[data.class_of(i)].clone(),
        });
        w.write_record(&rec).map_err(io)?;
    }
    w.flush().map_err(|source| DataError::Io { path: p, source })
}

// ---------------------------------------------------------------------------
// Synthetic generators
// ---------------------------------------------------------------------------

pub const WU_NOISE_SD: f64 = 0.25;
pub const CGM_NOISE_SD: f64 = 0.2;
pub const WU_BLOCK: usize = 100;
pub const CGM_SIZE: usize = 800;

/// Region mean of the three-block design, on raw inputs `(x1, x2, x3)`.
pub fn wu_mean(x: &[f64]) -> f64 {
    if x[0] <= 0.5 {
        if x[1] <= 0.5 {
            1.0
        } else {
            3.0
        }
    } else {
        5.0
    }
}

/// Leaf mean of the five-leaf generating tree, on raw inputs `(x0, x1)`.
pub fn cgm_mean(x: &[f64]) -> f64 {
    let (x0, x1) = (x[0], x[1]);
    if x1 < 4.0 {
        if x0 < 3.0 {
            1.0
        } else if x0 < 7.0 {
            5.0
        } else {
            8.0
        }
    } else if x0 < 5.0 {
        8.0
    } else {
        2.0
    }
}

fn wu_block<R: Rng>(rng: &mut R, n_per_block: usize, noise_sd: f64) -> (Vec<f64>, Vec<f64>) {
    let noise = Normal::new(0.0, noise_sd).expect("positive sd");
    let blocks = [
        [(0.1, 0.4), (0.1, 0.4), (0.6, 0.9)],
        [(0.1, 0.4), (0.6, 0.9), (0.6, 0.9)],
        [(0.6, 0.9), (0.1, 0.9), (0.1, 0.4)],
    ];
    let mut raw = Vec::with_capacity(3 * n_per_block * 3);
    let mut y = Vec::with_capacity(3 * n_per_block);
    for block in &blocks {
        for _ in 0..n_per_block {
            let row: Vec<f64> = block.iter().map(|&(a, b)| rng.random_range(a..b)).collect();
            y.push(wu_mean(&row) + noise.sample(rng));
            raw.extend(row);
        }
    }
    (raw, y)
}

fn named(mut d: Dataset, names: &[&str]) -> Dataset {
    d.feature_names = names.iter().map(|s| s.to_string()).collect();
    d.target_name = "y".into();
    d
}

/// Three-block design with 100 points per block for both train and test.
pub fn generate_wu(seed: u64) -> (Dataset, Dataset) {
    generate_wu_sized(seed, WU_BLOCK, WU_BLOCK, WU_NOISE_SD)
}

pub fn generate_wu_sized(seed: u64, train_block: usize, test_block: usize, noise_sd: f64) -> (Dataset, Dataset) {
    let (raw_tr, y_tr) = wu_block(&mut substream(seed, "wu", 0, 0), train_block, noise_sd);
    let (raw_te, y_te) = wu_block(&mut substream(seed, "wu", 1, 0), test_block, noise_sd);
    let train = named(Dataset::from_raw(raw_tr, y_tr, 3, Task::Regression), &["x1", "x2", "x3"]);
    let test = named(
        Dataset::with_normalization(raw_te, y_te, 3, Task::Regression, train.normalization().clone()),
        &["x1", "x2", "x3"],
    );
    (train, test)
}

fn cgm_sample<R: Rng>(rng: &mut R, n: usize, noise_sd: f64) -> (Vec<f64>, Vec<f64>) {
    let noise = Normal::new(0.0, noise_sd).expect("positive sd");
    let mut raw = Vec::with_capacity(2 * n);
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let row = [rng.random_range(0.0..10.0), rng.random_range(0.0..10.0)];
        y.push(cgm_mean(&row) + noise.sample(rng));
        raw.extend_from_slice(&row);
    }
    (raw, y)
}

/// 800 training and 800 test points from the five-leaf generating tree.
pub fn generate_cgm(seed: u64) -> (Dataset, Dataset) {
    let (raw_tr, y_tr) = cgm_sample(&mut substream(seed, "cgm", 0, 0), CGM_SIZE, CGM_NOISE_SD);
    let (raw_te, y_te) = cgm_sample(&mut substream(seed, "cgm", 1, 0), CGM_SIZE, CGM_NOISE_SD);
    let train = named(Dataset::from_raw(raw_tr, y_tr, 2, Task::Regression), &["x0", "x1"]);
    let test = named(
        Dataset::with_normalization(raw_te, y_te, 2, Task::Regression, train.normalization().clone()),
        &["x0", "x1"],
    );
    (train, test)
}

pub fn generate_builtin(name: &str, seed: u64) -> Result<(Dataset, Dataset), DataError> {
    match name {
        "wu" => Ok(generate_wu(seed)),
        "cgm" => Ok(generate_cgm(seed)),
        other => Err(DataError::UnknownBuiltin(other.to_string())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_tmp(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn wu_region_rules() {
        assert_eq!(wu_mean(&[0.2, 0.3, 0.7]), 1.0);
        assert_eq!(wu_mean(&[0.2, 0.7, 0.7]), 3.0);
        assert_eq!(wu_mean(&[0.8, 0.1, 0.2]), 5.0);
        assert_eq!(wu_mean(&[0.8, 0.9, 0.2]), 5.0);
    }

    #[test]
    fn cgm_leaf_rules() {
        assert_eq!(cgm_mean(&[1.0, 2.0]), 1.0);
        assert_eq!(cgm_mean(&[8.0, 2.0]), 8.0);
        assert_eq!(cgm_mean(&[6.0, 6.0]), 2.0);
        assert_eq!(cgm_mean(&[4.0, 2.0]), 5.0);
        assert_eq!(cgm_mean(&[1.0, 9.0]), 8.0);
    }

    #[test]
    fn wu_generator_shape_and_noise() {
        let (train, test) = generate_wu(5);
        assert_eq!(train.len(), 300);
        assert_eq!(test.len(), 300);
        assert_eq!(train.n_features(), 3);
        let resid: Vec<f64> = (0..train.len())
            .map(|i| train.y()[i] - wu_mean(train.raw_row(i)))
            .collect();
        let var = resid.iter().map(|r| r * r).sum::<f64>() / resid.len() as f64;
        // 300 draws of N(0, 0.0625): sd of the variance estimate is ~0.0051
        assert!((var - 0.0625).abs() < 0.02, "residual variance {var}");
        for v in train.x() {
            assert!((0.0..=1.0).contains(v));
        }
        // second and third block share x3 ranges with the first / opposite side
        for i in 0..100 {
            assert_eq!(wu_mean(train.raw_row(i)), 1.0);
            assert_eq!(wu_mean(train.raw_row(100 + i)), 3.0);
            assert_eq!(wu_mean(train.raw_row(200 + i)), 5.0);
        }
    }

    #[test]
    fn wu_partition_matches_both_generating_trees() {
        // Tree A: x1 <= 0.5 then x2 <= 0.5. Tree B: x3 <= 0.5 (right), then x2 <= 0.5.
        let (train, _) = generate_wu(9);
        for i in 0..train.len() {
            let x = train.raw_row(i);
            let a = if x[0] <= 0.5 { if x[1] <= 0.5 { 0 } else { 1 } } else { 2 };
            let b = if x[2] > 0.5 { if x[1] <= 0.5 { 0 } else { 1 } } else { 2 };
            assert_eq!(a, b);
        }
    }

    #[test]
    fn generators_are_deterministic() {
        let (a, _) = generate_cgm(3);
        let (b, _) = generate_cgm(3);
        assert_eq!(a.x(), b.x());
        assert_eq!(a.y(), b.y());
        let (c, _) = generate_cgm(4);
        assert_ne!(a.y(), c.y());
        assert_eq!(a.len(), 800);
    }

    #[test]
    fn csv_min_max_endpoints_and_constant_column() {
        let f = write_tmp("a,b,y\n0,5,1.5\n10,5,2.5\n");
        let schema = CsvSchema {
            target_col: "y".into(),
            task: TaskKind::Regression,
        };
        let d = load_csv(f.path(), &schema).unwrap();
        assert_eq!(d.row(0), &[0.0, 0.0]);
        assert_eq!(d.row(1), &[1.0, 0.0]);
        assert_eq!(d.y(), &[1.5, 2.5]);
        assert_eq!(d.feature_names, vec!["a", "b"]);
    }

    #[test]
    fn csv_label_mapping_first_appearance() {
        let f = write_tmp("x,label\n1,a\n2,b\n3,a\n");
        let schema = CsvSchema {
            target_col: "label".into(),
            task: TaskKind::Classification,
        };
        let d = load_csv(f.path(), &schema).unwrap();
        assert_eq!(d.y(), &[0.0, 1.0, 0.0]);
        assert_eq!(d.task(), Task::Classification { n_classes: 2 });
        assert_eq!(d.class_labels, vec!["a", "b"]);
    }

    #[test]
    fn csv_errors_name_row_and_column() {
        let schema = CsvSchema {
            target_col: "y".into(),
            task: TaskKind::Regression,
        };
        let f = write_tmp("a,y\n1,2\nfoo,3\n");
        let err = load_csv(f.path(), &schema).unwrap_err();
        match err {
            DataError::NotNumeric { row, column, .. } => {
                assert_eq!(row, 3);
                assert_eq!(column, "a");
            }
            e => panic!("unexpected {e}"),
        }
        let f = write_tmp("a,b\n1,2\n");
        assert!(matches!(load_csv(f.path(), &schema), Err(DataError::MissingColumn { .. })));
        let f = write_tmp("");
        assert!(load_csv(f.path(), &schema).is_err());
        let f = write_tmp("a,y\n");
        assert!(matches!(load_csv(f.path(), &schema), Err(DataError::Empty { .. })));
    }

    #[test]
    fn split_sizes_and_partition() {
        let raw: Vec<f64> = (0..10).map(|v| v as f64).collect();
        let y: Vec<f64> = (0..10).map(|v| v as f64).collect();
        let d = Dataset::from_raw(raw, y, 1, Task::Regression);
        let (tr, te) = split(&d, 0.3, 1).unwrap();
        assert_eq!((tr.len(), te.len()), (7, 3));
        let (tr2, te2) = split(&d, 0.3, 1).unwrap();
        assert_eq!(tr.y(), tr2.y());
        assert_eq!(te.y(), te2.y());
        let (a, b) = split_indices(10, 0.3, 1);
        let mut all: Vec<usize> = a.iter().chain(b.iter()).copied().collect();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(te.y().to_vec(), b.iter().map(|&i| i as f64).collect::<Vec<_>>());
        assert!(split(&d, 0.01, 1).is_err());
        assert!(split(&d, 1.0, 1).is_err());
        // test side uses training min/max and is clamped
        for v in te.x() {
            assert!((0.0..=1.0).contains(v));
        }
    }

    #[test]
    fn normalization_roundtrip() {
        let (train, _) = generate_cgm(1);
        let n = train.normalization();
        for i in 0..train.len() {
            for j in 0..2 {
                let back = n.invert(j, train.row(i)[j]);
                assert!((back - train.raw_row(i)[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn write_then_load_roundtrip() {
        let (train, _) = generate_wu(2);
        let f = tempfile::NamedTempFile::new().unwrap();
        write_csv(&train, f.path()).unwrap();
        let schema = CsvSchema {
            target_col: "y".into(),
            task: TaskKind::Regression,
        };
        let back = load_csv(f.path(), &schema).unwrap();
        assert_eq!(back.y(), train.y());
        assert_eq!(back.x(), train.x());
    }
}
