//! Two-modality tabular datasets: synthetic generation, CSV I/O and
//! train-split standardization.
//!
//! CSV layout (UTF-8, comma separated, `.` decimal point, LF line endings):
//!
//! ```text
//! label,m1_0,...,m1_{d1-1},m2_0,...,m2_{d2-1}
//! ```
//!
//! Labels are 0-based class indices. Values are written with Rust's shortest
//! round-trip float formatting, so a write/read cycle is lossless.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Gaussian;

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_rows(cols: usize, rows: &[Vec<f64>]) -> Result<Self> {
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::DimensionMismatch { context: "matrix row", expected: cols, actual: r.len() });
            }
            data.extend_from_slice(r);
        }
        Ok(Self { rows: rows.len(), cols, data })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    fn select_rows(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Self { rows: indices.len(), cols: self.cols, data }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Per-modality, per-feature z-scoring statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub means: Vec<Vec<f64>>,
    pub stds: Vec<Vec<f64>>,
}

/// Features below this standard deviation are centred but not scaled.
pub const MIN_STD: f64 = 1e-12;

impl Standardization {
    /// Population statistics of `train`.
    pub fn fit(train: &Dataset) -> Result<Self> {
        if train.n_samples() == 0 {
            return Err(Error::EmptyInput("standardization needs a non-empty training split"));
        }
        let n = train.n_samples() as f64;
        let mut means = Vec::new();
        let mut stds = Vec::new();
        for m in &train.modalities {
            let mut mean = vec![0.0; m.cols];
            for i in 0..m.rows {
                for (acc, x) in mean.iter_mut().zip(m.row(i)) {
                    *acc += x;
                }
            }
            mean.iter_mut().for_each(|x| *x /= n);
            let mut var = vec![0.0; m.cols];
            for i in 0..m.rows {
                for ((acc, x), mu) in var.iter_mut().zip(m.row(i)).zip(&mean) {
                    *acc += (x - mu) * (x - mu);
                }
            }
            let std = var.iter().map(|v| (v / n).sqrt()).map(|s| if s < MIN_STD { 1.0 } else { s }).collect();
            means.push(mean);
            stds.push(std);
        }
        Ok(Self { means, stds })
    }

    pub fn apply(&self, ds: &Dataset) -> Result<Dataset> {
        if ds.modalities.len() != self.means.len() {
            return Err(Error::DimensionMismatch {
                context: "standardization modalities",
                expected: self.means.len(),
                actual: ds.modalities.len(),
            });
        }
        let mut out = ds.clone();
        for ((m, mean), std) in out.modalities.iter_mut().zip(&self.means).zip(&self.stds) {
            if m.cols != mean.len() {
                return Err(Error::DimensionMismatch {
                    context: "standardization features",
                    expected: mean.len(),
                    actual: m.cols,
                });
            }
            for i in 0..m.rows {
                for ((x, mu), s) in m.row_mut(i).iter_mut().zip(mean).zip(std) {
                    *x = (*x - mu) / s;
                }
            }
        }
        out.standardization = Some(self.clone());
        Ok(out)
    }
}

/// Labelled samples with one feature matrix per modality.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub modalities: Vec<Matrix>,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub split: Split,
    /// Set once the features have been standardized.
    pub standardization: Option<Standardization>,
}

impl Dataset {
    pub fn new(modalities: Vec<Matrix>, labels: Vec<usize>, classes: usize, split: Split) -> Result<Self> {
        for m in &modalities {
            if m.rows != labels.len() {
                return Err(Error::DimensionMismatch { context: "dataset rows", expected: labels.len(), actual: m.rows });
            }
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        Ok(Self { modalities, labels, classes, split, standardization: None })
    }

    pub fn n_samples(&self) -> usize {
        self.labels.len()
    }

    pub fn dims(&self) -> Vec<usize> {
        self.modalities.iter().map(|m| m.cols).collect()
    }

    /// Feature rows of sample `i`, one slice per modality.
    pub fn sample(&self, i: usize) -> Vec<&[f64]> {
        self.modalities.iter().map(|m| m.row(i)).collect()
    }

    pub fn subset(&self, indices: &[usize], split: Split) -> Self {
        Self {
            modalities: self.modalities.iter().map(|m| m.select_rows(indices)).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
            split,
            standardization: self.standardization.clone(),
        }
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }
}

/// Fits statistics on `train` and applies them to `train` and every other
/// split.
pub fn standardize(train: &Dataset, others: &[&Dataset]) -> Result<(Dataset, Vec<Dataset>, Standardization)> {
    let stats = Standardization::fit(train)?;
    let train = stats.apply(train)?;
    let others = others.iter().map(|d| stats.apply(d)).collect::<Result<Vec<_>>>()?;
    Ok((train, others, stats))
}

/// Gaussian class-conditional blobs, one block of features per modality.
///
/// Within each class a modality's features are N(mean_k, I). Class means lie
/// on the first feature axis, `separation` within-class standard deviations
/// apart and centred on the origin; all other axes are pure noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub n_per_class: usize,
    pub dims: Vec<usize>,
    pub separation: Vec<f64>,
    pub seed: u64,
    /// Explicit (train, val, test) sizes. When set, the total sample count is
    /// their sum and labels are assigned round-robin, so class sizes differ by
    /// at most one; otherwise `classes · n_per_class` samples are split 70/15/15.
    #[serde(default)]
    pub split_counts: Option<[usize; 3]>,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self { classes: 3, n_per_class: 200, dims: vec![4, 4], separation: vec![3.0, 3.0], seed: 42, split_counts: None }
    }
}

impl SyntheticSpec {
    /// The reference configuration used by the acceptance suite: three
    /// classes, separation 3 in both modalities, 500/100/100 split, seed 42.
    pub fn reference() -> Self {
        Self { split_counts: Some([500, 100, 100]), ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::InvalidParameter(format!("need at least 2 classes, got {}", self.classes)));
        }
        if self.dims.is_empty() || self.dims.contains(&0) {
            return Err(Error::InvalidParameter(format!("modality dims must be positive, got {:?}", self.dims)));
        }
        if self.separation.len() != self.dims.len() {
            return Err(Error::DimensionMismatch {
                context: "separation per modality",
                expected: self.dims.len(),
                actual: self.separation.len(),
            });
        }
        if let Some(s) = self.separation.iter().find(|s| !(**s >= 0.0 && s.is_finite())) {
            return Err(Error::InvalidParameter(format!("separation must be >= 0, got {s}")));
        }
        let total = self.total();
        if total == 0 {
            return Err(Error::EmptyInput("synthetic dataset would have no samples"));
        }
        Ok(())
    }

    pub fn total(&self) -> usize {
        match self.split_counts {
            Some(c) => c.iter().sum(),
            None => self.classes * self.n_per_class,
        }
    }

    fn split_sizes(&self) -> [usize; 3] {
        match self.split_counts {
            Some(c) => c,
            None => {
                let n = self.total();
                let train = (0.70 * n as f64).round() as usize;
                let val = (0.15 * n as f64).round() as usize;
                [train, val, n - train - val]
            }
        }
    }
}

/// Generates, shuffles and splits a synthetic dataset.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(Dataset, Dataset, Dataset)> {
    spec.validate()?;
    let total = spec.total();
    let labels: Vec<usize> = match spec.split_counts {
        Some(_) => (0..total).map(|i| i % spec.classes).collect(),
        None => (0..spec.classes).flat_map(|k| std::iter::repeat_n(k, spec.n_per_class)).collect(),
    };

    let mut gauss = Gaussian::new(spec.seed);
    let centre = 0.5 * (spec.classes - 1) as f64;
    let mut modalities: Vec<Matrix> = spec.dims.iter().map(|&d| Matrix::zeros(total, d)).collect();
    for (i, &label) in labels.iter().enumerate() {
        for (m, sep) in modalities.iter_mut().zip(&spec.separation) {
            let row = m.row_mut(i);
            for x in row.iter_mut() {
                *x = gauss.sample();
            }
            row[0] += (label as f64 - centre) * sep;
        }
    }
    let all = Dataset::new(modalities, labels, spec.classes, Split::Train)?;

    let mut order: Vec<usize> = (0..total).collect();
    order.shuffle(gauss.rng_mut());
    let [n_train, n_val, _] = spec.split_sizes();
    let train = all.subset(&order[..n_train], Split::Train);
    let val = all.subset(&order[n_train..n_train + n_val], Split::Val);
    let test = all.subset(&order[n_train + n_val..], Split::Test);
    Ok((train, val, test))
}

/// Expected CSV shape.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub classes: usize,
    pub dims: Vec<usize>,
}

impl CsvSchema {
    pub fn header(&self) -> Vec<String> {
        let mut h = vec!["label".to_string()];
        for (m, &d) in self.dims.iter().enumerate() {
            h.extend((0..d).map(|j| format!("m{}_{}", m + 1, j)));
        }
        h
    }
}

pub fn write_csv(ds: &Dataset, path: &Path) -> Result<()> {
    let schema = CsvSchema { classes: ds.classes, dims: ds.dims() };
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(BufWriter::new(File::create(path)?));
    let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
    w.write_record(schema.header()).map_err(io)?;
    let mut record = Vec::with_capacity(1 + ds.dims().iter().sum::<usize>());
    for i in 0..ds.n_samples() {
        record.clear();
        record.push(ds.labels[i].to_string());
        for m in &ds.modalities {
            record.extend(m.row(i).iter().map(|x| x.to_string()));
        }
        w.write_record(&record).map_err(io)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))?.flush()?;
    Ok(())
}

/// Reads a dataset written in the layout described at module level. Rows and
/// columns in error messages are 1-based, with the header on row 1.
pub fn load_csv(path: &Path, schema: &CsvSchema) -> Result<Dataset> {
    let display = path.display().to_string();
    let fail = |row: usize, column: usize, message: String| Error::Csv { path: display.clone(), row, column, message };

    let mut reader = csv::ReaderBuilder::new().has_headers(false).flexible(true).from_path(path).map_err(|e| {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::Io(io),
            other => fail(0, 0, format!("{other:?}")),
        }
    })?;
    let mut records = reader.records();

    let expected = schema.header();
    let header = match records.next() {
        None => return Err(fail(1, 0, "missing header".into())),
        Some(r) => r.map_err(|e| fail(1, 0, e.to_string()))?,
    };
    let got: Vec<&str> = header.iter().map(str::trim).collect();
    if got != expected {
        let column = got.iter().zip(&expected).position(|(a, b)| a != b).unwrap_or(got.len().min(expected.len()));
        return Err(fail(1, column + 1, format!("expected header `{}`, found `{}`", expected.join(","), got.join(","))));
    }

    let width = expected.len();
    let mut labels = Vec::new();
    let mut rows: Vec<Vec<Vec<f64>>> = vec![Vec::new(); schema.dims.len()];
    for (idx, rec) in records.enumerate() {
        let line = idx + 2;
        let rec = rec.map_err(|e| fail(line, 0, e.to_string()))?;
        if rec.len() == 1 && rec.get(0).is_some_and(|c| c.trim().is_empty()) {
            continue;
        }
        if rec.len() != width {
            return Err(fail(line, rec.len().min(width) + 1, format!("expected {width} fields, found {}", rec.len())));
        }
        let label_cell = rec.get(0).unwrap_or("").trim();
        let label: usize = label_cell
            .parse()
            .map_err(|_| fail(line, 1, format!("label `{label_cell}` is not a non-negative integer")))?;
        if label >= schema.classes {
            return Err(fail(line, 1, format!("label {label} out of range for {} classes", schema.classes)));
        }
        labels.push(label);
        let mut col = 1;
        for (m, &d) in schema.dims.iter().enumerate() {
            let mut row = Vec::with_capacity(d);
            for _ in 0..d {
                let cell = rec.get(col).unwrap_or("").trim();
                let x: f64 = cell.parse().map_err(|_| fail(line, col + 1, format!("`{cell}` is not a number")))?;
                if !x.is_finite() {
                    return Err(fail(line, col + 1, format!("`{cell}` is not finite")));
                }
                row.push(x);
                col += 1;
            }
            rows[m].push(row);
        }
    }
    if labels.is_empty() {
        return Err(Error::EmptyInput("csv file has no data rows"));
    }
    let modalities =
        rows.iter().zip(&schema.dims).map(|(r, &d)| Matrix::from_rows(d, r)).collect::<Result<Vec<_>>>()?;
    Dataset::new(modalities, labels, schema.classes, Split::Train)
}

/// Sidecar metadata written next to generated CSV files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub classes: usize,
    pub dims: Vec<usize>,
    pub seed: u64,
    pub spec: SyntheticSpec,
    pub split_sizes: [usize; 3],
    pub standardization: Standardization,
    pub config_hash: String,
}
