//! Dataset ingestion, standardization, splitting and synthetic generation.
//!
//! Design matrices always carry a leading constant column of ones; feature
//! indices `1..=p` address the real features.

use std::collections::HashSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{MapleError, Result};

/// A design matrix with constant column 0, a response, and feature names
/// for columns `1..=p`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub x: Vec<Vec<f64>>,
    pub y: Vec<f64>,
    pub feature_names: Vec<String>,
    pub standardized: bool,
    /// Present when `standardized` is set.
    pub standardizer: Option<Standardizer>,
}

impl Dataset {
    /// Builds a dataset from raw feature rows (without the constant column).
    pub fn from_features(
        features: Vec<Vec<f64>>,
        y: Vec<f64>,
        feature_names: Vec<String>,
    ) -> Result<Self> {
        let p = feature_names.len();
        if features.is_empty() || p == 0 {
            return Err(MapleError::invalid("dataset needs n >= 1 and p >= 1"));
        }
        if features.len() != y.len() {
            return Err(MapleError::DimensionMismatch {
                expected: features.len(),
                got: y.len(),
            });
        }
        let mut x = Vec::with_capacity(features.len());
        for row in features {
            if row.len() != p {
                return Err(MapleError::DimensionMismatch {
                    expected: p,
                    got: row.len(),
                });
            }
            let mut full = Vec::with_capacity(p + 1);
            full.push(1.0);
            full.extend(row);
            x.push(full);
        }
        Ok(Dataset {
            x,
            y,
            feature_names,
            standardized: false,
            standardizer: None,
        })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    /// Number of real features (excluding the constant column).
    pub fn p(&self) -> usize {
        self.feature_names.len()
    }

    pub fn rows(&self, idx: &[usize]) -> Vec<Vec<f64>> {
        idx.iter().map(|&i| self.x[i].clone()).collect()
    }

    pub fn targets(&self, idx: &[usize]) -> Vec<f64> {
        idx.iter().map(|&i| self.y[i]).collect()
    }

    /// Column index (1-based) of a named feature.
    pub fn feature_index(&self, name: &str) -> Option<usize> {
        self.feature_names.iter().position(|f| f == name).map(|j| j + 1)
    }

    /// Replaces the response, e.g. with a black-box model's predictions.
    pub fn with_response(&self, y: Vec<f64>) -> Result<Self> {
        if y.len() != self.n() {
            return Err(MapleError::DimensionMismatch {
                expected: self.n(),
                got: y.len(),
            });
        }
        Ok(Dataset { y, ..self.clone() })
    }
}

/// Reads a rectangular numeric CSV with a header row. `target` names the
/// response column; the remaining columns keep their file order.
pub fn load_csv(path: impl AsRef<Path>, target: &str) -> Result<Dataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| MapleError::io(path, e))?;
    read_csv(file, target)
}

pub fn read_csv<R: std::io::Read>(reader: R, target: &str) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let mut seen = HashSet::new();
    for h in &headers {
        if !seen.insert(h.as_str()) {
            return Err(MapleError::DuplicateHeader(h.clone()));
        }
    }
    let target_col = headers
        .iter()
        .position(|h| h == target)
        .ok_or_else(|| MapleError::MissingTarget(target.to_string()))?;

    let mut features = Vec::new();
    let mut y = Vec::new();
    for (r, record) in rdr.records().enumerate() {
        let record = record?;
        let mut row = Vec::with_capacity(headers.len() - 1);
        for (c, cell) in record.iter().enumerate() {
            let value = parse_cell(cell).ok_or_else(|| MapleError::NonNumeric {
                row: r + 1,
                column: headers[c].clone(),
                value: cell.to_string(),
            })?;
            if c == target_col {
                y.push(value);
            } else {
                row.push(value);
            }
        }
        features.push(row);
    }
    let names = headers
        .iter()
        .enumerate()
        .filter(|&(c, _)| c != target_col)
        .map(|(_, h)| h.clone())
        .collect();
    Dataset::from_features(features, y, names)
}

fn parse_cell(cell: &str) -> Option<f64> {
    cell.trim().parse::<f64>().ok().filter(|v| v.is_finite())
}

/// Writes raw features (undoing any standardization) and the response.
pub fn write_csv(ds: &Dataset, path: impl AsRef<Path>, target: &str) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| MapleError::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    let mut header = ds.feature_names.clone();
    header.push(target.to_string());
    w.write_record(&header)?;
    for (row, &y) in ds.x.iter().zip(&ds.y) {
        let (row, y) = match &ds.standardizer {
            Some(s) => (s.inverse_row(row), s.inverse_y(y)),
            None => (row.clone(), y),
        };
        let mut rec: Vec<String> = row[1..].iter().map(|v| v.to_string()).collect();
        rec.push(y.to_string());
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| MapleError::io(path, e))?;
    Ok(())
}

/// Disjoint train/validation/test row indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub train_idx: Vec<usize>,
    pub val_idx: Vec<usize>,
    pub test_idx: Vec<usize>,
    pub seed: u64,
}

/// Uniform random permutation of `0..n`; the first ⌈n/2⌉ rows train, the
/// next ⌈n/4⌉ validate, the rest test.
pub fn split(n: usize, seed: u64) -> Result<SplitAssignment> {
    if n < 4 {
        return Err(MapleError::InsufficientRows { needed: 4, have: n });
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = n.div_ceil(2);
    let n_val = n.div_ceil(4);
    let test_idx = perm.split_off(n_train + n_val);
    let val_idx = perm.split_off(n_train);
    Ok(SplitAssignment {
        train_idx: perm,
        val_idx,
        test_idx,
        seed,
    })
}

/// Affine per-column transformation fitted on a training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    /// Means of columns `1..=p` (index 0 of these vectors is column 1).
    pub x_mean: Vec<f64>,
    pub x_std: Vec<f64>,
    pub y_mean: f64,
    pub y_std: f64,
}

impl Standardizer {
    pub fn fit(ds: &Dataset, train_idx: &[usize]) -> Result<Self> {
        if train_idx.is_empty() {
            return Err(MapleError::invalid("empty training split"));
        }
        let p = ds.p();
        let mut x_mean = Vec::with_capacity(p);
        let mut x_std = Vec::with_capacity(p);
        for j in 1..=p {
            let (m, s) = mean_std(train_idx.iter().map(|&i| ds.x[i][j]));
            if !(s > 0.0) {
                return Err(MapleError::ZeroVariance {
                    column: ds.feature_names[j - 1].clone(),
                });
            }
            x_mean.push(m);
            x_std.push(s);
        }
        let (y_mean, y_std) = mean_std(train_idx.iter().map(|&i| ds.y[i]));
        if !(y_std > 0.0) {
            return Err(MapleError::ZeroVariance {
                column: "<response>".into(),
            });
        }
        Ok(Standardizer {
            x_mean,
            x_std,
            y_mean,
            y_std,
        })
    }

    pub fn p(&self) -> usize {
        self.x_mean.len()
    }

    /// Maps a full row (constant column included) into standardized units.
    pub fn transform_row(&self, row: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(row.len());
        out.push(row[0]);
        for (j, v) in row[1..].iter().enumerate() {
            out.push((v - self.x_mean[j]) / self.x_std[j]);
        }
        out
    }

    pub fn inverse_row(&self, row: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(row.len());
        out.push(row[0]);
        for (j, v) in row[1..].iter().enumerate() {
            out.push(v * self.x_std[j] + self.x_mean[j]);
        }
        out
    }

    /// Feature `j` (1-based) value into standardized units.
    pub fn transform_feature(&self, j: usize, v: f64) -> f64 {
        (v - self.x_mean[j - 1]) / self.x_std[j - 1]
    }

    pub fn inverse_feature(&self, j: usize, v: f64) -> f64 {
        v * self.x_std[j - 1] + self.x_mean[j - 1]
    }

    pub fn transform_y(&self, y: f64) -> f64 {
        (y - self.y_mean) / self.y_std
    }

    pub fn inverse_y(&self, y: f64) -> f64 {
        y * self.y_std + self.y_mean
    }
}

/// Population mean and standard deviation (divisor n).
fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Standardizes features and response with training-split statistics. The
/// constant column is left untouched.
pub fn standardize(ds: &Dataset, split: &SplitAssignment) -> Result<Dataset> {
    if ds.standardized {
        return Err(MapleError::invalid("dataset is already standardized"));
    }
    let s = Standardizer::fit(ds, &split.train_idx)?;
    Ok(Dataset {
        x: ds.x.iter().map(|r| s.transform_row(r)).collect(),
        y: ds.y.iter().map(|&v| s.transform_y(v)).collect(),
        feature_names: ds.feature_names.clone(),
        standardized: true,
        standardizer: Some(s),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SyntheticKind {
    Linear,
    /// Shifted inverse logistic.
    Sil,
    Step,
}

impl SyntheticKind {
    /// Response function of the active feature.
    pub fn response(self, t: f64) -> f64 {
        match self {
            SyntheticKind::Linear => t,
            SyntheticKind::Sil => 1.0 / (1.0 + (-20.0 * (t - 0.5)).exp()),
            SyntheticKind::Step => {
                if t < 1.0 / 3.0 {
                    0.0
                } else if t < 2.0 / 3.0 {
                    0.5
                } else {
                    1.0
                }
            }
        }
    }
}

impl std::str::FromStr for SyntheticKind {
    type Err = MapleError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(SyntheticKind::Linear),
            "sil" => Ok(SyntheticKind::Sil),
            "step" => Ok(SyntheticKind::Step),
            other => Err(MapleError::invalid(format!("unknown synthetic kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub kind: SyntheticKind,
    pub n: usize,
    pub p: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

/// Rows uniform on `[0,1]^p`; `y = f(x1) + N(0, σ²)` with only the first
/// feature active.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    if spec.n == 0 || spec.p == 0 {
        return Err(MapleError::invalid("synthetic data needs n >= 1 and p >= 1"));
    }
    if !(spec.noise_sigma >= 0.0) {
        return Err(MapleError::invalid("noise sigma must be >= 0"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| MapleError::invalid(e.to_string()))?;
    let mut features = Vec::with_capacity(spec.n);
    let mut y = Vec::with_capacity(spec.n);
    for _ in 0..spec.n {
        let row: Vec<f64> = (0..spec.p).map(|_| rng.gen::<f64>()).collect();
        let eps = if spec.noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
        y.push(spec.kind.response(row[0]) + eps);
        features.push(row);
    }
    let names = (1..=spec.p).map(|j| format!("x{j}")).collect();
    Dataset::from_features(features, y, names)
}
