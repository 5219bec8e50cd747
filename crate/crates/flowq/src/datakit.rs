//! Dataset ingestion, synthetic flow-series generation, normalization,
//! temporal splitting, and cross-validation fold construction.

use std::fmt;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error reading {path}: {source}")]
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
    #[error("file {path} is empty")]
    EmptyFile { path: String },
    #[error("column '{column}' not found in {path}")]
    MissingColumn { path: String, column: String },
    #[error("non-numeric value '{value}' at row {row}, column '{column}'")]
    BadCell { row: usize, column: String, value: String },
    #[error("split would leave an empty partition (N={n}, train={train}, val={val}, test={test})")]
    EmptyPartition { n: usize, train: usize, val: usize, test: usize },
    #[error("need at least {min} samples for {k} folds, got {n}")]
    TooFewSamples { n: usize, k: usize, min: usize },
    #[error("fold count must be >= 2, got {0}")]
    BadFoldCount (usize),
}

/// Sensor-input matrix plus flow target, row-aligned.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    /// N rows of D sensor readings each.
    pub inputs: Vec<Vec<f64>>,
    /// N target flow values.
    pub targets: Vec<f64>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, inputs: Vec<Vec<f64>>, targets: Vec<f64>) -> Self {
        let ds = Self { name: name.into(), inputs, targets };
        assert!(ds.len() >= 1, "dataset must be non-empty");
        assert_eq!(ds.inputs.len(), ds.targets.len(), "row count mismatch");
        let d = ds.dim();
        assert!(d >= 1);
        assert!(ds.inputs.iter().all(|r| r.len() == d), "ragged input rows");
        assert!(
            ds.inputs.iter().flatten().all(|v| v.is_finite())
                && ds.targets.iter().all(|v| v.is_finite()),
            "non-finite values"
        );
        ds
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs[0].len()
    }

    pub fn slice(&self, range: std::ops::Range<usize>) -> Dataset {
        Dataset {
            name: self.name.clone(),
            inputs: self.inputs[range.clone()].to_vec(),
            targets: self.targets[range].to_vec(),
        }
    }

    /// Concatenation of row slices, used by fold construction.
    fn gather(&self, ranges: &[std::ops::Range<usize>]) -> Dataset {
        let mut inputs = Vec::new();
        let mut targets = Vec::new();
        for r in ranges {
            inputs.extend_from_slice(&self.inputs[r.clone()]);
            targets.extend_from_slice(&self.targets[r.clone()]);
        }
        Dataset { name: self.name.clone(), inputs, targets }
    }
}

/// Min/max statistics per input column and for the target, computed from the
/// training partition only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub input_min: Vec<f64>,
    pub input_max: Vec<f64>,
    pub target_min: f64,
    pub target_max: f64,
}

impl NormStats {
    pub fn from_dataset(ds: &Dataset) -> Self {
        let d = ds.dim();
        let mut input_min = vec![f64::INFINITY; d];
        let mut input_max = vec![f64::NEG_INFINITY; d];
        for row in &ds.inputs {
            for (j, &v) in row.iter().enumerate() {
                input_min[j] = input_min[j].min(v);
                input_max[j] = input_max[j].max(v);
            }
        }
        let target_min = ds.targets.iter().copied().fold(f64::INFINITY, f64::min);
        let target_max = ds.targets.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Self { input_min, input_max, target_min, target_max }
    }

    /// Width of the target range; 0 for a degenerate target column.
    pub fn target_span(&self) -> f64 {
        self.target_max - self.target_min
    }
}

fn norm_value(x: f64, min: f64, max: f64) -> f64 {
    if max - min == 0.0 {
        0.0
    } else {
        (x - min) / (max - min)
    }
}

/// Maps every value to (x - min)/(max - min); degenerate columns map to 0.
pub fn normalize(ds: &Dataset, stats: &NormStats) -> Dataset {
    assert_eq!(ds.dim(), stats.input_min.len(), "stats/dataset column mismatch");
    let inputs = ds
        .inputs
        .iter()
        .map(|row| {
            row.iter()
                .enumerate()
                .map(|(j, &v)| norm_value(v, stats.input_min[j], stats.input_max[j]))
                .collect()
        })
        .collect();
    let targets = ds
        .targets
        .iter()
        .map(|&v| norm_value(v, stats.target_min, stats.target_max))
        .collect();
    Dataset { name: ds.name.clone(), inputs, targets }
}

/// Inverse of `normalize` on the target column.
pub fn denormalize_targets(y: &[f64], stats: &NormStats) -> Vec<f64> {
    y.iter()
        .map(|&v| stats.target_min + v * stats.target_span())
        .collect()
}

/// Temporal train/validation/test split fractions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub validation_fraction: f64,
    pub test_fraction: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self { train_fraction: 0.75, validation_fraction: 0.125, test_fraction: 0.125 }
    }
}

/// Contiguous temporal split: first `train_fraction` (rounded down) for
/// training, the remainder split between validation and test with any odd
/// leftover going to test.
pub fn split(ds: &Dataset, spec: &SplitSpec) -> Result<(Dataset, Dataset, Dataset), DataError> {
    let sum = spec.train_fraction + spec.validation_fraction + spec.test_fraction;
    assert!((sum - 1.0).abs() < 1e-9, "split fractions must sum to 1");
    let n = ds.len();
    let train = (spec.train_fraction * n as f64).floor() as usize;
    let rem = n - train;
    let val_share = spec.validation_fraction / (spec.validation_fraction + spec.test_fraction);
    let val = (val_share * rem as f64).floor() as usize;
    let test = rem - val;
    if train == 0 || val == 0 || test == 0 {
        return Err(DataError::EmptyPartition { n, train, val, test });
    }
    Ok((
        ds.slice(0..train),
        ds.slice(train..train + val),
        ds.slice(train + val..n),
    ))
}

/// One cross-validation rotation.
#[derive(Debug, Clone)]
pub struct Fold {
    pub train: Dataset,
    pub validation: Dataset,
    pub test: Dataset,
}

/// Rotating contiguous blocks: the series is cut into `k` blocks; fold i takes
/// block i's former half as validation, latter half as test, and all other
/// blocks as training data. Temporal order is preserved throughout.
pub fn make_folds(ds: &Dataset, k: usize) -> Result<Vec<Fold>, DataError> {
    if k < 2 {
        return Err(DataError::BadFoldCount(k));
    }
    let n = ds.len();
    if n < 4 * k {
        return Err(DataError::TooFewSamples { n, k, min: 4 * k });
    }
    // block boundaries: first n % k blocks get one extra row
    let base = n / k;
    let extra = n % k;
    let mut bounds = Vec::with_capacity(k + 1);
    let mut pos = 0;
    bounds.push(0);
    for i in 0..k {
        pos += base + usize::from(i < extra);
        bounds.push(pos);
    }
    let folds = (0..k)
        .map(|i| {
            let (start, end) = (bounds[i], bounds[i + 1]);
            let mid = start + (end - start) / 2;
            let train = ds.gather(&[0..start, end..n]);
            Fold {
                train,
                validation: ds.slice(start..mid),
                test: ds.slice(mid..end),
            }
        })
        .collect();
    Ok(folds)
}

/// Trend shape of the synthetic flow series.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrendKind {
    Upward,
    UpwardDownward,
}

impl fmt::Display for TrendKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrendKind::Upward => write!(f, "upward"),
            TrendKind::UpwardDownward => write!(f, "upward-downward"),
        }
    }
}

/// Configuration for the synthetic flow-series generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub samples: usize,
    pub trend: TrendKind,
    pub noise_std: f64,
    pub sensors: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self { samples: 1800, trend: TrendKind::Upward, noise_std: 0.01, sensors: 3, seed: 7 }
    }
}

/// Deterministic synthetic dataset: a smooth flow ramp (or ramp up then down)
/// with each sensor channel a distinct monotone nonlinear function of the
/// flow plus Gaussian noise.
pub fn gen_synthetic(cfg: &SyntheticConfig) -> Dataset {
    assert!(cfg.samples >= 8, "need at least 8 samples");
    assert!(cfg.noise_std >= 0.0);
    assert!(cfg.sensors >= 1);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = cfg.samples;
    let noise = Normal::new(0.0, cfg.noise_std.max(f64::MIN_POSITIVE)).unwrap();

    let flow_min = 2.0_f64;
    let flow_max = 10.0_f64;
    let targets: Vec<f64> = (0..n)
        .map(|i| {
            let t = i as f64 / (n - 1) as f64;
            let ramp = match cfg.trend {
                TrendKind::Upward => 0.5 - 0.5 * (std::f64::consts::PI * t).cos(),
                TrendKind::UpwardDownward => 0.5 - 0.5 * (2.0 * std::f64::consts::PI * t).cos(),
            };
            flow_min + (flow_max - flow_min) * ramp
        })
        .collect();

    let inputs = targets
        .iter()
        .map(|&y| {
            (0..cfg.sensors)
                .map(|j| {
                    // distinct monotone channel maps: power laws with
                    // per-channel exponent and gain
                    let p = 0.5 + 0.35 * j as f64;
                    let gain = 1.0 + 0.25 * j as f64;
                    let clean = gain * (y / flow_max).powf(p) * 5.0;
                    let eps = if cfg.noise_std > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                    clean + eps
                })
                .collect()
        })
        .collect();

    Dataset::new(
        format!("synthetic-{}-{}", cfg.trend, cfg.seed),
        inputs,
        targets,
    )
}

/// Strict CSV loader: header row required, every referenced column present,
/// every cell numeric.
pub fn load_csv(
    path: impl AsRef<Path>,
    input_columns: &[String],
    target_column: &str,
) -> Result<Dataset, DataError> {
    let path_str = path.as_ref().display().to_string();
    let file = std::fs::File::open(path.as_ref())
        .map_err(|e| DataError::Io { path: path_str.clone(), source: e })?;
    let mut reader = csv::Reader::from_reader(file);
    let headers = reader
        .headers()
        .map_err(|e| DataError::Csv { path: path_str.clone(), source: e })?
        .clone();
    if headers.is_empty() {
        return Err(DataError::EmptyFile { path: path_str });
    }
    let col_index = |name: &str| -> Result<usize, DataError> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| DataError::MissingColumn { path: path_str.clone(), column: name.to_string() })
    };
    let input_idx: Vec<usize> = input_columns
        .iter()
        .map(|c| col_index(c))
        .collect::<Result<_, _>>()?;
    let target_idx = col_index(target_column)?;

    let mut inputs = Vec::new();
    let mut targets = Vec::new();
    for (row_no, record) in reader.records().enumerate() {
        let record = record.map_err(|e| DataError::Csv { path: path_str.clone(), source: e })?;
        let parse = |idx: usize, col: &str| -> Result<f64, DataError> {
            let raw = record.get(idx).unwrap_or("");
            raw.trim().parse::<f64>().map_err(|_| DataError::BadCell {
                row: row_no + 2, // 1-based, counting the header
                column: col.to_string(),
                value: raw.to_string(),
            })
        };
        let row: Vec<f64> = input_idx
            .iter()
            .zip(input_columns)
            .map(|(&idx, col)| parse(idx, col))
            .collect::<Result<_, _>>()?;
        inputs.push(row);
        targets.push(parse(target_idx, target_column)?);
    }
    if inputs.is_empty() {
        return Err(DataError::EmptyFile { path: path_str });
    }
    Ok(Dataset::new(path_str, inputs, targets))
}

/// Writes a dataset as canonical CSV: sensor_0..sensor_{D-1}, flow.
pub fn write_csv(ds: &Dataset, path: impl AsRef<Path>) -> Result<(), DataError> {
    let path_str = path.as_ref().display().to_string();
    let mut wtr = csv::Writer::from_path(path.as_ref())
        .map_err(|e| DataError::Csv { path: path_str.clone(), source: e })?;
    let mut header: Vec<String> = (0..ds.dim()).map(|j| format!("sensor_{j}")).collect();
    header.push("flow".to_string());
    wtr.write_record(&header)
        .map_err(|e| DataError::Csv { path: path_str.clone(), source: e })?;
    for (row, &y) in ds.inputs.iter().zip(&ds.targets) {
        let mut rec: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        rec.push(y.to_string());
        wtr.write_record(&rec)
            .map_err(|e| DataError::Csv { path: path_str.clone(), source: e })?;
    }
    wtr.flush().map_err(|e| DataError::Io { path: path_str, source: e })?;
    Ok(())
}
