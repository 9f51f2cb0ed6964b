//! Dataset ingestion, windowing, normalisation, synthetic data and feature
//! subsampling.
//!
//! CSV files hold one timestamp per row and one feature per column, with a
//! header naming the features. Cells equal to the missing token (compared
//! case-insensitively) are unavailable.

use std::fs::File;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub const DEFAULT_MISSING_TOKEN: &str = "NaN";

/// Lower bound applied to per-feature standard deviations.
pub const STD_FLOOR: f64 = 1e-6;

/// A whole multivariate recording: `values` and `mask` are `[K, T]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RawSeries {
    pub names: Vec<String>,
    pub values: Matrix,
    pub mask: Matrix,
}

impl RawSeries {
    pub fn n_features(&self) -> usize {
        self.values.rows()
    }

    pub fn len(&self) -> usize {
        self.values.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.values.cols() == 0
    }
}

pub fn load_csv(path: impl AsRef<Path>, missing_token: &str) -> Result<RawSeries> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_csv(file, missing_token)
}

pub fn parse_csv<R: Read>(reader: R, missing_token: &str) -> Result<RawSeries> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let names: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::Parse {
            row: 0,
            message: e.to_string(),
        })?
        .iter()
        .map(str::to_string)
        .collect();
    let k = names.len();
    let mut columns: Vec<Vec<f64>> = vec![Vec::new(); k];
    let mut mask_cols: Vec<Vec<f64>> = vec![Vec::new(); k];
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::Parse {
            row,
            message: e.to_string(),
        })?;
        if rec.len() != k {
            return Err(Error::Parse {
                row,
                message: format!("expected {k} fields, found {}", rec.len()),
            });
        }
        for (j, cell) in rec.iter().enumerate() {
            if cell.eq_ignore_ascii_case(missing_token) {
                columns[j].push(0.0);
                mask_cols[j].push(0.0);
                continue;
            }
            let v: f64 = cell.parse().map_err(|_| Error::Parse {
                row,
                message: format!("column {}: cannot parse {cell:?}", names[j]),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    row,
                    message: format!("column {}: non-finite value {cell:?}", names[j]),
                });
            }
            columns[j].push(v);
            mask_cols[j].push(1.0);
        }
    }
    let t = columns.first().map_or(0, Vec::len);
    if t == 0 {
        return Err(Error::NoRows);
    }
    Ok(RawSeries {
        names,
        values: Matrix::from_vec(k, t, columns.concat())?,
        mask: Matrix::from_vec(k, t, mask_cols.concat())?,
    })
}

/// Writes `[K, T]` values as a CSV with one row per timestamp; cells with
/// `mask == 0` are written as `missing_token`.
pub fn write_csv(
    path: impl AsRef<Path>,
    names: &[String],
    values: &Matrix,
    mask: &Matrix,
    missing_token: &str,
) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    out.push_str(&names.join(","));
    out.push('\n');
    for t in 0..values.cols() {
        let row: Vec<String> = (0..values.rows())
            .map(|k| {
                if mask.get(k, t) == 0.0 {
                    missing_token.to_string()
                } else {
                    format!("{}", values.get(k, t))
                }
            })
            .collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Per-feature affine normalisation to zero mean and unit variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    /// Population statistics over observed entries only. Features with no
    /// observed value get mean 0, std 1.
    pub fn fit(values: &Matrix, mask: &Matrix) -> Self {
        let mut mean = Vec::with_capacity(values.rows());
        let mut std = Vec::with_capacity(values.rows());
        for k in 0..values.rows() {
            let obs: Vec<f64> = values
                .row(k)
                .iter()
                .zip(mask.row(k))
                .filter(|(_, &m)| m != 0.0)
                .map(|(&v, _)| v)
                .collect();
            if obs.is_empty() {
                mean.push(0.0);
                std.push(1.0);
                continue;
            }
            let n = obs.len() as f64;
            let mu = obs.iter().sum::<f64>() / n;
            let var = obs.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
            mean.push(mu);
            std.push(var.sqrt().max(STD_FLOOR));
        }
        Self { mean, std }
    }

    pub fn fit_raw(raw: &RawSeries) -> Self {
        Self::fit(&raw.values, &raw.mask)
    }

    pub fn identity(k: usize) -> Self {
        Self {
            mean: vec![0.0; k],
            std: vec![1.0; k],
        }
    }

    /// Normalises rows `feature_ids[r]` of `values`; masked cells become 0.
    pub fn normalize(&self, values: &Matrix, mask: &Matrix, feature_ids: &[usize]) -> Matrix {
        Matrix::from_fn(values.rows(), values.cols(), |r, c| {
            if mask.get(r, c) == 0.0 {
                0.0
            } else {
                let k = feature_ids[r];
                (values.get(r, c) - self.mean[k]) / self.std[k]
            }
        })
    }

    pub fn denormalize(&self, values: &Matrix, feature_ids: &[usize]) -> Matrix {
        Matrix::from_fn(values.rows(), values.cols(), |r, c| {
            let k = feature_ids[r];
            values.get(r, c) * self.std[k] + self.mean[k]
        })
    }

    pub fn normalize_raw(&self, raw: &RawSeries) -> RawSeries {
        let ids: Vec<usize> = (0..raw.n_features()).collect();
        RawSeries {
            names: raw.names.clone(),
            values: self.normalize(&raw.values, &raw.mask, &ids),
            mask: raw.mask.clone(),
        }
    }
}

/// One `[K, L]` instance.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub values: Matrix,
    pub mask: Matrix,
    /// Global feature index of each row.
    pub feature_ids: Vec<usize>,
    pub label: Option<usize>,
}

impl Series {
    pub fn new(values: Matrix, mask: Matrix) -> Result<Self> {
        if values.shape() != mask.shape() {
            return Err(Error::Shape(format!(
                "values {:?} vs mask {:?}",
                values.shape(),
                mask.shape()
            )));
        }
        let ids = (0..values.rows()).collect();
        Ok(Self {
            values,
            mask,
            feature_ids: ids,
            label: None,
        })
    }

    pub fn n_features(&self) -> usize {
        self.values.rows()
    }

    pub fn len(&self) -> usize {
        self.values.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.values.cols() == 0
    }
}

/// A batch of equally shaped instances.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SeriesBatch {
    pub series: Vec<Series>,
}

impl SeriesBatch {
    pub fn new(series: Vec<Series>) -> Result<Self> {
        let b = Self { series };
        b.validate(None)?;
        Ok(b)
    }

    pub fn len(&self) -> usize {
        self.series.len()
    }

    pub fn is_empty(&self) -> bool {
        self.series.is_empty()
    }

    /// `(K, L)` of the instances, if any.
    pub fn shape(&self) -> Option<(usize, usize)> {
        self.series.first().map(|s| s.values.shape())
    }

    /// Checks the batch invariants; `n_global` bounds the feature ids.
    pub fn validate(&self, n_global: Option<usize>) -> Result<()> {
        let Some(shape) = self.shape() else {
            return Ok(());
        };
        for (i, s) in self.series.iter().enumerate() {
            if s.values.shape() != shape || s.mask.shape() != shape {
                return Err(Error::Shape(format!("instance {i} is not {shape:?}")));
            }
            if s.feature_ids.len() != shape.0 {
                return Err(Error::Shape(format!("instance {i}: feature_ids length")));
            }
            let mut ids = s.feature_ids.clone();
            ids.sort_unstable();
            if ids.windows(2).any(|w| w[0] == w[1]) {
                return Err(Error::InvalidArgument(format!(
                    "instance {i}: duplicate feature ids"
                )));
            }
            if let Some(n) = n_global {
                if ids.last().is_some_and(|&m| m >= n) {
                    return Err(Error::InvalidArgument(format!(
                        "instance {i}: feature id out of range {n}"
                    )));
                }
            }
            for (v, m) in s.values.as_slice().iter().zip(s.mask.as_slice()) {
                if *m != 0.0 && *m != 1.0 {
                    return Err(Error::InvalidArgument(format!(
                        "instance {i}: mask is not binary"
                    )));
                }
                if *m == 0.0 && *v != 0.0 {
                    return Err(Error::InvalidArgument(format!(
                        "instance {i}: missing cell holds a value"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Cuts `[K, L]` windows starting at `0, stride, 2 * stride, ...`.
pub fn window(raw: &RawSeries, len: usize, stride: usize) -> Result<Vec<Series>> {
    let total = raw.len();
    if len == 0 || len > total {
        return Err(Error::InvalidArgument(format!(
            "window length {len} must be in 1..={total}"
        )));
    }
    if stride == 0 {
        return Err(Error::InvalidArgument("stride must be at least 1".into()));
    }
    let k = raw.n_features();
    let count = (total - len) / stride + 1;
    Ok((0..count)
        .map(|w| {
            let start = w * stride;
            let mask = Matrix::from_fn(k, len, |r, c| raw.mask.get(r, start + c));
            let values = Matrix::from_fn(k, len, |r, c| {
                if mask.get(r, c) == 0.0 {
                    0.0
                } else {
                    raw.values.get(r, start + c)
                }
            });
            Series {
                values,
                mask,
                feature_ids: (0..k).collect(),
                label: None,
            }
        })
        .collect())
}

/// Settings for the trend / seasonal / noise generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub len: usize,
    pub instances: usize,
    pub period: f64,
    pub noise_std: f64,
    /// Draw a random seasonal phase per instance (instance 0 of a
    /// single-instance batch always has phase 0 when false).
    pub random_phase: bool,
    pub seed: u64,
}

impl SynthConfig {
    pub fn new(len: usize, seed: u64) -> Self {
        Self {
            len,
            instances: 1,
            period: 12.0,
            noise_std: 1.0,
            random_phase: false,
            seed,
        }
    }
}

/// Single synthetic instance with `K = 3`: a `[0, 1]` ramp, a period-12
/// sine and standard Gaussian noise.
pub fn synth_generate(len: usize, seed: u64) -> Result<SeriesBatch> {
    synth_dataset(&SynthConfig::new(len, seed))
}

pub fn synth_dataset(cfg: &SynthConfig) -> Result<SeriesBatch> {
    if cfg.len < 2 {
        return Err(Error::InvalidArgument("synthetic length must be >= 2".into()));
    }
    if cfg.period <= 0.0 {
        return Err(Error::InvalidArgument("period must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let l = cfg.len;
    let mut series = Vec::with_capacity(cfg.instances);
    for _ in 0..cfg.instances {
        let phase = if cfg.random_phase {
            rng.random_range(0.0..cfg.period)
        } else {
            0.0
        };
        let noise: Vec<f64> = (0..l)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * cfg.noise_std
            })
            .collect();
        let values = Matrix::from_fn(3, l, |k, t| match k {
            0 => t as f64 / (l - 1) as f64,
            1 => (2.0 * std::f64::consts::PI * (t as f64 + phase) / cfg.period).sin(),
            _ => noise[t],
        });
        series.push(Series::new(values, Matrix::filled(3, l, 1.0))?);
    }
    SeriesBatch::new(series)
}

/// Keeps `k_feat` uniformly chosen distinct features per instance.
pub fn subsample_features<R: Rng + ?Sized>(
    batch: &SeriesBatch,
    k_feat: usize,
    rng: &mut R,
) -> Result<SeriesBatch> {
    if k_feat == 0 {
        return Err(Error::InvalidArgument("feature sample size must be positive".into()));
    }
    let series = batch
        .series
        .iter()
        .map(|s| subsample_series(s, k_feat, rng))
        .collect::<Result<Vec<_>>>()?;
    Ok(SeriesBatch { series })
}

pub fn subsample_series<R: Rng + ?Sized>(s: &Series, k_feat: usize, rng: &mut R) -> Result<Series> {
    let k = s.n_features();
    if k_feat == 0 || k_feat > k {
        return Err(Error::InvalidArgument(format!(
            "feature sample size {k_feat} must be in 1..={k}"
        )));
    }
    let mut rows: Vec<usize> = (0..k).collect();
    let (picked, _) = rows.partial_shuffle(rng, k_feat);
    let mut picked = picked.to_vec();
    picked.sort_unstable();
    let l = s.len();
    Ok(Series {
        values: Matrix::from_fn(k_feat, l, |r, c| s.values.get(picked[r], c)),
        mask: Matrix::from_fn(k_feat, l, |r, c| s.mask.get(picked[r], c)),
        feature_ids: picked.iter().map(|&r| s.feature_ids[r]).collect(),
        label: s.label,
    })
}

/// Dataset manifest: where the splits live and how to window them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub train: PathBuf,
    #[serde(default)]
    pub val: Option<PathBuf>,
    #[serde(default)]
    pub test: Option<PathBuf>,
    #[serde(default = "default_missing_token")]
    pub missing_token: String,
    /// Window length `L` (history plus horizon for forecasting).
    pub window: usize,
    #[serde(default = "default_stride")]
    pub stride: usize,
    /// Forecast horizon `L2`.
    #[serde(default)]
    pub horizon: Option<usize>,
    /// Features sampled per instance during training.
    #[serde(default)]
    pub feature_sample: Option<usize>,
    /// One class label per training window.
    #[serde(default)]
    pub train_labels: Option<PathBuf>,
    /// One class label per test window.
    #[serde(default)]
    pub test_labels: Option<PathBuf>,
    /// One 0/1 anomaly label per test timestamp.
    #[serde(default)]
    pub anomaly_labels: Option<PathBuf>,
}

fn default_missing_token() -> String {
    DEFAULT_MISSING_TOKEN.to_string()
}

fn default_stride() -> usize {
    1
}

impl DatasetManifest {
    /// Reads a TOML manifest; relative paths resolve against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: Self = toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut m.train);
        for p in [
            &mut m.val,
            &mut m.test,
            &mut m.train_labels,
            &mut m.test_labels,
            &mut m.anomaly_labels,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.stride == 0 {
            return Err(Error::Config("window and stride must be positive".into()));
        }
        if let Some(h) = self.horizon {
            if h == 0 || h >= self.window {
                return Err(Error::Config(format!(
                    "horizon {h} must be in 1..{}",
                    self.window
                )));
            }
        }
        if self.feature_sample == Some(0) {
            return Err(Error::Config("feature_sample must be positive".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest serialises")
    }
}

/// Reads one integer per line (blank lines skipped).
pub fn load_labels(path: impl AsRef<Path>) -> Result<Vec<usize>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .enumerate()
        .map(|(row, l)| {
            l.parse::<f64>()
                .ok()
                .filter(|v| *v >= 0.0 && v.fract() == 0.0)
                .map(|v| v as usize)
                .ok_or_else(|| Error::Parse {
                    row,
                    message: format!("label {l:?} is not a non-negative integer"),
                })
        })
        .collect()
}
