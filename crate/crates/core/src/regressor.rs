//! One-hidden-layer tanh network trained by Levenberg–Marquardt.
//!
//! Rows are split once per `(seed, N)` into train/validation/test portions.
//! Inputs and target are z-scored with train-split statistics, the network is
//! fitted on the train rows by damped Gauss–Newton steps on the squared error,
//! and the validation RMS after each accepted step drives early stopping. The
//! returned model is the snapshot with the lowest validation RMS.

use std::fmt;
use std::io::{self, Read, Write};
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DataError, Dataset};
use crate::mi::{MiError, ScalarSeries};
use crate::search::FeatureSubset;

#[derive(Debug, Error)]
pub enum RegressorError {
    #[error("too few rows: got {rows}, need at least {required}")]
    TooFewRows { rows: usize, required: usize },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("normal equations are singular at maximum damping")]
    SingularNormalEquations,
    #[error("training loss is not finite")]
    NonFiniteLoss,
    #[error("column \"{0}\" is constant on the training rows")]
    ConstantColumn(String),
    #[error("series lengths differ ({left} vs {right})")]
    LengthMismatch { left: usize, right: usize },
    #[error("empty series")]
    EmptySeries,
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("model file: {0}")]
    ModelFormat(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Mi(#[from] MiError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub hidden_dim: usize,
    /// Train, validation and test fractions.
    pub split: [f64; 3],
    pub seed: u64,
    pub lm_lambda_init: f64,
    pub lm_lambda_factor: f64,
    pub max_epochs: usize,
    /// Accepted steps without validation improvement before stopping.
    pub patience: usize,
    pub lambda_max: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            hidden_dim: 200,
            split: [0.8, 0.1, 0.1],
            seed: 0,
            lm_lambda_init: 1e-3,
            lm_lambda_factor: 10.0,
            max_epochs: 200,
            patience: 6,
            lambda_max: 1e10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), RegressorError> {
        let bad = |m: String| Err(RegressorError::InvalidConfig(m));
        if self.hidden_dim == 0 {
            return bad("hidden_dim must be >= 1".into());
        }
        if self.split.iter().any(|f| !(f.is_finite() && *f > 0.0)) {
            return bad(format!("split fractions must be positive, got {:?}", self.split));
        }
        if (self.split.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad(format!("split fractions must sum to 1, got {:?}", self.split));
        }
        if !(self.lm_lambda_init.is_finite() && self.lm_lambda_init > 0.0) {
            return bad(format!("lm_lambda_init must be > 0, got {}", self.lm_lambda_init));
        }
        if !(self.lm_lambda_factor.is_finite() && self.lm_lambda_factor > 1.0) {
            return bad(format!("lm_lambda_factor must be > 1, got {}", self.lm_lambda_factor));
        }
        if self.lambda_max.is_nan() || self.lambda_max <= self.lm_lambda_init {
            return bad(format!(
                "lambda_max ({}) must exceed lm_lambda_init ({})",
                self.lambda_max, self.lm_lambda_init
            ));
        }
        if self.max_epochs == 0 || self.patience == 0 {
            return bad("max_epochs and patience must be >= 1".into());
        }
        Ok(())
    }
}

/// Row indices of the three portions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

fn portion(n: usize, frac: f64) -> usize {
    (n as f64 * frac + 1e-9).floor() as usize
}

/// Seeded permutation of `0..n` cut into train, validation and test. Depends
/// only on `(cfg.seed, n)` and the split fractions.
pub fn split_indices(n: usize, cfg: &TrainConfig) -> Result<Split, RegressorError> {
    cfg.validate()?;
    if n < 10 {
        return Err(RegressorError::TooFewRows { rows: n, required: 10 });
    }
    let n_val = portion(n, cfg.split[1]);
    let n_test = portion(n, cfg.split[2]);
    let n_train = n - n_val - n_test;
    if n_val == 0 || n_test == 0 || n_train < 2 {
        return Err(RegressorError::TooFewRows { rows: n, required: 10 });
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut split_rng(cfg.seed));
    let test = perm.split_off(n_train + n_val);
    let val = perm.split_off(n_train);
    Ok(Split { train: perm, val, test })
}

pub fn split_dataset(data: &Dataset, cfg: &TrainConfig) -> Result<(Dataset, Dataset, Dataset), RegressorError> {
    let s = split_indices(data.row_count(), cfg)?;
    Ok((data.take_rows(&s.train)?, data.take_rows(&s.val)?, data.take_rows(&s.test)?))
}

fn split_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0);
    rng
}

/// Weight-initialisation stream for one feature subset. Streams of distinct
/// subsets never overlap each other or the split stream.
fn init_rng(seed: u64, mask: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(mask.wrapping_add(1));
    rng
}

/// Per-column z-score statistics fitted on training rows.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub input_mean: Vec<f64>,
    pub input_std: Vec<f64>,
    pub target_mean: f64,
    pub target_std: f64,
}

impl NormStats {
    pub fn identity(input_dim: usize) -> Self {
        NormStats {
            input_mean: vec![0.0; input_dim],
            input_std: vec![1.0; input_dim],
            target_mean: 0.0,
            target_std: 1.0,
        }
    }

    pub fn standardize_input(&self, raw: &[f64], out: &mut [f64]) {
        for ((o, &r), (m, s)) in out.iter_mut().zip(raw).zip(self.input_mean.iter().zip(&self.input_std)) {
            *o = (r - m) / s;
        }
    }

    pub fn standardize_target(&self, y: f64) -> f64 {
        (y - self.target_mean) / self.target_std
    }

    pub fn destandardize_target(&self, z: f64) -> f64 {
        z * self.target_std + self.target_mean
    }
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Flat parameter layout: `w1` (hidden x input, row-major), `b1`, `w2`, `b2`.
fn n_params(input_dim: usize, hidden_dim: usize) -> usize {
    hidden_dim * input_dim + 2 * hidden_dim + 1
}

/// Network output in standardized units.
fn net_output(params: &[f64], input_dim: usize, hidden_dim: usize, x: &[f64]) -> f64 {
    let (w1, rest) = params.split_at(hidden_dim * input_dim);
    let (b1, rest) = rest.split_at(hidden_dim);
    let (w2, b2) = rest.split_at(hidden_dim);
    let mut out = b2[0];
    for k in 0..hidden_dim {
        let row = &w1[k * input_dim..(k + 1) * input_dim];
        let a = row.iter().zip(x).fold(b1[k], |acc, (w, v)| acc + w * v);
        out += w2[k] * a.tanh();
    }
    out
}

/// Writes d(output)/d(params) into `grad` and returns the output.
fn net_gradient(params: &[f64], input_dim: usize, hidden_dim: usize, x: &[f64], grad: &mut [f64]) -> f64 {
    let (w1, rest) = params.split_at(hidden_dim * input_dim);
    let (b1, rest) = rest.split_at(hidden_dim);
    let (w2, b2) = rest.split_at(hidden_dim);
    let (g_w1, g_rest) = grad.split_at_mut(hidden_dim * input_dim);
    let (g_b1, g_rest) = g_rest.split_at_mut(hidden_dim);
    let (g_w2, g_b2) = g_rest.split_at_mut(hidden_dim);
    let mut out = b2[0];
    for k in 0..hidden_dim {
        let row = &w1[k * input_dim..(k + 1) * input_dim];
        let t = row.iter().zip(x).fold(b1[k], |acc, (w, v)| acc + w * v).tanh();
        out += w2[k] * t;
        let back = w2[k] * (1.0 - t * t);
        for (g, v) in g_w1[k * input_dim..(k + 1) * input_dim].iter_mut().zip(x) {
            *g = back * v;
        }
        g_b1[k] = back;
        g_w2[k] = t;
    }
    g_b2[0] = 1.0;
    out
}

/// Feed-forward network `y = w2 . tanh(w1 x + b1) + b2` plus the statistics
/// that map raw columns into its standardized input/output space.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    features: Vec<String>,
    hidden_dim: usize,
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: f64,
    norm: NormStats,
}

impl MlpModel {
    pub fn from_parts(
        features: Vec<String>,
        w1: Vec<f64>,
        b1: Vec<f64>,
        w2: Vec<f64>,
        b2: f64,
        norm: NormStats,
    ) -> Result<Self, RegressorError> {
        let input_dim = features.len();
        let hidden_dim = b1.len();
        let invalid = |m: String| Err(RegressorError::InvalidModel(m));
        if input_dim == 0 || hidden_dim == 0 {
            return invalid("input and hidden dimensions must be >= 1".into());
        }
        if w1.len() != hidden_dim * input_dim || w2.len() != hidden_dim {
            return invalid(format!(
                "weight shapes w1={} w2={} do not match {hidden_dim}x{input_dim}",
                w1.len(),
                w2.len()
            ));
        }
        if norm.input_mean.len() != input_dim || norm.input_std.len() != input_dim {
            return invalid("normalization statistics do not match input dimension".into());
        }
        if norm.input_std.iter().chain([&norm.target_std]).any(|s| !(s.is_finite() && *s > 0.0)) {
            return invalid("normalization stddevs must be finite and > 0".into());
        }
        if w1.iter().chain(&b1).chain(&w2).chain([&b2]).any(|w| !w.is_finite())
            || norm.input_mean.iter().chain([&norm.target_mean]).any(|m| !m.is_finite())
        {
            return invalid("non-finite parameter".into());
        }
        Ok(MlpModel {
            features,
            hidden_dim,
            w1,
            b1,
            w2,
            b2,
            norm,
        })
    }

    fn from_params(features: Vec<String>, hidden_dim: usize, params: &[f64], norm: NormStats) -> Result<Self, RegressorError> {
        let d = features.len();
        let (w1, rest) = params.split_at(hidden_dim * d);
        let (b1, rest) = rest.split_at(hidden_dim);
        let (w2, b2) = rest.split_at(hidden_dim);
        Self::from_parts(features, w1.to_vec(), b1.to_vec(), w2.to_vec(), b2[0], norm)
    }

    pub fn params(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.n_params());
        p.extend_from_slice(&self.w1);
        p.extend_from_slice(&self.b1);
        p.extend_from_slice(&self.w2);
        p.push(self.b2);
        p
    }

    pub fn with_params(&self, params: &[f64]) -> Result<Self, RegressorError> {
        if params.len() != self.n_params() {
            return Err(RegressorError::DimensionMismatch {
                expected: self.n_params(),
                found: params.len(),
            });
        }
        Self::from_params(self.features.clone(), self.hidden_dim, params, self.norm.clone())
    }

    pub fn input_dim(&self) -> usize {
        self.features.len()
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    pub fn n_params(&self) -> usize {
        n_params(self.input_dim(), self.hidden_dim)
    }

    pub fn features(&self) -> &[String] {
        &self.features
    }

    pub fn norm_stats(&self) -> &NormStats {
        &self.norm
    }

    pub fn w1(&self) -> &[f64] {
        &self.w1
    }

    pub fn b1(&self) -> &[f64] {
        &self.b1
    }

    pub fn w2(&self) -> &[f64] {
        &self.w2
    }

    pub fn b2(&self) -> f64 {
        self.b2
    }

    fn check_dim(&self, x: &[f64]) -> Result<(), RegressorError> {
        if x.len() != self.input_dim() {
            return Err(RegressorError::DimensionMismatch {
                expected: self.input_dim(),
                found: x.len(),
            });
        }
        Ok(())
    }

    /// Network output for a standardized input, in standardized target units.
    pub fn forward_standardized(&self, x_std: &[f64]) -> Result<f64, RegressorError> {
        self.check_dim(x_std)?;
        Ok(net_output(&self.params(), self.input_dim(), self.hidden_dim, x_std))
    }

    /// Network output for a standardized input, in target units.
    pub fn forward(&self, x_std: &[f64]) -> Result<f64, RegressorError> {
        Ok(self.norm.destandardize_target(self.forward_standardized(x_std)?))
    }

    /// Gradient of [`Self::forward_standardized`] with respect to the flat
    /// parameter vector, in [`Self::params`] order.
    pub fn jacobian_row(&self, x_std: &[f64]) -> Result<(f64, Vec<f64>), RegressorError> {
        self.check_dim(x_std)?;
        let mut grad = vec![0.0; self.n_params()];
        let out = net_gradient(&self.params(), self.input_dim(), self.hidden_dim, x_std, &mut grad);
        Ok((out, grad))
    }

    /// Prediction for a row of raw (unstandardized) feature values.
    pub fn predict_row(&self, raw: &[f64]) -> Result<f64, RegressorError> {
        self.check_dim(raw)?;
        let mut x = vec![0.0; raw.len()];
        self.norm.standardize_input(raw, &mut x);
        self.forward(&x)
    }

    const MAGIC: &'static [u8; 11] = b"RELVAR-MLP\n";
    const VERSION: u32 = 1;
    const TRANSFER_TANH: u32 = 1;

    /// Little-endian flat file: magic, version, dims, transfer id, feature
    /// names, normalization statistics, then `w1` (row-major), `b1`, `w2`,
    /// `b2` as f64.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), RegressorError> {
        w.write_all(Self::MAGIC)?;
        for v in [
            Self::VERSION,
            self.input_dim() as u32,
            self.hidden_dim as u32,
            Self::TRANSFER_TANH,
        ] {
            w.write_all(&v.to_le_bytes())?;
        }
        for name in &self.features {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
        }
        let floats = self
            .norm
            .input_mean
            .iter()
            .chain(&self.norm.input_std)
            .chain([&self.norm.target_mean, &self.norm.target_std])
            .chain(&self.w1)
            .chain(&self.b1)
            .chain(&self.w2)
            .chain([&self.b2]);
        for v in floats {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, RegressorError> {
        let mut magic = [0u8; 11];
        r.read_exact(&mut magic)?;
        if &magic != Self::MAGIC {
            return Err(RegressorError::ModelFormat("bad magic".into()));
        }
        let mut u32s = [0u32; 4];
        for v in u32s.iter_mut() {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            *v = u32::from_le_bytes(b);
        }
        let [version, input_dim, hidden_dim, transfer] = u32s;
        if version != Self::VERSION {
            return Err(RegressorError::ModelFormat(format!("unsupported version {version}")));
        }
        if transfer != Self::TRANSFER_TANH {
            return Err(RegressorError::ModelFormat(format!("unknown transfer id {transfer}")));
        }
        let (d, h) = (input_dim as usize, hidden_dim as usize);
        let mut features = Vec::with_capacity(d);
        for _ in 0..d {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            let mut name = vec![0u8; u32::from_le_bytes(b) as usize];
            r.read_exact(&mut name)?;
            features.push(String::from_utf8(name).map_err(|e| RegressorError::ModelFormat(e.to_string()))?);
        }
        let mut read_f64s = |k: usize| -> Result<Vec<f64>, RegressorError> {
            let mut out = Vec::with_capacity(k);
            for _ in 0..k {
                let mut b = [0u8; 8];
                r.read_exact(&mut b)?;
                out.push(f64::from_le_bytes(b));
            }
            Ok(out)
        };
        let input_mean = read_f64s(d)?;
        let input_std = read_f64s(d)?;
        let t = read_f64s(2)?;
        let params = read_f64s(n_params(d, h))?;
        let norm = NormStats {
            input_mean,
            input_std,
            target_mean: t[0],
            target_std: t[1],
        };
        Self::from_params(features, h, &params, norm)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), RegressorError> {
        self.write_to(io::BufWriter::new(std::fs::File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, RegressorError> {
        Self::read_from(io::BufReader::new(std::fs::File::open(path)?))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    PatienceExhausted,
    LambdaOverflow,
    MaxEpochs,
}

impl fmt::Display for StopReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StopReason::PatienceExhausted => "patience_exhausted",
            StopReason::LambdaOverflow => "lambda_overflow",
            StopReason::MaxEpochs => "max_epochs",
        })
    }
}

impl FromStr for StopReason {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "patience_exhausted" => Ok(StopReason::PatienceExhausted),
            "lambda_overflow" => Ok(StopReason::LambdaOverflow),
            "max_epochs" => Ok(StopReason::MaxEpochs),
            _ => Err(format!("unknown stop reason {s:?}")),
        }
    }
}

/// State after one accepted step. RMS values are in target units; `lambda`
/// is the damping after the post-acceptance decrease.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub train_rms: f64,
    pub val_rms: f64,
    pub lambda: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainTrace {
    pub initial_train_rms: f64,
    pub initial_val_rms: f64,
    pub epochs: Vec<EpochRecord>,
    pub stop_reason: StopReason,
    /// Epoch of the returned snapshot; 0 means the initial weights.
    pub best_epoch: usize,
}

impl TrainTrace {
    pub fn best_val_rms(&self) -> f64 {
        match self.best_epoch {
            0 => self.initial_val_rms,
            e => self.epochs[e - 1].val_rms,
        }
    }

    /// CSV with one row per epoch, epoch 0 being the initial weights.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "epoch,train_rms,val_rms,lambda")?;
        writeln!(w, "0,{},{},", self.initial_train_rms, self.initial_val_rms)?;
        for (i, e) in self.epochs.iter().enumerate() {
            writeln!(w, "{},{},{},{}", i + 1, e.train_rms, e.val_rms, e.lambda)?;
        }
        Ok(())
    }
}

/// Standardized design matrix (row-major) and target for a set of rows.
struct Standardized {
    x: Vec<f64>,
    y: Vec<f64>,
    rows: usize,
}

impl Standardized {
    fn new(raw_x: &[f64], raw_y: &[f64], rows: &[usize], d: usize, norm: &NormStats) -> Self {
        let mut x = vec![0.0; rows.len() * d];
        let mut y = Vec::with_capacity(rows.len());
        for (i, &r) in rows.iter().enumerate() {
            norm.standardize_input(&raw_x[r * d..(r + 1) * d], &mut x[i * d..(i + 1) * d]);
            y.push(norm.standardize_target(raw_y[r]));
        }
        Standardized { x, y, rows: rows.len() }
    }

    fn sse(&self, params: &[f64], d: usize, h: usize) -> f64 {
        (0..self.rows)
            .map(|i| {
                let e = self.y[i] - net_output(params, d, h, &self.x[i * d..(i + 1) * d]);
                e * e
            })
            .sum()
    }

    fn rms(&self, params: &[f64], d: usize, h: usize) -> f64 {
        (self.sse(params, d, h) / self.rows as f64).sqrt()
    }
}

fn fit_norm(
    raw_x: &[f64],
    raw_y: &[f64],
    rows: &[usize],
    d: usize,
    names: &[String],
    target: &str,
) -> Result<NormStats, RegressorError> {
    let mut norm = NormStats::identity(d);
    for j in 0..d {
        let (m, s) = mean_std(rows.iter().map(|&r| raw_x[r * d + j]));
        if !(s > 0.0 && s.is_finite()) {
            return Err(RegressorError::ConstantColumn(names[j].clone()));
        }
        norm.input_mean[j] = m;
        norm.input_std[j] = s;
    }
    let (m, s) = mean_std(rows.iter().map(|&r| raw_y[r]));
    if !(s > 0.0 && s.is_finite()) {
        return Err(RegressorError::ConstantColumn(target.to_string()));
    }
    norm.target_mean = m;
    norm.target_std = s;
    Ok(norm)
}

/// Trains on the split derived from `cfg` (see [`split_indices`]).
pub fn train_lm(
    data: &Dataset,
    target_col: &str,
    features: &FeatureSubset,
    cfg: &TrainConfig,
) -> Result<(MlpModel, TrainTrace), RegressorError> {
    let split = split_indices(data.row_count(), cfg)?;
    train_lm_on_split(data, target_col, features, &split, cfg)
}

/// Trains on an explicit split. Weight initialisation draws from a stream
/// keyed by `(cfg.seed, features.mask())`.
pub fn train_lm_on_split(
    data: &Dataset,
    target_col: &str,
    features: &FeatureSubset,
    split: &Split,
    cfg: &TrainConfig,
) -> Result<(MlpModel, TrainTrace), RegressorError> {
    cfg.validate()?;
    let names: Vec<String> = features.columns().iter().map(|s| s.to_string()).collect();
    let d = names.len();
    let h = cfg.hidden_dim;
    let raw_x = data.row_matrix(&features.columns())?;
    let raw_y = data.column(target_col)?;

    let norm = fit_norm(&raw_x, raw_y, &split.train, d, &names, target_col)?;
    let train = Standardized::new(&raw_x, raw_y, &split.train, d, &norm);
    let val = Standardized::new(&raw_x, raw_y, &split.val, d, &norm);
    let scale = norm.target_std;

    let p = n_params(d, h);
    let mut rng = init_rng(cfg.seed, features.mask());
    let mut params = Vec::with_capacity(p);
    let (lim_in, lim_hidden) = (1.0 / (d as f64).sqrt(), 1.0 / (h as f64).sqrt());
    for _ in 0..h * d + h {
        params.push(rng.random_range(-lim_in..=lim_in));
    }
    for _ in 0..h + 1 {
        params.push(rng.random_range(-lim_hidden..=lim_hidden));
    }

    let mut sse = train.sse(&params, d, h);
    if !sse.is_finite() {
        return Err(RegressorError::NonFiniteLoss);
    }
    let initial_val = val.rms(&params, d, h);
    let mut trace = TrainTrace {
        initial_train_rms: (sse / train.rows as f64).sqrt() * scale,
        initial_val_rms: initial_val * scale,
        epochs: Vec::new(),
        stop_reason: StopReason::MaxEpochs,
        best_epoch: 0,
    };
    let mut best_val = initial_val;
    let mut best_params = params.clone();
    let mut since_best = 0;
    let mut lambda = cfg.lm_lambda_init;

    let mut jac = DMatrix::<f64>::zeros(train.rows, p);
    let mut resid = DVector::<f64>::zeros(train.rows);
    let mut grad = vec![0.0; p];
    let mut candidate = vec![0.0; p];

    'epochs: for _ in 0..cfg.max_epochs {
        for i in 0..train.rows {
            let out = net_gradient(&params, d, h, &train.x[i * d..(i + 1) * d], &mut grad);
            resid[i] = train.y[i] - out;
            for (k, g) in grad.iter().enumerate() {
                jac[(i, k)] = *g;
            }
        }
        if jac.iter().any(|v| !v.is_finite()) {
            return Err(RegressorError::NonFiniteLoss);
        }
        let jtj = jac.tr_mul(&jac);
        let jtr = jac.tr_mul(&resid);

        loop {
            if lambda > cfg.lambda_max {
                trace.stop_reason = StopReason::LambdaOverflow;
                break 'epochs;
            }
            let mut damped = jtj.clone();
            for k in 0..p {
                damped[(k, k)] += lambda;
            }
            let Some(chol) = damped.cholesky() else {
                if lambda * cfg.lm_lambda_factor > cfg.lambda_max {
                    return Err(RegressorError::SingularNormalEquations);
                }
                lambda *= cfg.lm_lambda_factor;
                continue;
            };
            let step = chol.solve(&jtr);
            for ((c, w), s) in candidate.iter_mut().zip(&params).zip(step.iter()) {
                *c = w + s;
            }
            let new_sse = train.sse(&candidate, d, h);
            if new_sse < sse {
                std::mem::swap(&mut params, &mut candidate);
                sse = new_sse;
                lambda /= cfg.lm_lambda_factor;
                break;
            }
            lambda *= cfg.lm_lambda_factor;
        }

        let val_rms = val.rms(&params, d, h);
        trace.epochs.push(EpochRecord {
            train_rms: (sse / train.rows as f64).sqrt() * scale,
            val_rms: val_rms * scale,
            lambda,
        });
        if val_rms < best_val {
            best_val = val_rms;
            best_params.copy_from_slice(&params);
            trace.best_epoch = trace.epochs.len();
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                trace.stop_reason = StopReason::PatienceExhausted;
                break;
            }
        }
    }

    let model = MlpModel::from_params(names, h, &best_params, norm)?;
    Ok((model, trace))
}

/// Row-wise predictions in target units, in input row order.
pub fn predict(model: &MlpModel, data: &Dataset, features: &FeatureSubset) -> Result<ScalarSeries, RegressorError> {
    predict_rows(model, data, features, None)
}

/// Predictions for the given rows only (all rows when `None`).
pub fn predict_rows(
    model: &MlpModel,
    data: &Dataset,
    features: &FeatureSubset,
    rows: Option<&[usize]>,
) -> Result<ScalarSeries, RegressorError> {
    let cols = features.columns();
    if cols.len() != model.input_dim() {
        return Err(RegressorError::DimensionMismatch {
            expected: model.input_dim(),
            found: cols.len(),
        });
    }
    let columns = cols.iter().map(|c| data.column(c)).collect::<Result<Vec<_>, _>>()?;
    let all: Vec<usize>;
    let rows = match rows {
        Some(r) => r,
        None => {
            all = (0..data.row_count()).collect();
            &all
        }
    };
    let d = cols.len();
    let params = model.params();
    let mut raw = vec![0.0; d];
    let mut x = vec![0.0; d];
    let mut out = Vec::with_capacity(rows.len());
    for &r in rows {
        for (v, c) in raw.iter_mut().zip(&columns) {
            *v = c[r];
        }
        model.norm.standardize_input(&raw, &mut x);
        out.push(model.norm.destandardize_target(net_output(&params, d, model.hidden_dim, &x)));
    }
    Ok(ScalarSeries::new(out)?)
}

pub fn rms_error(pred: &ScalarSeries, obs: &ScalarSeries) -> Result<f64, RegressorError> {
    if pred.len() != obs.len() {
        return Err(RegressorError::LengthMismatch {
            left: pred.len(),
            right: obs.len(),
        });
    }
    if pred.is_empty() {
        return Err(RegressorError::EmptySeries);
    }
    let sse: f64 = pred
        .values()
        .iter()
        .zip(obs.values())
        .map(|(p, o)| (p - o) * (p - o))
        .sum();
    Ok((sse / pred.len() as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Column, Provenance};
    use std::sync::Arc;

    fn series(v: &[f64]) -> ScalarSeries {
        ScalarSeries::new(v.to_vec()).unwrap()
    }

    fn one_feature_model(w1: f64, b1: f64, w2: f64, b2: f64) -> MlpModel {
        MlpModel::from_parts(vec!["x".into()], vec![w1], vec![b1], vec![w2], b2, NormStats::identity(1)).unwrap()
    }

    #[test]
    fn split_sizes() {
        let cfg = TrainConfig::default();
        let s = split_indices(100, &cfg).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (80, 10, 10));
        let s = split_indices(103, &cfg).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (83, 10, 10));
        let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..103).collect::<Vec<_>>());
        assert!(matches!(split_indices(9, &cfg), Err(RegressorError::TooFewRows { .. })));
    }

    #[test]
    fn split_determinism() {
        let cfg = TrainConfig { seed: 77, ..TrainConfig::default() };
        assert_eq!(split_indices(500, &cfg).unwrap(), split_indices(500, &cfg).unwrap());
        let other = TrainConfig { seed: 78, ..TrainConfig::default() };
        assert_ne!(split_indices(500, &cfg).unwrap(), split_indices(500, &other).unwrap());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig { split: [0.8, 0.1, 0.2], ..TrainConfig::default() };
        assert!(bad.validate().is_err());
        let bad = TrainConfig { hidden_dim: 0, ..TrainConfig::default() };
        assert!(bad.validate().is_err());
        let bad = TrainConfig { lm_lambda_factor: 1.0, ..TrainConfig::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn zero_network_outputs_zero() {
        let m = MlpModel::from_parts(
            vec!["a".into(), "b".into()],
            vec![0.0; 6],
            vec![0.0; 3],
            vec![0.0; 3],
            0.0,
            NormStats::identity(2),
        )
        .unwrap();
        assert_eq!(m.forward(&[3.0, -1.5]).unwrap(), 0.0);
    }

    #[test]
    fn constant_path() {
        let m = one_feature_model(0.0, 0.0, 2.5, -0.75);
        for x in [-3.0, 0.0, 8.0] {
            assert_eq!(m.forward(&[x]).unwrap(), -0.75);
        }
        assert!(matches!(
            m.forward(&[1.0, 2.0]),
            Err(RegressorError::DimensionMismatch { expected: 1, found: 2 })
        ));
    }

    #[test]
    fn forward_destandardizes() {
        let mut m = one_feature_model(0.0, 0.0, 0.0, 1.0);
        m.norm.target_mean = 10.0;
        m.norm.target_std = 2.0;
        assert_eq!(m.forward(&[0.0]).unwrap(), 12.0);
    }

    #[test]
    fn invalid_models_rejected() {
        let mut norm = NormStats::identity(1);
        norm.input_std[0] = 0.0;
        assert!(MlpModel::from_parts(vec!["x".into()], vec![0.0], vec![0.0], vec![0.0], 0.0, norm).is_err());
        assert!(MlpModel::from_parts(vec!["x".into()], vec![f64::NAN], vec![0.0], vec![0.0], 0.0, NormStats::identity(1)).is_err());
        assert!(MlpModel::from_parts(vec!["x".into()], vec![0.0, 1.0], vec![0.0], vec![0.0], 0.0, NormStats::identity(1)).is_err());
    }

    #[test]
    fn standardization_round_trip() {
        let norm = NormStats {
            input_mean: vec![],
            input_std: vec![],
            target_mean: 0.1234,
            target_std: 0.0567,
        };
        for y in [0.0, 1e-3, 0.5, 3.75, -2.2] {
            let back = norm.destandardize_target(norm.standardize_target(y));
            assert!((back - y).abs() <= 1e-12, "{y} -> {back}");
        }
    }

    #[test]
    fn rms_examples() {
        assert_eq!(rms_error(&series(&[1.0, 2.0]), &series(&[1.0, 2.0])).unwrap(), 0.0);
        assert_eq!(rms_error(&series(&[1.0, 1.0]), &series(&[0.0, 2.0])).unwrap(), 1.0);
        let obs = [0.3, -1.0, 2.0];
        let shifted: Vec<f64> = obs.iter().map(|v| v + 0.25).collect();
        assert!((rms_error(&series(&shifted), &series(&obs)).unwrap() - 0.25).abs() < 1e-15);
        assert!(matches!(
            rms_error(&series(&[1.0]), &series(&[1.0, 2.0])),
            Err(RegressorError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn model_file_round_trip() {
        let m = MlpModel::from_parts(
            vec!["a".into(), "βeta".into()],
            vec![0.1, -0.2, 0.3, 0.4],
            vec![0.5, -0.6],
            vec![0.7, 0.8],
            -0.9,
            NormStats {
                input_mean: vec![1.0, 2.0],
                input_std: vec![0.5, 3.0],
                target_mean: 0.2,
                target_std: 0.1,
            },
        )
        .unwrap();
        let mut buf = Vec::new();
        m.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..11], b"RELVAR-MLP\n");
        assert_eq!(MlpModel::read_from(buf.as_slice()).unwrap(), m);
        buf[0] = b'X';
        assert!(matches!(MlpModel::read_from(buf.as_slice()), Err(RegressorError::ModelFormat(_))));
    }

    #[test]
    fn stop_reason_strings() {
        for r in [StopReason::PatienceExhausted, StopReason::LambdaOverflow, StopReason::MaxEpochs] {
            assert_eq!(r.to_string().parse::<StopReason>().unwrap(), r);
        }
    }

    #[test]
    fn constant_feature_is_an_error() {
        let n = 50;
        let data = Dataset::new(
            vec![
                Column { name: "c".into(), values: vec![1.0; n] },
                Column { name: "y".into(), values: (0..n).map(|i| i as f64).collect() },
            ],
            Provenance::default(),
        )
        .unwrap();
        let universe: Arc<[String]> = vec!["c".to_string()].into();
        let subset = FeatureSubset::new(universe, 1).unwrap();
        let cfg = TrainConfig { hidden_dim: 2, ..TrainConfig::default() };
        assert!(matches!(
            train_lm(&data, "y", &subset, &cfg),
            Err(RegressorError::ConstantColumn(ref c)) if c == "c"
        ));
    }
}
