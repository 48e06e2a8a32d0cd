//! Next-state predictors, latent-profile baselines, and predictor training.

pub mod gradcheck;
pub mod nets;
mod train;

use std::fmt;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::format::{Checkpoint, FormatError, Section};
use crate::linalg;
use crate::optim::AdamWConfig;
use crate::rng;

pub use gradcheck::gradient_check;
pub use train::{train_predictor, EpochLog, TrainingPair, MIN_PREFIX_STATES};

/// Below this norm a raw forecast has no direction.
pub const FORECAST_EPS: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum ForecastError {
    #[error("trajectory is empty")]
    Empty,
    #[error("{arch} needs at least {need} states, got {got}")]
    TooFewStates { arch: Arch, need: usize, got: usize },
    #[error("ema beta {0} outside [0, 1]")]
    InvalidBeta(f64),
    #[error("half-life must be positive, got {0}")]
    InvalidHalfLife(f64),
    #[error("model is {found}, expected {expected}")]
    ArchMismatch { expected: Arch, found: Arch },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    Dimension { expected: usize, found: usize },
    #[error("non-finite parameters in block {0}")]
    NonFinite(String),
    #[error("profile is degenerate (norm below {FORECAST_EPS})")]
    Degenerate,
    #[error("training set is empty")]
    EmptyDataset,
    #[error("{0} is not a learned architecture")]
    NotLearned(Arch),
    #[error("non-finite loss at epoch {epoch}, batch {batch}: {detail}")]
    Diverged { epoch: usize, batch: usize, detail: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Arch {
    #[serde(rename = "P0")]
    Last,
    #[serde(rename = "P1")]
    Trend,
    #[serde(rename = "P2")]
    Ema,
    #[serde(rename = "P3")]
    Attention,
    #[serde(rename = "P4")]
    Gru,
    #[serde(rename = "OLS")]
    Ols,
}

impl Arch {
    pub const ALL: [Arch; 6] = [Arch::Last, Arch::Trend, Arch::Ema, Arch::Attention, Arch::Gru, Arch::Ols];

    pub fn tag(self) -> &'static str {
        match self {
            Arch::Last => "P0",
            Arch::Trend => "P1",
            Arch::Ema => "P2",
            Arch::Attention => "P3",
            Arch::Gru => "P4",
            Arch::Ols => "OLS",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.tag() == tag)
    }

    pub fn is_learned(self) -> bool {
        matches!(self, Arch::Attention | Arch::Gru)
    }

    pub fn min_states(self) -> usize {
        match self {
            Arch::Trend | Arch::Ols => 2,
            _ => 1,
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastResult {
    pub raw: Vec<f64>,
    /// `None` when the raw forecast is degenerate.
    pub normalized: Option<Vec<f64>>,
    pub arch: Arch,
    pub input_len: usize,
}

impl ForecastResult {
    pub fn new(raw: Vec<f64>, arch: Arch, input_len: usize) -> Self {
        let normalized = linalg::normalized(&raw, FORECAST_EPS);
        Self { raw, normalized, arch, input_len }
    }

    pub fn is_degenerate(&self) -> bool {
        self.normalized.is_none()
    }
}

fn check_states(arch: Arch, states: &[Vec<f64>]) -> Result<usize, ForecastError> {
    if states.is_empty() {
        return Err(ForecastError::Empty);
    }
    if states.len() < arch.min_states() {
        return Err(ForecastError::TooFewStates { arch, need: arch.min_states(), got: states.len() });
    }
    let d = states[0].len();
    if let Some(bad) = states.iter().find(|s| s.len() != d) {
        return Err(ForecastError::Dimension { expected: d, found: bad.len() });
    }
    Ok(d)
}

pub fn predict_last(states: &[Vec<f64>]) -> Result<ForecastResult, ForecastError> {
    check_states(Arch::Last, states)?;
    Ok(ForecastResult::new(states[states.len() - 1].clone(), Arch::Last, states.len()))
}

pub fn predict_linear_trend(states: &[Vec<f64>]) -> Result<ForecastResult, ForecastError> {
    check_states(Arch::Trend, states)?;
    let n = states.len();
    let raw = states[n - 1].iter().zip(&states[n - 2]).map(|(a, b)| 2.0 * a - b).collect();
    Ok(ForecastResult::new(raw, Arch::Trend, n))
}

pub fn predict_ema(states: &[Vec<f64>], beta: f64) -> Result<ForecastResult, ForecastError> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(ForecastError::InvalidBeta(beta));
    }
    check_states(Arch::Ema, states)?;
    let mean = linalg::mean(states);
    let last = &states[states.len() - 1];
    let raw = last.iter().zip(&mean).map(|(l, m)| beta * l + (1.0 - beta) * m).collect();
    Ok(ForecastResult::new(raw, Arch::Ema, states.len()))
}

/// Per-coordinate least-squares line over indices `1..=n`, evaluated at `n + 1`.
pub fn predict_ols(states: &[Vec<f64>]) -> Result<ForecastResult, ForecastError> {
    let d = check_states(Arch::Ols, states)?;
    let n = states.len();
    if n == 2 {
        // the fit passes through both points; skip the mean so rounding matches the trend
        let raw = states[1].iter().zip(&states[0]).map(|(a, b)| 2.0 * a - b).collect();
        return Ok(ForecastResult::new(raw, Arch::Ols, n));
    }
    let x_mean = (n as f64 + 1.0) / 2.0;
    let sxx: f64 = (1..=n).map(|t| (t as f64 - x_mean).powi(2)).sum();
    let y_mean = linalg::mean(states);
    let mut raw = y_mean.clone();
    for k in 0..d {
        let sxy: f64 = states.iter().enumerate().map(|(i, s)| (i as f64 + 1.0 - x_mean) * (s[k] - y_mean[k])).sum();
        raw[k] += sxy / sxx * (n as f64 + 1.0 - x_mean);
    }
    Ok(ForecastResult::new(raw, Arch::Ols, n))
}

/// `1 - cos(raw, target) + lambda * |raw - target|^2` and its gradient with
/// respect to `raw`. The cosine denominator uses `max(|raw|, eps)`.
pub fn loss_with_grad(raw: &[f64], target: &[f64], lambda: f64) -> (f64, Vec<f64>) {
    let nr_true = linalg::norm(raw);
    let nr = nr_true.max(FORECAST_EPS);
    let nt = linalg::norm(target).max(FORECAST_EPS);
    let dot = linalg::dot(raw, target);
    let cos = dot / (nr * nt);
    let diff = linalg::sub(raw, target);
    let loss = 1.0 - cos + lambda * linalg::dot(&diff, &diff);
    let grad = raw
        .iter()
        .zip(target)
        .zip(&diff)
        .map(|((&r, &t), &e)| {
            let dcos = if nr_true > FORECAST_EPS { t / (nr * nt) - cos * r / (nr * nr) } else { t / (nr * nt) };
            -dcos + 2.0 * lambda * e
        })
        .collect();
    (loss, grad)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue {
    pub loss: f64,
    pub degenerate: bool,
}

pub fn predictor_loss(pred: &ForecastResult, target: &[f64], lambda: f64) -> Result<LossValue, ForecastError> {
    if pred.raw.len() != target.len() {
        return Err(ForecastError::Dimension { expected: target.len(), found: pred.raw.len() });
    }
    let (loss, _) = loss_with_grad(&pred.raw, target, lambda);
    Ok(LossValue { loss, degenerate: pred.is_degenerate() })
}

fn normalized_or_degenerate(v: Vec<f64>) -> Result<Vec<f64>, ForecastError> {
    linalg::normalized(&v, FORECAST_EPS).ok_or(ForecastError::Degenerate)
}

pub fn static_profile(embeddings: &[Vec<f64>]) -> Result<Vec<f64>, ForecastError> {
    if embeddings.is_empty() {
        return Err(ForecastError::Empty);
    }
    normalized_or_degenerate(linalg::mean(embeddings))
}

pub fn recent_profile(embeddings: &[Vec<f64>], k: usize) -> Result<Vec<f64>, ForecastError> {
    if embeddings.is_empty() || k == 0 {
        return Err(ForecastError::Empty);
    }
    static_profile(&embeddings[embeddings.len().saturating_sub(k)..])
}

pub fn time_decayed_profile(embeddings: &[Vec<f64>], timestamps: &[i64], half_life_seconds: f64) -> Result<Vec<f64>, ForecastError> {
    if embeddings.is_empty() {
        return Err(ForecastError::Empty);
    }
    if half_life_seconds.is_nan() || half_life_seconds <= 0.0 {
        return Err(ForecastError::InvalidHalfLife(half_life_seconds));
    }
    if timestamps.len() != embeddings.len() {
        return Err(ForecastError::Dimension { expected: embeddings.len(), found: timestamps.len() });
    }
    let latest = *timestamps.iter().max().expect("non-empty");
    let mut acc = vec![0.0; embeddings[0].len()];
    for (e, &t) in embeddings.iter().zip(timestamps) {
        let w = (-((latest - t) as f64) / half_life_seconds).exp2();
        linalg::axpy(&mut acc, w, e);
    }
    normalized_or_degenerate(acc)
}

pub fn dep_style_profile(states: &[Vec<f64>]) -> Result<Vec<f64>, ForecastError> {
    static_profile(states)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictorHyper {
    pub ema_beta: f64,
    pub hidden_size: usize,
    pub attention_size: usize,
    pub lambda: f64,
    pub optimizer: AdamWConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for PredictorHyper {
    fn default() -> Self {
        Self {
            ema_beta: 0.5,
            hidden_size: 512,
            attention_size: 256,
            lambda: 0.01,
            optimizer: AdamWConfig::default(),
            epochs: 15,
            batch_size: 256,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictorModel {
    pub arch: Arch,
    pub dim: usize,
    pub hyper: PredictorHyper,
    pub params: Vec<f64>,
    pub training_log: Vec<EpochLog>,
}

impl PredictorModel {
    /// A model for any architecture; learned ones get seeded uniform
    /// `±1/sqrt(fan_in)` parameters.
    pub fn init(arch: Arch, dim: usize, hyper: PredictorHyper) -> Self {
        let params = match nets::layout(arch, dim, hyper.hidden_size, hyper.attention_size) {
            None => Vec::new(),
            Some(layout) => {
                let mut rng = rng::stream(hyper.seed, rng::stream_id(&[b"predictor-init", arch.tag().as_bytes()]));
                let mut params = Vec::with_capacity(layout.total);
                for block in &layout.blocks {
                    let bound = 1.0 / (nets::fan_in(arch, block, dim, hyper.hidden_size) as f64).sqrt();
                    params.extend((0..block.rows * block.cols).map(|_| rng.random_range(-bound..bound)));
                }
                params
            }
        };
        Self { arch, dim, hyper, params, training_log: Vec::new() }
    }

    pub fn zeros(arch: Arch, dim: usize, hyper: PredictorHyper) -> Self {
        let mut m = Self::init(arch, dim, hyper);
        m.params.iter_mut().for_each(|p| *p = 0.0);
        m
    }

    pub fn layout(&self) -> Option<nets::ParamLayout> {
        nets::layout(self.arch, self.dim, self.hyper.hidden_size, self.hyper.attention_size)
    }

    pub fn validate(&self) -> Result<(), ForecastError> {
        let expected = self.layout().map_or(0, |l| l.total);
        if self.params.len() != expected {
            return Err(ForecastError::Checkpoint(format!("{} params for {} of dim {}, expected {expected}", self.params.len(), self.arch, self.dim)));
        }
        if let Some(layout) = self.layout() {
            for b in &layout.blocks {
                if !linalg::all_finite(&self.params[b.offset..b.offset + b.rows * b.cols]) {
                    return Err(ForecastError::NonFinite(b.name.to_string()));
                }
            }
        }
        Ok(())
    }

    pub fn predict(&self, states: &[Vec<f64>]) -> Result<ForecastResult, ForecastError> {
        match self.arch {
            Arch::Last => predict_last(states),
            Arch::Trend => predict_linear_trend(states),
            Arch::Ema => predict_ema(states, self.hyper.ema_beta),
            Arch::Ols => predict_ols(states),
            Arch::Attention | Arch::Gru => {
                let d = check_states(self.arch, states)?;
                if d != self.dim {
                    return Err(ForecastError::Dimension { expected: self.dim, found: d });
                }
                self.validate()?;
                let layout = self.layout().expect("learned arch");
                let steps = nets::stack_steps(&[states]);
                let out = nets::forward(self.arch, &layout, &self.params, &steps);
                Ok(ForecastResult::new(out.column(0).iter().copied().collect(), self.arch, states.len()))
            }
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let h = &self.hyper;
        let hyper = vec![
            ("dim".to_string(), self.dim as f64),
            ("ema_beta".to_string(), h.ema_beta),
            ("hidden_size".to_string(), h.hidden_size as f64),
            ("attention_size".to_string(), h.attention_size as f64),
            ("lambda".to_string(), h.lambda),
            ("learning_rate".to_string(), h.optimizer.learning_rate),
            ("beta1".to_string(), h.optimizer.beta1),
            ("beta2".to_string(), h.optimizer.beta2),
            ("adam_eps".to_string(), h.optimizer.eps),
            ("weight_decay".to_string(), h.optimizer.weight_decay),
            ("epochs".to_string(), h.epochs as f64),
            ("batch_size".to_string(), h.batch_size as f64),
        ];
        let sections = self
            .layout()
            .map(|l| {
                l.blocks
                    .iter()
                    .map(|b| Section {
                        name: b.name.to_string(),
                        shape: vec![b.rows, b.cols],
                        data: self.params[b.offset..b.offset + b.rows * b.cols].to_vec(),
                    })
                    .collect()
            })
            .unwrap_or_default();
        let mut ckpt = Checkpoint { arch: self.arch.tag().to_string(), hyper, sections };
        ckpt.push_u64("seed", h.seed);
        ckpt
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, ForecastError> {
        let arch = Arch::from_tag(&ckpt.arch).ok_or_else(|| ForecastError::Checkpoint(format!("unknown arch tag {:?}", ckpt.arch)))?;
        let get = |k: &str| ckpt.hyper_value(k).ok_or_else(|| ForecastError::Checkpoint(format!("missing hyper {k}")));
        let hyper = PredictorHyper {
            ema_beta: get("ema_beta")?,
            hidden_size: get("hidden_size")? as usize,
            attention_size: get("attention_size")? as usize,
            lambda: get("lambda")?,
            optimizer: AdamWConfig {
                learning_rate: get("learning_rate")?,
                beta1: get("beta1")?,
                beta2: get("beta2")?,
                eps: get("adam_eps")?,
                weight_decay: get("weight_decay")?,
            },
            epochs: get("epochs")? as usize,
            batch_size: get("batch_size")? as usize,
            seed: ckpt.u64_value("seed").ok_or_else(|| ForecastError::Checkpoint("missing hyper seed".into()))?,
        };
        let dim = get("dim")? as usize;
        let mut params = Vec::new();
        if let Some(layout) = nets::layout(arch, dim, hyper.hidden_size, hyper.attention_size) {
            for b in &layout.blocks {
                let s = ckpt.section(b.name).ok_or_else(|| ForecastError::Checkpoint(format!("missing section {}", b.name)))?;
                if s.shape != [b.rows, b.cols] {
                    return Err(ForecastError::Checkpoint(format!("section {} has shape {:?}, expected [{}, {}]", b.name, s.shape, b.rows, b.cols)));
                }
                params.extend_from_slice(&s.data);
            }
        }
        let model = Self { arch, dim, hyper, params, training_log: Vec::new() };
        model.validate()?;
        Ok(model)
    }

    /// Writes the checkpoint and a `<path>.log.json` training-log sidecar.
    pub fn save(&self, path: &Path) -> Result<(), ForecastError> {
        let io = |e| ForecastError::Io { path: path.display().to_string(), source: e };
        std::fs::write(path, self.to_checkpoint().to_bytes()?).map_err(io)?;
        let log = serde_json::to_vec_pretty(&self.training_log).expect("log serializes");
        std::fs::write(log_sidecar(path), log).map_err(io)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ForecastError> {
        let io = |e| ForecastError::Io { path: path.display().to_string(), source: e };
        let bytes = std::fs::read(path).map_err(io)?;
        let mut model = Self::from_checkpoint(&Checkpoint::from_bytes(&bytes)?)?;
        if let Ok(log) = std::fs::read(log_sidecar(path)) {
            model.training_log = serde_json::from_slice(&log).map_err(|e| ForecastError::Checkpoint(format!("training log: {e}")))?;
        }
        Ok(model)
    }
}

pub fn log_sidecar(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".log.json");
    s.into()
}

#[cfg(test)]
mod tests;
