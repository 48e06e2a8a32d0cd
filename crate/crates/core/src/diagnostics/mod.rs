//! Representation diagnostics (effective rank, cosine statistics, collapse)
//! and leakage diagnostics (n-gram copy rate, ROUGE, the unmasking demo).

mod leakage;
mod text;

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::index;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{PeerIndex, SessionStore};
use crate::linalg;
use crate::rng;

pub use leakage::{leakage_demo, LeakageArm, LeakageConfig, LeakageReport};
pub use text::{
    ngram_copy_rate, pooled_copy_rate, read_text_records, rouge, score_records, tokenize, CopyRate, PooledCopyRate, RougeScores, RougeSummary,
    TextRecord,
};

#[derive(Debug, Error)]
pub enum DiagnosticsError {
    #[error("need at least {need} vectors, got {got}")]
    TooFew { need: usize, got: usize },
    #[error("vectors have mismatched dimensions ({0} vs {1})")]
    Dimension(usize, usize),
    #[error("no {0} to score")]
    Empty(&'static str),
    #[error("{0}")]
    Input(String),
    #[error(transparent)]
    Forecast(#[from] crate::forecast::ForecastError),
    #[error(transparent)]
    Anchor(#[from] crate::anchor::AnchorError),
}

fn check_dims<V: AsRef<[f64]>>(vectors: &[V]) -> Result<usize, DiagnosticsError> {
    let d = vectors.first().map(|v| v.as_ref().len()).unwrap_or(0);
    for v in vectors {
        if v.as_ref().len() != d {
            return Err(DiagnosticsError::Dimension(d, v.as_ref().len()));
        }
    }
    Ok(d)
}

/// `(sum s)^2 / sum s^2` over the positive entries of a spectrum; 1 when
/// nothing is positive.
pub fn effective_rank_from_spectrum(eigenvalues: &[f64]) -> f64 {
    let top = eigenvalues.iter().copied().fold(0.0, f64::max);
    if top <= 0.0 {
        return 1.0;
    }
    let pos: Vec<f64> = eigenvalues.iter().copied().filter(|&x| x > top * 1e-12).collect();
    let s: f64 = pos.iter().sum();
    let s2: f64 = pos.iter().map(|x| x * x).sum();
    s * s / s2
}

/// Effective rank of the sample covariance (mean-centered, divisor `n - 1`).
/// Zero covariance gives 1.
pub fn effective_rank<V: AsRef<[f64]>>(vectors: &[V]) -> Result<f64, DiagnosticsError> {
    let n = vectors.len();
    if n < 2 {
        return Err(DiagnosticsError::TooFew { need: 2, got: n });
    }
    let d = check_dims(vectors)?;
    let mean = linalg::mean(vectors);
    let centered = DMatrix::from_fn(n, d, |i, k| vectors[i].as_ref()[k] - mean[k]);
    let scale: f64 = vectors.iter().map(|v| linalg::dot(v.as_ref(), v.as_ref())).sum::<f64>() / n as f64;
    // the smaller Gram matrix has the same nonzero spectrum
    let gram = if n <= d { &centered * centered.transpose() } else { centered.transpose() * &centered } / (n as f64 - 1.0);
    let eig = SymmetricEigen::new(gram).eigenvalues;
    let top = eig.iter().copied().fold(0.0, f64::max);
    // identical vectors leave only rounding noise after centering
    if top <= 1e-24 * scale.max(f64::MIN_POSITIVE) {
        return Ok(1.0);
    }
    Ok(effective_rank_from_spectrum(eig.as_slice()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CosineSummary {
    pub mean: f64,
    pub std: f64,
    pub pairs: usize,
}

fn summarize(values: &[f64]) -> CosineSummary {
    let n = values.len();
    if n == 0 {
        return CosineSummary { mean: 0.0, std: 0.0, pairs: 0 };
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    CosineSummary { mean, std: var.sqrt(), pairs: n }
}

/// Deterministic subsample of `0..len` of size at most `k`, in ascending order.
fn sample_indices(len: usize, k: usize, seed: u64, label: &[u8]) -> Vec<usize> {
    if len <= k {
        return (0..len).collect();
    }
    let mut r = rng::labeled(seed, label, 0);
    let mut picked = index::sample(&mut r, len, k).into_vec();
    picked.sort_unstable();
    picked
}

/// Mean cosine between a session's vector and earlier same-item vectors of
/// other users. `vectors` maps session ids to the representation being
/// measured (raw embeddings or states); sessions without one are skipped.
pub fn same_item_peer_cosine(
    store: &SessionStore,
    index: &PeerIndex,
    vectors: &BTreeMap<usize, Vec<f64>>,
    sample_size: usize,
    seed: u64,
) -> CosineSummary {
    let mut pairs = Vec::new();
    for (&sid, _) in vectors {
        let s = store.session(sid);
        for p in index.reviews_before(&s.item_id, s.timestamp) {
            if store.session(p).user_id != s.user_id && vectors.contains_key(&p) {
                pairs.push((sid, p));
            }
        }
    }
    let cos: Vec<f64> =
        sample_indices(pairs.len(), sample_size, seed, b"same-item-pairs").into_iter().map(|i| linalg::cosine(&vectors[&pairs[i].0], &vectors[&pairs[i].1])).collect();
    summarize(&cos)
}

/// Mean `cos(p_t, p_{t+1})` over sampled adjacent pairs.
pub fn adjacent_user_cosine<V: AsRef<[f64]>>(trajectories: &[Vec<V>], sample_size: usize, seed: u64) -> CosineSummary {
    let pairs: Vec<(usize, usize)> = trajectories.iter().enumerate().flat_map(|(u, t)| (1..t.len()).map(move |k| (u, k))).collect();
    let cos: Vec<f64> = sample_indices(pairs.len(), sample_size, seed, b"adjacent-pairs")
        .into_iter()
        .map(|i| {
            let (u, k) = pairs[i];
            linalg::cosine(trajectories[u][k - 1].as_ref(), trajectories[u][k].as_ref())
        })
        .collect();
    summarize(&cos)
}

/// Mean and (population) std of cosine over all unordered pairs.
pub fn pairwise_cosine_stats<V: AsRef<[f64]>>(vectors: &[V]) -> Result<CosineSummary, DiagnosticsError> {
    if vectors.len() < 2 {
        return Err(DiagnosticsError::TooFew { need: 2, got: vectors.len() });
    }
    check_dims(vectors)?;
    let mut cos = Vec::with_capacity(vectors.len() * (vectors.len() - 1) / 2);
    for i in 0..vectors.len() {
        for j in i + 1..vectors.len() {
            cos.push(linalg::cosine(vectors[i].as_ref(), vectors[j].as_ref()));
        }
    }
    Ok(summarize(&cos))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagnosticsConfig {
    /// Predicted vectors fed to the effective rank.
    pub rank_sample: usize,
    pub pair_sample: usize,
    /// Users in the pairwise collapse check.
    pub collapse_users: usize,
    pub seed: u64,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        Self { rank_sample: 1000, pair_sample: 1000, collapse_users: 100, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub effective_rank: f64,
    pub rank_vectors: usize,
    pub same_item_peer_cosine: CosineSummary,
    /// The same statistic on raw response embeddings, when supplied.
    pub raw_same_item_peer_cosine: Option<CosineSummary>,
    pub adjacent_user_cosine: CosineSummary,
    pub pairwise_cosine: CosineSummary,
    pub collapse_users: usize,
    pub config: DiagnosticsConfig,
}

/// Inputs to [`diagnose`]. `predictions` are one predicted state per user.
pub struct DiagnosticsInputs<'a> {
    pub store: &'a SessionStore,
    pub index: &'a PeerIndex,
    pub states: &'a BTreeMap<usize, Vec<f64>>,
    pub raw_embeddings: Option<&'a BTreeMap<usize, Vec<f64>>>,
    pub trajectories: &'a [Vec<Vec<f64>>],
    pub predictions: &'a [Vec<f64>],
}

pub fn diagnose(inputs: &DiagnosticsInputs<'_>, config: &DiagnosticsConfig) -> Result<DiagnosticsReport, DiagnosticsError> {
    let preds = inputs.predictions;
    let rank_idx = sample_indices(preds.len(), config.rank_sample, config.seed, b"rank-sample");
    let rank_vectors: Vec<&Vec<f64>> = rank_idx.iter().map(|&i| &preds[i]).collect();
    let collapse_idx = sample_indices(preds.len(), config.collapse_users, config.seed, b"collapse-sample");
    let collapse: Vec<&Vec<f64>> = collapse_idx.iter().map(|&i| &preds[i]).collect();
    Ok(DiagnosticsReport {
        effective_rank: effective_rank(&rank_vectors)?,
        rank_vectors: rank_vectors.len(),
        same_item_peer_cosine: same_item_peer_cosine(inputs.store, inputs.index, inputs.states, config.pair_sample, config.seed),
        raw_same_item_peer_cosine: inputs.raw_embeddings.map(|raw| same_item_peer_cosine(inputs.store, inputs.index, raw, config.pair_sample, config.seed)),
        adjacent_user_cosine: adjacent_user_cosine(inputs.trajectories, config.pair_sample, config.seed),
        pairwise_cosine: pairwise_cosine_stats(&collapse)?,
        collapse_users: collapse.len(),
        config: *config,
    })
}

impl DiagnosticsReport {
    /// Aligned plain-text rendering.
    pub fn to_table(&self) -> String {
        let mut rows: Vec<(String, String, String)> = vec![
            ("effective_rank".into(), format!("{:.4}", self.effective_rank), self.rank_vectors.to_string()),
            ("same_item_peer_cosine".into(), format!("{:.4}", self.same_item_peer_cosine.mean), self.same_item_peer_cosine.pairs.to_string()),
        ];
        if let Some(raw) = &self.raw_same_item_peer_cosine {
            rows.push(("raw_same_item_peer_cosine".into(), format!("{:.4}", raw.mean), raw.pairs.to_string()));
        }
        rows.push(("adjacent_user_cosine".into(), format!("{:.4}", self.adjacent_user_cosine.mean), self.adjacent_user_cosine.pairs.to_string()));
        rows.push(("pairwise_cosine_mean".into(), format!("{:.4}", self.pairwise_cosine.mean), self.collapse_users.to_string()));
        rows.push(("pairwise_cosine_std".into(), format!("{:.4}", self.pairwise_cosine.std), self.collapse_users.to_string()));
        let w0 = rows.iter().map(|r| r.0.len()).max().unwrap_or(0).max("metric".len());
        let w1 = rows.iter().map(|r| r.1.len()).max().unwrap_or(0).max("value".len());
        let mut out = format!("{:<w0$}  {:>w1$}  n\n", "metric", "value");
        for (m, v, n) in rows {
            let _ = writeln!(out, "{m:<w0$}  {v:>w1$}  {n}");
        }
        out
    }
}
