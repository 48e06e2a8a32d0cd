//! WebAssembly entry points for the static demo page in `www/`.
//!
//! Each operation has a plain Rust function returning JSON (tested natively)
//! and a `#[wasm_bindgen]` wrapper that turns errors into JS exceptions.

use std::collections::BTreeMap;

use latte_core::anchor::{self, build_trajectory, AnchorContext, AnchorParams, ProfileSummary, TimeMaskedPeers};
use latte_core::corpus::{EmbeddingView, PeerIndex};
use latte_core::diagnostics::same_item_peer_cosine;
use latte_core::driftlab::{analytic_mse, gen_additive, monte_carlo_mse, DriftModelConfig, Estimator, SyntheticCorpusConfig};
use serde::Serialize;
use wasm_bindgen::prelude::*;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DriftCurves {
    pub horizons: Vec<usize>,
    /// Analytic MSE per estimator name, aligned with `horizons`.
    pub mse: BTreeMap<&'static str, Vec<f64>>,
    /// Monte Carlo MSE at the last horizon.
    pub empirical: BTreeMap<&'static str, f64>,
}

/// Analytic MSE of the static, last-state and OLS estimators for horizons
/// `3..=max_horizon`, plus a Monte Carlo check at `max_horizon`.
pub fn drift_curves(dim: usize, drift_norm: f64, noise_std: f64, max_horizon: usize, trials: usize, seed: u64) -> Result<DriftCurves, String> {
    if max_horizon < 3 || max_horizon > 200 || dim == 0 || dim > 256 {
        return Err("need 3 <= horizon <= 200 and 1 <= dim <= 256".into());
    }
    let horizons: Vec<usize> = (3..=max_horizon).collect();
    let mut mse: BTreeMap<&'static str, Vec<f64>> = BTreeMap::new();
    for &t in &horizons {
        let cfg = DriftModelConfig::with_drift_norm(dim, drift_norm, noise_std * noise_std, t);
        cfg.validate().map_err(|e| e.to_string())?;
        for e in Estimator::ALL {
            let (bias_sq, var) = analytic_mse(e, &cfg).map_err(|e| e.to_string())?;
            mse.entry(e.name()).or_default().push(bias_sq + var);
        }
    }
    let mut empirical = BTreeMap::new();
    let cfg = DriftModelConfig::with_drift_norm(dim, drift_norm, noise_std * noise_std, max_horizon);
    for e in Estimator::ALL {
        let report = monte_carlo_mse(e, &cfg, trials.clamp(1, 20_000), seed).map_err(|e| e.to_string())?;
        empirical.insert(e.name(), report.empirical_mse.unwrap_or(f64::NAN));
    }
    Ok(DriftCurves { horizons, mse, empirical })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WeightSweep {
    pub gammas: Vec<f64>,
    /// `weights[i][j]`: weight of peer `j` at `gammas[i]`.
    pub weights: Vec<Vec<f64>>,
}

/// Peer weights as the temperature grows from 0 to `gamma_max`, for peers
/// whose profiles have the given cosine similarities to the target profile.
pub fn peer_weight_sweep(similarities: &[f64], gamma_max: f64, steps: usize) -> Result<WeightSweep, String> {
    if similarities.is_empty() || similarities.iter().any(|s| !(-1.0..=1.0).contains(s)) {
        return Err("similarities must be non-empty and lie in [-1, 1]".into());
    }
    if !(gamma_max >= 0.0 && gamma_max.is_finite()) || steps < 2 {
        return Err("gamma_max must be finite and non-negative, steps at least 2".into());
    }
    // unit profiles in the plane with the requested angles to the target
    let target = ProfileSummary::from_embeddings(2, &[[1.0, 0.0]]);
    let peers: Vec<ProfileSummary> = similarities.iter().map(|&s| ProfileSummary::from_embeddings(2, &[[s, (1.0 - s * s).max(0.0).sqrt()]])).collect();
    let gammas: Vec<f64> = (0..steps).map(|i| gamma_max * i as f64 / (steps - 1) as f64).collect();
    let weights = gammas.iter().map(|&g| anchor::peer_weights(&target, &peers, g).map_err(|e| e.to_string())).collect::<Result<_, _>>()?;
    Ok(WeightSweep { gammas, weights })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnchoringPoint {
    pub item_scale: f64,
    /// Mean cosine between same-item responses of different users.
    pub raw: f64,
    /// The same statistic on anchored states.
    pub anchored: f64,
}

/// Same-item cosine before and after anchoring on small synthetic corpora
/// whose item component has the given per-coordinate variances.
pub fn anchoring_sweep(item_scales: &[f64], noise_var: f64, seed: u64) -> Result<Vec<AnchoringPoint>, String> {
    if item_scales.is_empty() || item_scales.len() > 16 {
        return Err("give between 1 and 16 item scales".into());
    }
    item_scales
        .iter()
        .map(|&item_scale| {
            let cfg = SyntheticCorpusConfig { dim: 16, items: 10, background_users: 8, users: 20, sessions_per_user: 8, item_scale, noise_var, seed, ..SyntheticCorpusConfig::default() };
            let corpus = gen_additive(&cfg).map_err(|e| e.to_string())?;
            let embs = corpus.embeddings.as_ref().ok_or("corpus has no embeddings")?;
            let store = &corpus.sessions;
            let index = PeerIndex::build(store);
            let ctx = AnchorContext::new(store, EmbeddingView::new(embs), &index, AnchorParams::default());
            let mut states = BTreeMap::new();
            let mut raw = BTreeMap::new();
            for u in 0..cfg.users {
                let user = format!("user{u:03}");
                for s in build_trajectory(&ctx, &user, store.user_sessions(&user), &TimeMaskedPeers).trajectory.states {
                    raw.insert(s.session, embs.row_f64(store.session(s.session).embedding_index));
                    states.insert(s.session, s.vector);
                }
            }
            Ok(AnchoringPoint {
                item_scale,
                raw: same_item_peer_cosine(store, &index, &raw, 500, seed).mean,
                anchored: same_item_peer_cosine(store, &index, &states, 500, seed).mean,
            })
        })
        .collect()
}

fn to_js<T: Serialize>(r: Result<T, String>) -> Result<String, JsValue> {
    r.map(|v| serde_json::to_string(&v).expect("demo output serializes")).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen(js_name = driftCurves)]
pub fn drift_curves_js(dim: usize, drift_norm: f64, noise_std: f64, max_horizon: usize, trials: usize, seed: u32) -> Result<String, JsValue> {
    to_js(drift_curves(dim, drift_norm, noise_std, max_horizon, trials, seed.into()))
}

#[wasm_bindgen(js_name = peerWeightSweep)]
pub fn peer_weight_sweep_js(similarities: &[f64], gamma_max: f64, steps: usize) -> Result<String, JsValue> {
    to_js(peer_weight_sweep(similarities, gamma_max, steps))
}

#[wasm_bindgen(js_name = anchoringSweep)]
pub fn anchoring_sweep_js(item_scales: &[f64], noise_var: f64, seed: u32) -> Result<String, JsValue> {
    to_js(anchoring_sweep(item_scales, noise_var, seed.into()))
}
