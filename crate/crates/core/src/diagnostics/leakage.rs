//! Executable leakage demonstration: the same retrieval generator run with
//! strict time masking and with the forbidden unmasked peer mode.
//!
//! For each user the final session is the target. States are built from the
//! earlier sessions, the next state is forecast with the last-state
//! predictor, and the predicted response `baseline + r * state` (with `r`
//! the user's mean residual norm) is decoded to the closest text among the
//! user's history and the peer responses visible to the baseline.

use serde::{Deserialize, Serialize};

use super::text::{pooled_copy_rate, PooledCopyRate};
use super::DiagnosticsError;
use crate::anchor::{self, build_trajectory, AnchorContext, AnchorParams, TimeMaskedPeers};
use crate::corpus::{query_peers, EmbeddingStore, EmbeddingView, PeerIndex, SessionStore, TimeMask};
use crate::forecast;
use crate::linalg;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LeakageConfig {
    pub anchor: AnchorParams,
    pub ngram: usize,
}

impl Default for LeakageConfig {
    fn default() -> Self {
        Self { anchor: AnchorParams::default(), ngram: 8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeakageArm {
    pub time_mask: TimeMask,
    pub copy: PooledCopyRate,
    /// Mean cosine between the generated response's embedding and every
    /// same-item response of other users.
    pub peer_cosine: f64,
    pub generations: usize,
    pub skipped_users: usize,
    /// Peer rows at or after the target time that fed a baseline.
    pub future_peer_reads: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeakageReport {
    pub masked: LeakageArm,
    pub unmasked: LeakageArm,
    pub copy_rate_increased: bool,
    pub peer_cosine_increased: bool,
}

struct Candidate {
    text: String,
    embedding: Vec<f64>,
}

fn run_arm(
    store: &SessionStore,
    embeddings: &EmbeddingStore,
    index: &PeerIndex,
    users: &[String],
    config: &LeakageConfig,
    mask: TimeMask,
) -> Result<LeakageArm, DiagnosticsError> {
    let params = AnchorParams { time_mask: mask, ..config.anchor };
    let ctx = AnchorContext::new(store, EmbeddingView::new(embeddings), index, params);
    let mut cases = Vec::new();
    let mut peer_cos = Vec::new();
    let mut skipped_users = 0;
    let mut future_peer_reads = 0;
    for user in users {
        let ids = store.user_sessions(user);
        let Some((&target, history)) = ids.split_last() else {
            skipped_users += 1;
            continue;
        };
        let build = build_trajectory(&ctx, user, history, &TimeMaskedPeers);
        let t = store.session(target);
        let peers = query_peers(index, store, &t.item_id, t.timestamp, user, &params.peer_query());
        if build.trajectory.is_empty() || peers.is_empty() {
            skipped_users += 1;
            continue;
        }
        future_peer_reads += build.time_mask_violations + peers.peers.iter().filter(|p| p.timestamp >= t.timestamp).count();

        let states = build.trajectory.vectors();
        let next = forecast::predict_last(&states)?;
        let direction = next.normalized.unwrap_or(next.raw);
        let r = build.trajectory.states.iter().map(|s| s.residual_norm).sum::<f64>() / states.len() as f64;
        let target_profile = ctx.profile_summary(user, t.timestamp);
        let peer_profiles: Vec<_> = peers.peers.iter().map(|p| ctx.profile_summary(&p.user_id, t.timestamp)).collect();
        let weights = anchor::peer_weights(&target_profile, &peer_profiles, params.gamma)?;
        let rows: Vec<Vec<f64>> = peers.peers.iter().map(|p| embeddings.row_f64(p.embedding_index)).collect();
        let predicted = linalg::add(&anchor::peer_baseline(&weights, &rows)?, &linalg::scale(&direction, r));

        let bank: Vec<Candidate> = history
            .iter()
            .map(|&sid| store.session(sid))
            .chain(peers.peers.iter().map(|p| store.session(p.session)))
            .map(|s| Candidate { text: s.text.clone(), embedding: embeddings.row_f64(s.embedding_index) })
            .collect();
        let mut best = 0;
        let mut best_cos = f64::NEG_INFINITY;
        for (i, c) in bank.iter().enumerate() {
            let cos = linalg::cosine(&predicted, &c.embedding);
            if cos > best_cos {
                best = i;
                best_cos = cos;
            }
        }
        let generated = &bank[best];

        let reference: Vec<usize> = index.reviews(&t.item_id).into_iter().filter(|&sid| store.session(sid).user_id != *user).collect();
        if reference.is_empty() {
            skipped_users += 1;
            continue;
        }
        let mean_cos = reference
            .iter()
            .map(|&sid| linalg::cosine(&generated.embedding, &embeddings.row_f64(store.session(sid).embedding_index)))
            .sum::<f64>()
            / reference.len() as f64;
        peer_cos.push(mean_cos);
        cases.push((generated.text.clone(), reference.iter().map(|&sid| store.session(sid).text.clone()).collect()));
    }
    if cases.is_empty() {
        return Err(DiagnosticsError::Empty("leakage generations"));
    }
    Ok(LeakageArm {
        time_mask: mask,
        copy: pooled_copy_rate(&cases, config.ngram),
        peer_cosine: peer_cos.iter().sum::<f64>() / peer_cos.len() as f64,
        generations: cases.len(),
        skipped_users,
        future_peer_reads,
    })
}

/// Runs the masked and unmasked arms over `users`. The peer index should
/// contain every session, including ones after each user's target.
pub fn leakage_demo(
    store: &SessionStore,
    embeddings: &EmbeddingStore,
    index: &PeerIndex,
    users: &[String],
    config: &LeakageConfig,
) -> Result<LeakageReport, DiagnosticsError> {
    let masked = run_arm(store, embeddings, index, users, config, TimeMask::Strict)?;
    let unmasked = run_arm(store, embeddings, index, users, config, TimeMask::Unmasked)?;
    Ok(LeakageReport {
        copy_rate_increased: unmasked.copy.pooled.rate > masked.copy.pooled.rate,
        peer_cosine_increased: unmasked.peer_cosine > masked.peer_cosine,
        masked,
        unmasked,
    })
}
