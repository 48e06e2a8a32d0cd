//! Peer-anchored relative states.
//!
//! For a historical session of user `u` on item `i` at time `t`:
//!
//! ```text
//! profile(u, t)  = normalize(sum of u's response embeddings before t)   (zero if none)
//! w_v            = softmax_v(gamma * <profile(u, t), profile(v, t)>)     (uniform fallback)
//! baseline       = sum_v w_v * enc(response of peer v to i)
//! residual       = enc(response of u to i) - baseline
//! state          = residual / |residual|
//! ```
//!
//! Peers come from [`crate::corpus::query_peers`]: same item, strictly
//! earlier, target user excluded.

mod cache;

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{query_peers, EmbeddingView, OverflowRule, Peer, PeerIndex, PeerQuery, PeerSet, SessionStore, TimeMask};
use crate::linalg;

pub use cache::{read_trajectories, write_trajectories, TRAJECTORY_MAGIC, TRAJECTORY_VERSION};

#[derive(Debug, Error, PartialEq)]
pub enum AnchorError {
    #[error("peer weighting needs at least one peer")]
    NoPeers,
    #[error("length mismatch: {0} weights for {1} peer embeddings")]
    LengthMismatch(usize, usize),
    #[error("dimension mismatch: {0} vs {1}")]
    Dimension(usize, usize),
    #[error("delta index {index} out of range for a trajectory of {len} states")]
    DeltaIndex { index: usize, len: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnchorParams {
    pub m: usize,
    pub gamma: f64,
    /// Residuals with norm at or below this are degenerate and skipped.
    pub eps: f64,
    pub min_peer_history: usize,
    pub overflow: OverflowRule,
    pub time_mask: TimeMask,
    pub peer_seed: u64,
}

impl Default for AnchorParams {
    fn default() -> Self {
        Self {
            m: 16,
            gamma: 10.0,
            eps: 1e-8,
            min_peer_history: 4,
            overflow: OverflowRule::MostRecent,
            time_mask: TimeMask::Strict,
            peer_seed: 0,
        }
    }
}

impl AnchorParams {
    pub fn peer_query(&self) -> PeerQuery {
        PeerQuery {
            m: self.m,
            min_peer_history: self.min_peer_history,
            overflow: self.overflow,
            time_mask: self.time_mask,
            seed: self.peer_seed,
        }
    }
}

/// Profile sums with norm below this are treated as zero profiles.
pub const PROFILE_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct ProfileSummary {
    pub vector: Vec<f64>,
    pub is_zero: bool,
}

impl ProfileSummary {
    pub fn zero(d: usize) -> Self {
        Self { vector: vec![0.0; d], is_zero: true }
    }

    /// Normalized sum of `embeddings`; zero when empty or when the sum cancels.
    pub fn from_embeddings<V: AsRef<[f64]>>(d: usize, embeddings: &[V]) -> Self {
        let mut sum = vec![0.0; d];
        for e in embeddings {
            linalg::axpy(&mut sum, 1.0, e.as_ref());
        }
        match linalg::normalized(&sum, PROFILE_EPS) {
            Some(vector) => Self { vector, is_zero: false },
            None => Self::zero(d),
        }
    }
}

/// Softmax of `gamma`-scaled profile inner products, or uniform weights when
/// the target profile or every peer profile is zero.
pub fn peer_weights(target: &ProfileSummary, peers: &[ProfileSummary], gamma: f64) -> Result<Vec<f64>, AnchorError> {
    if peers.is_empty() {
        return Err(AnchorError::NoPeers);
    }
    let k = peers.len();
    if target.is_zero || peers.iter().all(|p| p.is_zero) {
        return Ok(vec![1.0 / k as f64; k]);
    }
    let scores: Vec<f64> = peers.iter().map(|p| gamma * linalg::dot(&target.vector, &p.vector)).collect();
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exp.iter().sum();
    Ok(exp.iter().map(|e| e / total).collect())
}

/// Weighted sum of peer response embeddings.
pub fn peer_baseline<V: AsRef<[f64]>>(weights: &[f64], peer_embeddings: &[V]) -> Result<Vec<f64>, AnchorError> {
    if weights.len() != peer_embeddings.len() {
        return Err(AnchorError::LengthMismatch(weights.len(), peer_embeddings.len()));
    }
    let Some(first) = peer_embeddings.first() else {
        return Err(AnchorError::NoPeers);
    };
    let d = first.as_ref().len();
    let mut out = vec![0.0; d];
    for (w, e) in weights.iter().zip(peer_embeddings) {
        let e = e.as_ref();
        if e.len() != d {
            return Err(AnchorError::Dimension(d, e.len()));
        }
        linalg::axpy(&mut out, *w, e);
    }
    Ok(out)
}

/// Unnormalized residual `response - baseline`.
pub fn raw_residual(response: &[f64], baseline: &[f64]) -> Result<Vec<f64>, AnchorError> {
    if response.len() != baseline.len() {
        return Err(AnchorError::Dimension(response.len(), baseline.len()));
    }
    Ok(linalg::sub(response, baseline))
}

#[derive(Debug, Clone, PartialEq)]
pub enum ResidualOutcome {
    Normalized { vector: Vec<f64>, residual_norm: f64 },
    Degenerate { residual_norm: f64 },
}

pub fn relative_state(response: &[f64], baseline: &[f64], eps: f64) -> Result<ResidualOutcome, AnchorError> {
    let residual = raw_residual(response, baseline)?;
    let residual_norm = linalg::norm(&residual);
    if residual_norm <= eps {
        return Ok(ResidualOutcome::Degenerate { residual_norm });
    }
    let vector = residual.iter().map(|x| x / residual_norm).collect();
    Ok(ResidualOutcome::Normalized { vector, residual_norm })
}

/// Shannon entropy (nats) of a weight vector.
pub fn weight_entropy(weights: &[f64]) -> f64 {
    -weights.iter().filter(|&&w| w > 0.0).map(|w| w * w.ln()).sum::<f64>()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelativeState {
    pub vector: Vec<f64>,
    pub residual_norm: f64,
    pub peer_count: usize,
    pub weight_entropy: f64,
    pub session: usize,
    pub timestamp: i64,
}

/// A user's states in session order.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub user_id: String,
    pub states: Vec<RelativeState>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn vectors(&self) -> Vec<Vec<f64>> {
        self.states.iter().map(|s| s.vector.clone()).collect()
    }

    pub fn timestamps(&self) -> Vec<i64> {
        self.states.iter().map(|s| s.timestamp).collect()
    }

    /// States whose session precedes `session` in store order.
    pub fn prefix_before(&self, session: usize) -> &[RelativeState] {
        let end = self.states.partition_point(|s| s.session < session);
        &self.states[..end]
    }
}

/// `p_t - p_{t-1}` for 1-based `t` in `2..=len`.
pub fn adjacent_delta(trajectory: &Trajectory, t: usize) -> Result<Vec<f64>, AnchorError> {
    if t < 2 || t > trajectory.len() {
        return Err(AnchorError::DeltaIndex { index: t, len: trajectory.len() });
    }
    Ok(linalg::sub(&trajectory.states[t - 1].vector, &trajectory.states[t - 2].vector))
}

/// Source of peer sets for a session.
pub trait PeerSource: Sync {
    fn peer_set(&self, ctx: &AnchorContext<'_>, session: usize) -> PeerSet;
}

/// Time-masked same-item peers from the context's index.
pub struct TimeMaskedPeers;

impl PeerSource for TimeMaskedPeers {
    fn peer_set(&self, ctx: &AnchorContext<'_>, session: usize) -> PeerSet {
        let s = ctx.store.session(session);
        query_peers(ctx.index, ctx.store, &s.item_id, s.timestamp, &s.user_id, &ctx.params.peer_query())
    }
}

/// Externally supplied peer lists, e.g. category peers. Sessions without an
/// entry get no peers.
pub struct SuppliedPeers(pub BTreeMap<usize, Vec<Peer>>);

impl PeerSource for SuppliedPeers {
    fn peer_set(&self, ctx: &AnchorContext<'_>, session: usize) -> PeerSet {
        let s = ctx.store.session(session);
        let peers = self.0.get(&session).cloned().unwrap_or_default();
        PeerSet {
            item_id: s.item_id.clone(),
            query_time: s.timestamp,
            target_user: s.user_id.clone(),
            candidates_considered: peers.len(),
            excluded_by_history: 0,
            peers,
        }
    }
}

/// Everything state construction reads from.
pub struct AnchorContext<'a> {
    pub store: &'a SessionStore,
    pub embeddings: EmbeddingView<'a>,
    pub index: &'a PeerIndex,
    pub params: AnchorParams,
    row_latest_time: HashMap<usize, i64>,
}

impl<'a> AnchorContext<'a> {
    pub fn new(store: &'a SessionStore, embeddings: EmbeddingView<'a>, index: &'a PeerIndex, params: AnchorParams) -> Self {
        let mut row_latest_time: HashMap<usize, i64> = HashMap::new();
        for s in store.sessions() {
            let e = row_latest_time.entry(s.embedding_index).or_insert(s.timestamp);
            *e = (*e).max(s.timestamp);
        }
        Self { store, embeddings, index, params, row_latest_time }
    }

    pub fn dim(&self) -> usize {
        self.embeddings.dim()
    }

    fn read(&self, row: usize, reads: &mut Vec<usize>) -> Vec<f64> {
        reads.push(row);
        self.embeddings.get(row)
    }

    fn profile_with(&self, user: &str, cutoff: i64, reads: &mut Vec<usize>) -> ProfileSummary {
        let excluded = self.index.excluded();
        let rows: Vec<Vec<f64>> = self
            .store
            .user_sessions(user)
            .iter()
            .take_while(|&&sid| self.store.session(sid).timestamp < cutoff)
            .filter(|sid| !excluded.contains(sid))
            .map(|&sid| self.read(self.store.session(sid).embedding_index, reads))
            .collect();
        ProfileSummary::from_embeddings(self.dim(), &rows)
    }

    /// Profile summary of `user` from sessions strictly before `cutoff`;
    /// held-out sessions excluded from the peer index are never read.
    pub fn profile_summary(&self, user: &str, cutoff: i64) -> ProfileSummary {
        self.profile_with(user, cutoff, &mut Vec::new())
    }

    /// Builds the state of one session, reporting why it was skipped
    /// otherwise. The returned row list is every embedding row read.
    pub fn session_state(&self, session: usize, peers: &PeerSet) -> (Result<RelativeState, SkipReason>, Vec<usize>) {
        let mut reads = Vec::new();
        let outcome = self.session_state_inner(session, peers, &mut reads);
        (outcome, reads)
    }

    fn session_state_inner(&self, session: usize, peers: &PeerSet, reads: &mut Vec<usize>) -> Result<RelativeState, SkipReason> {
        if peers.is_empty() {
            return Err(SkipReason::NoPeers);
        }
        let s = self.store.session(session);
        let target = self.profile_with(&s.user_id, s.timestamp, reads);
        let peer_profiles: Vec<ProfileSummary> =
            peers.peers.iter().map(|p| self.profile_with(&p.user_id, s.timestamp, reads)).collect();
        let weights = peer_weights(&target, &peer_profiles, self.params.gamma).map_err(|_| SkipReason::NoPeers)?;
        let peer_rows: Vec<Vec<f64>> = peers.peers.iter().map(|p| self.read(p.embedding_index, reads)).collect();
        let baseline = peer_baseline(&weights, &peer_rows).map_err(|_| SkipReason::NoPeers)?;
        let response = self.read(s.embedding_index, reads);
        match relative_state(&response, &baseline, self.params.eps).map_err(|_| SkipReason::Degenerate)? {
            ResidualOutcome::Normalized { vector, residual_norm } => Ok(RelativeState {
                vector,
                residual_norm,
                peer_count: peers.len(),
                weight_entropy: weight_entropy(&weights),
                session,
                timestamp: s.timestamp,
            }),
            ResidualOutcome::Degenerate { .. } => Err(SkipReason::Degenerate),
        }
    }

    /// Rows in `reads` (other than the session's own response) owned by a
    /// session at or after the session's timestamp.
    pub fn time_mask_violations(&self, session: usize, reads: &[usize]) -> usize {
        let s = self.store.session(session);
        reads
            .iter()
            .filter(|&&row| row != s.embedding_index)
            .filter(|row| self.row_latest_time.get(row).is_some_and(|&t| t >= s.timestamp))
            .count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SkipReason {
    NoPeers,
    Degenerate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryBuild {
    pub trajectory: Trajectory,
    pub skipped_no_peers: usize,
    pub skipped_degenerate: usize,
    /// Future rows read during peer computations; zero unless peers were
    /// supplied from outside the time mask.
    pub time_mask_violations: usize,
    /// Peer counts of the sessions that produced a state.
    pub peer_counts: Vec<usize>,
}

/// States for `sessions` (ids of `user`'s sessions, chronological).
pub fn build_trajectory(ctx: &AnchorContext<'_>, user: &str, sessions: &[usize], source: &dyn PeerSource) -> TrajectoryBuild {
    let mut build = TrajectoryBuild {
        trajectory: Trajectory { user_id: user.to_string(), states: Vec::new() },
        skipped_no_peers: 0,
        skipped_degenerate: 0,
        time_mask_violations: 0,
        peer_counts: Vec::new(),
    };
    for &sid in sessions {
        debug_assert_eq!(ctx.store.session(sid).user_id, user);
        let peers = source.peer_set(ctx, sid);
        let (outcome, reads) = ctx.session_state(sid, &peers);
        build.time_mask_violations += ctx.time_mask_violations(sid, &reads);
        match outcome {
            Ok(state) => {
                build.peer_counts.push(state.peer_count);
                build.trajectory.states.push(state);
            }
            Err(SkipReason::NoPeers) => build.skipped_no_peers += 1,
            Err(SkipReason::Degenerate) => build.skipped_degenerate += 1,
        }
    }
    build
}

/// Sessions of `user` strictly before `session` (in store order) that are
/// not in `exclude`.
pub fn sessions_before(store: &SessionStore, user: &str, session: usize, exclude: &BTreeSet<usize>) -> Vec<usize> {
    store.user_sessions(user).iter().copied().filter(|&s| s < session && !exclude.contains(&s)).collect()
}

#[cfg(test)]
mod tests;
