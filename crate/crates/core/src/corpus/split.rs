//! User-level chronological splits and rolling predictor pairs.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{FilterReport, SessionStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    /// Users with fewer sessions are excluded.
    pub min_sessions: usize,
    /// States a rolling prefix must contain before it becomes a training pair.
    pub min_prefix_states: usize,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self { min_sessions: 8, min_prefix_states: 4 }
    }
}

/// A rolling training pair: the prefix is every session of the user up to
/// and including `prefix_end`; `target` is the next session.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RollingPair {
    pub prefix_end: usize,
    pub target: usize,
}

/// Session ids are positions in the [`SessionStore`] order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserSplit {
    pub test: usize,
    pub val: usize,
    pub bridge_train: usize,
    pub predictor_pairs: Vec<RollingPair>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExclusionReason {
    TooFewSessions,
    FailedFilters,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub config: SplitConfig,
    pub users: BTreeMap<String, UserSplit>,
    pub excluded: BTreeMap<String, ExclusionReason>,
}

impl SplitAssignment {
    /// Validation and test sessions of every user.
    pub fn held_out_sessions(&self) -> BTreeSet<usize> {
        self.users.values().flat_map(|u| [u.val, u.test]).collect()
    }

    /// Embedding rows owned by held-out sessions.
    pub fn held_out_rows(&self, store: &SessionStore) -> BTreeSet<usize> {
        self.held_out_sessions().into_iter().map(|s| store.session(s).embedding_index).collect()
    }

    /// Rolling instances (training pairs + validation + test), the count
    /// reported as "target instances".
    pub fn target_instances(&self) -> usize {
        self.users.values().map(|u| u.predictor_pairs.len() + 2).sum()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("split serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }
}

/// Assigns test (last), validation (second last) and bridge-training (third
/// last) sessions per user, and enumerates rolling predictor pairs whose
/// targets all precede the validation session.
///
/// Pairs whose prefix would contain fewer than `min_prefix_states` sessions
/// are skipped, as are pairs whose prefix end shares the target's timestamp.
/// When `retained` is given, users outside it are excluded.
pub fn chronological_split(
    store: &SessionStore,
    config: &SplitConfig,
    retained: Option<&FilterReport>,
) -> SplitAssignment {
    let mut users = BTreeMap::new();
    let mut excluded = BTreeMap::new();
    for user in store.users() {
        if let Some(report) = retained {
            if !report.is_retained(user) {
                excluded.insert(user.to_string(), ExclusionReason::FailedFilters);
                continue;
            }
        }
        let sessions = store.user_sessions(user);
        let n = sessions.len();
        if n < config.min_sessions.max(3) {
            excluded.insert(user.to_string(), ExclusionReason::TooFewSessions);
            continue;
        }
        let val_pos = n - 2;
        let predictor_pairs = (config.min_prefix_states.max(1)..val_pos)
            .filter(|&j| store.session(sessions[j - 1]).timestamp < store.session(sessions[j]).timestamp)
            .map(|j| RollingPair { prefix_end: sessions[j - 1], target: sessions[j] })
            .collect();
        users.insert(
            user.to_string(),
            UserSplit { test: sessions[n - 1], val: sessions[n - 2], bridge_train: sessions[n - 3], predictor_pairs },
        );
    }
    SplitAssignment { config: *config, users, excluded }
}
