use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::peers::{count_eligible_peers, PeerIndex};
use super::SessionStore;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterConfig {
    /// Earlier sessions a target instance needs.
    pub min_history: usize,
    /// Time-valid peers each historical session needs.
    pub min_valid_peers: usize,
    /// Minimum characters of a target response.
    pub min_chars: usize,
    /// Earlier interactions a peer needs to count as time valid.
    pub min_peer_history: usize,
    /// Also require `min_chars` on every historical session.
    pub min_chars_on_history: bool,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self { min_history: 8, min_valid_peers: 4, min_chars: 30, min_peer_history: 4, min_chars_on_history: false }
    }
}

/// Outcome of the eligibility filters. The store itself is left intact:
/// users who fail the filters still serve as peers for others.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FilterReport {
    pub config: FilterConfig,
    /// Retained users → their eligible target-instance session ids.
    pub retained: BTreeMap<String, Vec<usize>>,
    pub users_total: usize,
    pub target_instances: usize,
}

impl FilterReport {
    pub fn retention(&self) -> f64 {
        if self.users_total == 0 {
            0.0
        } else {
            self.retained.len() as f64 / self.users_total as f64
        }
    }

    pub fn is_retained(&self, user: &str) -> bool {
        self.retained.contains_key(user)
    }
}

/// Applies the history, peer-coverage and response-length filters.
///
/// A session at position `k` of its user's history is an eligible target
/// instance when `k >= min_history`, its text has at least `min_chars`
/// characters, and every earlier session of the user has at least
/// `min_valid_peers` time-valid same-item peers. A user is retained when
/// their final session (the test target) is eligible.
pub fn apply_filters(store: &SessionStore, index: &PeerIndex, config: &FilterConfig) -> FilterReport {
    let mut retained = BTreeMap::new();
    let mut target_instances = 0;
    for user in store.users() {
        let sessions = store.user_sessions(user);
        let mut eligible = Vec::new();
        let mut history_ok = true;
        for (k, &sid) in sessions.iter().enumerate() {
            let s = store.session(sid);
            let long_enough = s.text.chars().count() >= config.min_chars;
            if history_ok && k >= config.min_history && long_enough {
                eligible.push(sid);
            }
            let peers =
                count_eligible_peers(index, store, &s.item_id, s.timestamp, user, config.min_peer_history);
            if peers < config.min_valid_peers || (config.min_chars_on_history && !long_enough) {
                history_ok = false;
            }
        }
        if eligible.last() == sessions.last() && !eligible.is_empty() {
            target_instances += eligible.len();
            retained.insert(user.to_string(), eligible);
        }
    }
    FilterReport { config: *config, retained, users_total: store.user_count(), target_instances }
}
