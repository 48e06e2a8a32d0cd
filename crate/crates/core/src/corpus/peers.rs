//! Same-item peer retrieval with strict time masking.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::SessionStore;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Entry {
    timestamp: i64,
    session: usize,
}

/// Item → chronologically ordered reviews, for binary-search time cutoffs.
///
/// Sessions listed in the exclusion set (held-out validation/test sessions)
/// are never offered as peers.
#[derive(Debug, Clone)]
pub struct PeerIndex {
    by_item: BTreeMap<String, Vec<Entry>>,
    excluded: BTreeSet<usize>,
}

impl PeerIndex {
    pub fn build(store: &SessionStore) -> Self {
        Self::build_excluding(store, &BTreeSet::new())
    }

    pub fn build_excluding(store: &SessionStore, excluded: &BTreeSet<usize>) -> Self {
        let mut by_item: BTreeMap<String, Vec<Entry>> = BTreeMap::new();
        for item in store.items() {
            let entries = store
                .item_sessions(item)
                .iter()
                .filter(|i| !excluded.contains(i))
                .map(|&i| Entry { timestamp: store.session(i).timestamp, session: i })
                .collect();
            by_item.insert(item.to_string(), entries);
        }
        Self { by_item, excluded: excluded.clone() }
    }

    pub fn excluded(&self) -> &BTreeSet<usize> {
        &self.excluded
    }

    /// Reviews of `item` strictly before `time`, oldest first.
    pub fn reviews_before(&self, item: &str, time: i64) -> Vec<usize> {
        let entries = self.entries(item);
        let end = entries.partition_point(|e| e.timestamp < time);
        entries[..end].iter().map(|e| e.session).collect()
    }

    pub fn reviews(&self, item: &str) -> Vec<usize> {
        self.entries(item).iter().map(|e| e.session).collect()
    }

    fn entries(&self, item: &str) -> &[Entry] {
        self.by_item.get(item).map(Vec::as_slice).unwrap_or(&[])
    }
}

/// What to do when more than `m` peers are eligible.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OverflowRule {
    #[default]
    MostRecent,
    RandomSeeded,
}

/// Time masking of candidate peers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeMask {
    /// Only reviews strictly before the query time.
    #[default]
    Strict,
    /// Forbidden leakage mode: every other user's review of the item,
    /// including later ones. Exists only for leakage demonstrations.
    Unmasked,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PeerQuery {
    pub m: usize,
    pub min_peer_history: usize,
    pub overflow: OverflowRule,
    pub time_mask: TimeMask,
    pub seed: u64,
}

impl Default for PeerQuery {
    fn default() -> Self {
        Self { m: 16, min_peer_history: 4, overflow: OverflowRule::MostRecent, time_mask: TimeMask::Strict, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Peer {
    pub user_id: String,
    pub session: usize,
    pub embedding_index: usize,
    pub timestamp: i64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PeerSet {
    pub item_id: String,
    pub query_time: i64,
    pub target_user: String,
    /// Selected peers, oldest response first.
    pub peers: Vec<Peer>,
    pub candidates_considered: usize,
    pub excluded_by_history: usize,
}

impl PeerSet {
    pub fn is_empty(&self) -> bool {
        self.peers.is_empty()
    }

    pub fn len(&self) -> usize {
        self.peers.len()
    }
}

/// Eligible same-item peers for `target_user` at `query_time`.
///
/// Candidates are reviews of `item` strictly before `query_time` by other
/// users who have at least `min_peer_history` interactions (anywhere in the
/// corpus) before `query_time`. Each peer user contributes their latest such
/// review. If more than `m` remain, the overflow rule picks which to keep.
pub fn query_peers(
    index: &PeerIndex,
    store: &SessionStore,
    item: &str,
    query_time: i64,
    target_user: &str,
    query: &PeerQuery,
) -> PeerSet {
    let candidates: Vec<usize> = match query.time_mask {
        TimeMask::Strict => index.reviews_before(item, query_time),
        TimeMask::Unmasked => index.reviews(item),
    };
    let mut excluded_by_history = 0;
    // newest first, so the first review seen per user is their latest
    let mut seen_users = BTreeSet::new();
    let mut eligible: Vec<usize> = Vec::new();
    for &sid in candidates.iter().rev() {
        let s = store.session(sid);
        if s.user_id == target_user || seen_users.contains(s.user_id.as_str()) {
            continue;
        }
        let history_cutoff = match query.time_mask {
            TimeMask::Strict => query_time,
            TimeMask::Unmasked => query_time.max(s.timestamp),
        };
        if store.interactions_before(&s.user_id, history_cutoff) < query.min_peer_history {
            excluded_by_history += 1;
            continue;
        }
        seen_users.insert(s.user_id.as_str());
        eligible.push(sid);
    }
    if eligible.len() > query.m {
        match query.overflow {
            OverflowRule::MostRecent => eligible.truncate(query.m),
            OverflowRule::RandomSeeded => {
                let stream = rng::stream_id(&[item.as_bytes(), target_user.as_bytes(), &query_time.to_le_bytes()]);
                let mut r = rng::stream(query.seed, stream);
                eligible.shuffle(&mut r);
                eligible.truncate(query.m);
            }
        }
    }
    eligible.sort_unstable();
    let peers = eligible
        .into_iter()
        .map(|sid| {
            let s = store.session(sid);
            Peer { user_id: s.user_id.clone(), session: sid, embedding_index: s.embedding_index, timestamp: s.timestamp }
        })
        .collect();
    PeerSet {
        item_id: item.to_string(),
        query_time,
        target_user: target_user.to_string(),
        peers,
        candidates_considered: candidates.len(),
        excluded_by_history,
    }
}

/// Number of eligible peers, ignoring the `m` cap.
pub fn count_eligible_peers(
    index: &PeerIndex,
    store: &SessionStore,
    item: &str,
    query_time: i64,
    target_user: &str,
    min_peer_history: usize,
) -> usize {
    let q = PeerQuery { m: usize::MAX, min_peer_history, ..PeerQuery::default() };
    query_peers(index, store, item, query_time, target_user, &q).len()
}
