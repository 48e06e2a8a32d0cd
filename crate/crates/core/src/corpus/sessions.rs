use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CorpusError, EmbeddingStore};

/// One interaction: a user's text response to an item at a point in time.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Session {
    pub user_id: String,
    pub item_id: String,
    pub timestamp: i64,
    pub text: String,
    pub embedding_index: usize,
}

/// Wire form of a session line.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionRecord {
    pub user: String,
    pub item: String,
    pub ts: i64,
    pub text: String,
    pub emb: usize,
}

impl From<&Session> for SessionRecord {
    fn from(s: &Session) -> Self {
        Self {
            user: s.user_id.clone(),
            item: s.item_id.clone(),
            ts: s.timestamp,
            text: s.text.clone(),
            emb: s.embedding_index,
        }
    }
}

/// Immutable, indexed collection of sessions.
///
/// Sessions are stored in the total order `(timestamp, user_id, item_id)`;
/// a session's position in that order is its id everywhere else in the crate.
#[derive(Debug, Clone, Default)]
pub struct SessionStore {
    sessions: Vec<Session>,
    by_user: BTreeMap<String, Vec<usize>>,
    by_item: BTreeMap<String, Vec<usize>>,
    tied_sessions: usize,
}

impl SessionStore {
    pub fn from_sessions(mut sessions: Vec<Session>) -> Result<Self, CorpusError> {
        for (i, s) in sessions.iter().enumerate() {
            if s.timestamp <= 0 {
                return Err(CorpusError::Invalid { line: i + 1, reason: "timestamp must be positive".into() });
            }
            if s.text.is_empty() {
                return Err(CorpusError::Invalid { line: i + 1, reason: "text must be non-empty".into() });
            }
        }
        sessions.sort_by(|a, b| {
            (a.timestamp, &a.user_id, &a.item_id).cmp(&(b.timestamp, &b.user_id, &b.item_id))
        });
        let duplicates: Vec<String> = sessions
            .windows(2)
            .filter(|w| {
                w[0].timestamp == w[1].timestamp && w[0].user_id == w[1].user_id && w[0].item_id == w[1].item_id
            })
            .map(|w| format!("({}, {}, {})", w[0].user_id, w[0].item_id, w[0].timestamp))
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        if !duplicates.is_empty() {
            return Err(CorpusError::Duplicates(duplicates));
        }
        let tied_sessions = sessions
            .iter()
            .enumerate()
            .filter(|(i, s)| {
                let prev = i.checked_sub(1).map(|j| sessions[j].timestamp == s.timestamp);
                let next = sessions.get(i + 1).map(|n| n.timestamp == s.timestamp);
                prev.unwrap_or(false) || next.unwrap_or(false)
            })
            .count();
        let mut by_user: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        let mut by_item: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, s) in sessions.iter().enumerate() {
            by_user.entry(s.user_id.clone()).or_default().push(i);
            by_item.entry(s.item_id.clone()).or_default().push(i);
        }
        Ok(Self { sessions, by_user, by_item, tied_sessions })
    }

    pub fn from_jsonl<R: BufRead>(reader: R) -> Result<Self, CorpusError> {
        let mut sessions = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line_no = i + 1;
            let line = line.map_err(|e| CorpusError::Parse { line: line_no, message: e.to_string() })?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: SessionRecord = serde_json::from_str(&line)
                .map_err(|e| CorpusError::Parse { line: line_no, message: e.to_string() })?;
            if rec.ts <= 0 {
                return Err(CorpusError::Invalid { line: line_no, reason: "timestamp must be positive".into() });
            }
            if rec.text.is_empty() {
                return Err(CorpusError::Invalid { line: line_no, reason: "text must be non-empty".into() });
            }
            sessions.push(Session {
                user_id: rec.user,
                item_id: rec.item,
                timestamp: rec.ts,
                text: rec.text,
                embedding_index: rec.emb,
            });
        }
        Self::from_sessions(sessions)
    }

    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        let file = File::open(path).map_err(|e| CorpusError::io(path, e))?;
        Self::from_jsonl(BufReader::new(file))
    }

    pub fn write_jsonl<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        for s in &self.sessions {
            let line = serde_json::to_string(&SessionRecord::from(s)).expect("session records serialize");
            writeln!(w, "{line}")?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), CorpusError> {
        let file = File::create(path).map_err(|e| CorpusError::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_jsonl(&mut w).map_err(|e| CorpusError::io(path, e))?;
        w.flush().map_err(|e| CorpusError::io(path, e))
    }

    /// Checks that every session's embedding reference resolves in `store`.
    pub fn check_embeddings(&self, store: &EmbeddingStore) -> Result<(), CorpusError> {
        for s in &self.sessions {
            if s.embedding_index >= store.len() {
                return Err(CorpusError::DanglingEmbedding {
                    user: s.user_id.clone(),
                    item: s.item_id.clone(),
                    index: s.embedding_index,
                    count: store.len(),
                });
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.sessions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sessions.is_empty()
    }

    pub fn session(&self, id: usize) -> &Session {
        &self.sessions[id]
    }

    pub fn sessions(&self) -> &[Session] {
        &self.sessions
    }

    pub fn users(&self) -> impl Iterator<Item = &str> {
        self.by_user.keys().map(String::as_str)
    }

    pub fn user_count(&self) -> usize {
        self.by_user.len()
    }

    pub fn items(&self) -> impl Iterator<Item = &str> {
        self.by_item.keys().map(String::as_str)
    }

    /// Session ids of `user` in chronological order.
    pub fn user_sessions(&self, user: &str) -> &[usize] {
        self.by_user.get(user).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Session ids for `item` in chronological order.
    pub fn item_sessions(&self, item: &str) -> &[usize] {
        self.by_item.get(item).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Number of `user` interactions with timestamp strictly before `time`.
    pub fn interactions_before(&self, user: &str, time: i64) -> usize {
        self.user_sessions(user).partition_point(|&i| self.sessions[i].timestamp < time)
    }

    /// Sessions sharing their timestamp with another session; these were
    /// ordered by the `(user_id, item_id)` tie-break.
    pub fn tied_sessions(&self) -> usize {
        self.tied_sessions
    }
}
