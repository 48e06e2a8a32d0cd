//! Session and embedding ingestion, eligibility filters, chronological
//! splits, and time-masked same-item peer queries.

mod embeddings;
mod filters;
mod peers;
mod sessions;
mod split;

use std::io;
use std::path::Path;

use thiserror::Error;

use crate::format::FormatError;

pub use embeddings::{EmbeddingStore, EmbeddingView, EMBEDDING_MAGIC, EMBEDDING_VERSION, UNIT_NORM_TOLERANCE};
pub use filters::{apply_filters, FilterConfig, FilterReport};
pub use peers::{count_eligible_peers, query_peers, OverflowRule, Peer, PeerIndex, PeerQuery, PeerSet, TimeMask};
pub use sessions::{Session, SessionRecord, SessionStore};
pub use split::{chronological_split, ExclusionReason, RollingPair, SplitAssignment, SplitConfig, UserSplit};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("parse error on line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid session on line {line}: {reason}")]
    Invalid { line: usize, reason: String },
    #[error("duplicate (user, item, timestamp) sessions: {}", .0.join(", "))]
    Duplicates(Vec<String>),
    #[error("embedding dimension mismatch: expected {expected}, found {found}")]
    Dimension { expected: usize, found: usize },
    #[error("embedding row {row} failed validation: {reason}")]
    Validation { row: usize, reason: String },
    #[error("session ({user}, {item}) references embedding {index} but the store has {count} rows")]
    DanglingEmbedding { user: String, item: String, index: usize, count: usize },
    #[error(transparent)]
    Format(#[from] FormatError),
}

impl CorpusError {
    pub(crate) fn io(path: &Path, source: io::Error) -> Self {
        Self::Io { path: path.display().to_string(), source }
    }
}

/// Reads the sessions file.
pub fn load_sessions(path: &Path) -> Result<SessionStore, CorpusError> {
    SessionStore::load(path)
}

/// Reads and validates the embeddings file.
pub fn load_embeddings(path: &Path, expected_dim: usize) -> Result<EmbeddingStore, CorpusError> {
    EmbeddingStore::load(path, expected_dim)
}
