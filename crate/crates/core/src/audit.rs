//! Embedding access audit.
//!
//! When enabled, every embedding row read through [`crate::corpus::EmbeddingView`]
//! is recorded under the currently active pipeline stage. Leakage checks then
//! intersect the recorded rows with the rows owned by held-out sessions.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Mutex;

use serde::Serialize;

#[derive(Debug, Default)]
pub struct AccessAudit {
    touched: Mutex<BTreeMap<String, BTreeSet<usize>>>,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct StageAudit {
    pub stage: String,
    pub rows_touched: usize,
    pub forbidden_touched: Vec<usize>,
}

impl AccessAudit {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&self, stage: &str, row: usize) {
        let mut map = self.touched.lock().expect("audit lock poisoned");
        map.entry(stage.to_string()).or_default().insert(row);
    }

    pub fn touched(&self, stage: &str) -> BTreeSet<usize> {
        let map = self.touched.lock().expect("audit lock poisoned");
        map.get(stage).cloned().unwrap_or_default()
    }

    pub fn stages(&self) -> Vec<String> {
        let map = self.touched.lock().expect("audit lock poisoned");
        map.keys().cloned().collect()
    }

    /// Per-stage summary of accesses to `forbidden` rows.
    pub fn check(&self, forbidden: &BTreeSet<usize>) -> Vec<StageAudit> {
        let map = self.touched.lock().expect("audit lock poisoned");
        map.iter()
            .map(|(stage, rows)| StageAudit {
                stage: stage.clone(),
                rows_touched: rows.len(),
                forbidden_touched: rows.intersection(forbidden).copied().collect(),
            })
            .collect()
    }
}
