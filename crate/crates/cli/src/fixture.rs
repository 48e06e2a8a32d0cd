//! The shipped demo fixture: a synthetic corpus small enough to run every
//! stage in well under a minute, with item metadata and a candidate/reference
//! text pair per user for the text diagnostics.

use std::io::Write;
use std::path::Path;

use latte_core::corpus::{apply_filters, chronological_split, FilterConfig, PeerIndex, SplitConfig};
use latte_core::driftlab::{gen_additive, SyntheticCorpusConfig};
use latte_core::pipeline::write_items;

pub fn demo_corpus_config() -> SyntheticCorpusConfig {
    SyntheticCorpusConfig { dim: 64, items: 24, background_users: 12, users: 80, sessions_per_user: 14, planted_future_peers: 1, seed: 7, ..SyntheticCorpusConfig::default() }
}

/// Run config for the fixture. Model widths are reduced from the defaults so
/// the bridge bottleneck fits under the 64-dim states.
pub fn demo_run_config() -> serde_json::Value {
    serde_json::json!({
        "output_dir": "out",
        "data": {
            "sessions": "sessions.jsonl",
            "embeddings": "embeddings.bin",
            "items": "items.jsonl"
        },
        "predictor": { "arch": "P4", "hidden_size": 128, "attention_size": 64 },
        "bridge": { "input": "P4", "bottleneck": 32, "projector_hidden": 128, "token_dim": 256 },
        "diagnostics": {
            "predictions": "P4",
            "collapse_users": 60,
            "candidates": "candidates.jsonl",
            "references": "references.jsonl"
        }
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    std::fs::write(path, bytes).map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

pub fn write_demo_fixture(dir: &Path) -> Result<(), Box<dyn std::error::Error>> {
    std::fs::create_dir_all(dir)?;
    let cfg = demo_corpus_config();
    let corpus = gen_additive(&cfg)?;
    let store = &corpus.sessions;
    store.save(&dir.join("sessions.jsonl"))?;
    corpus.embeddings.as_ref().expect("fixture embeddings are unit-normalized").save(&dir.join("embeddings.bin"))?;

    let items: Vec<(String, String, String)> = store
        .items()
        .map(|item| (item.to_string(), format!("Catalog entry {item}"), format!("A synthetic product listed as {item} in the demo catalog.")))
        .collect();
    let mut out = Vec::new();
    write_items(&mut out, &items)?;
    write_file(&dir.join("items.jsonl"), &out)?;

    // the candidate for each split user repeats their validation review
    let index = PeerIndex::build(store);
    let filters = apply_filters(store, &index, &FilterConfig::default());
    let split = chronological_split(store, &SplitConfig::default(), Some(&filters));
    let mut candidates = Vec::new();
    let mut references = Vec::new();
    for (user, us) in &split.users {
        let line = |sid: usize| serde_json::json!({ "id": user, "text": store.session(sid).text }).to_string();
        writeln!(candidates, "{}", line(us.val))?;
        writeln!(references, "{}", line(us.test))?;
    }
    write_file(&dir.join("candidates.jsonl"), &candidates)?;
    write_file(&dir.join("references.jsonl"), &references)?;

    let mut config = serde_json::to_vec_pretty(&demo_run_config())?;
    config.push(b'\n');
    write_file(&dir.join("config.json"), &config)?;
    Ok(())
}
