//! Token-level text metrics: n-gram copy rate and ROUGE-1 / ROUGE-L.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::BufRead;

use serde::{Deserialize, Serialize};

use super::DiagnosticsError;

/// Lowercase, split on whitespace, strip punctuation at token edges. Tokens
/// that are pure punctuation disappear.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|t| t.trim_matches(|c: char| c.is_ascii_punctuation() || is_unicode_punct(c)).to_lowercase())
        .filter(|t| !t.is_empty())
        .collect()
}

fn is_unicode_punct(c: char) -> bool {
    matches!(c, '\u{2018}'..='\u{201F}' | '\u{2026}' | '\u{00AB}' | '\u{00BB}' | '\u{2013}' | '\u{2014}')
}

fn ngrams(tokens: &[String], n: usize) -> impl Iterator<Item = &[String]> {
    tokens.windows(n)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CopyRate {
    /// Percentage in `[0, 100]`.
    pub rate: f64,
    pub copied: usize,
    pub total: usize,
    /// The generated text had fewer than `n` tokens; `rate` is 0.
    pub too_short: bool,
}

fn peer_ngrams(peer_texts: &[&str], n: usize) -> HashSet<Vec<String>> {
    if n == 0 {
        return HashSet::new();
    }
    peer_texts.iter().flat_map(|t| ngrams(&tokenize(t), n).map(|g| g.to_vec()).collect::<Vec<_>>()).collect()
}

fn count_copied(generated: &str, peers: &HashSet<Vec<String>>, n: usize) -> CopyRate {
    let tokens = tokenize(generated);
    if n == 0 || tokens.len() < n {
        return CopyRate { rate: 0.0, copied: 0, total: 0, too_short: true };
    }
    let total = tokens.len() + 1 - n;
    let copied = ngrams(&tokens, n).filter(|g| peers.contains(*g)).count();
    CopyRate { rate: 100.0 * copied as f64 / total as f64, copied, total, too_short: false }
}

/// Percentage of the generated text's n-grams (with multiplicity) found in any peer text.
pub fn ngram_copy_rate(generated: &str, peer_texts: &[&str], n: usize) -> CopyRate {
    let set = peer_ngrams(peer_texts, n);
    count_copied(generated, &set, n)
}

/// Corpus-pooled copy rate over `(generated, peer texts)` cases, with the
/// per-generation rates alongside.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PooledCopyRate {
    pub pooled: CopyRate,
    pub per_generation: Vec<CopyRate>,
    pub mean_per_generation: f64,
}

pub fn pooled_copy_rate(cases: &[(String, Vec<String>)], n: usize) -> PooledCopyRate {
    let per_generation: Vec<CopyRate> = cases
        .iter()
        .map(|(g, peers)| {
            let refs: Vec<&str> = peers.iter().map(String::as_str).collect();
            ngram_copy_rate(g, &refs, n)
        })
        .collect();
    let copied: usize = per_generation.iter().map(|c| c.copied).sum();
    let total: usize = per_generation.iter().map(|c| c.total).sum();
    let scored: Vec<&CopyRate> = per_generation.iter().filter(|c| !c.too_short).collect();
    let mean_per_generation = if scored.is_empty() { 0.0 } else { scored.iter().map(|c| c.rate).sum::<f64>() / scored.len() as f64 };
    let pooled = CopyRate {
        rate: if total == 0 { 0.0 } else { 100.0 * copied as f64 / total as f64 },
        copied,
        total,
        too_short: total == 0,
    };
    PooledCopyRate { pooled, per_generation, mean_per_generation }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RougeScores {
    pub r1_f: f64,
    pub rl_f: f64,
}

fn f1(overlap: usize, cand: usize, refr: usize) -> f64 {
    if overlap == 0 || cand == 0 || refr == 0 {
        return 0.0;
    }
    let p = overlap as f64 / cand as f64;
    let r = overlap as f64 / refr as f64;
    2.0 * p * r / (p + r)
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn rouge(candidate: &str, reference: &str) -> RougeScores {
    let c = tokenize(candidate);
    let r = tokenize(reference);
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in &r {
        *counts.entry(t.as_str()).or_default() += 1;
    }
    let mut overlap = 0;
    for t in &c {
        if let Some(n) = counts.get_mut(t.as_str()) {
            if *n > 0 {
                *n -= 1;
                overlap += 1;
            }
        }
    }
    RougeScores { r1_f: f1(overlap, c.len(), r.len()), rl_f: f1(lcs_len(&c, &r), c.len(), r.len()) }
}

/// One line of a candidate or reference file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextRecord {
    pub id: String,
    pub text: String,
}

pub fn read_text_records<R: BufRead>(reader: R) -> Result<Vec<TextRecord>, DiagnosticsError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| DiagnosticsError::Input(format!("line {}: {e}", i + 1)))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TextRecord = serde_json::from_str(&line).map_err(|e| DiagnosticsError::Input(format!("line {}: {e}", i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RougeSummary {
    pub pairs: usize,
    pub mean_r1_f: f64,
    pub mean_rl_f: f64,
    pub per_id: BTreeMap<String, RougeScores>,
}

/// Scores candidates against references by id. Every candidate needs a
/// reference; ids must be unique on both sides.
pub fn score_records(candidates: &[TextRecord], references: &[TextRecord]) -> Result<RougeSummary, DiagnosticsError> {
    let mut refs: BTreeMap<&str, &str> = BTreeMap::new();
    for r in references {
        if refs.insert(&r.id, &r.text).is_some() {
            return Err(DiagnosticsError::Input(format!("duplicate reference id {}", r.id)));
        }
    }
    let mut per_id = BTreeMap::new();
    for c in candidates {
        let reference = refs.get(c.id.as_str()).ok_or_else(|| DiagnosticsError::Input(format!("no reference for id {}", c.id)))?;
        if per_id.insert(c.id.clone(), rouge(&c.text, reference)).is_some() {
            return Err(DiagnosticsError::Input(format!("duplicate candidate id {}", c.id)));
        }
    }
    if per_id.is_empty() {
        return Err(DiagnosticsError::Empty("candidates"));
    }
    let n = per_id.len() as f64;
    let mean_r1_f = per_id.values().map(|s: &RougeScores| s.r1_f).sum::<f64>() / n;
    let mean_rl_f = per_id.values().map(|s: &RougeScores| s.rl_f).sum::<f64>() / n;
    Ok(RougeSummary { pairs: per_id.len(), mean_r1_f, mean_rl_f, per_id })
}
