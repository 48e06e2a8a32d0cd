//! Synthetic corpora drawn from the additive response model
//! `x = c_item + s_user,t + noise`, written in the corpus formats.
//!
//! Background users review every item early so that later target users
//! always find enough time-valid peers. Optional planted users review a
//! target user's final item just after it, copying that user's text.

use std::io::Write;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::trajectories::{latent_states, StateProcess};
use super::DriftError;
use crate::corpus::{CorpusError, EmbeddingStore, Session, SessionStore};
use crate::linalg;
use crate::rng::{self, StreamRng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticCorpusConfig {
    pub dim: usize,
    pub items: usize,
    pub background_users: usize,
    pub users: usize,
    pub sessions_per_user: usize,
    /// Per-coordinate variance of the item component.
    pub item_scale: f64,
    /// Per-coordinate deviation of user and background states.
    pub state_std: f64,
    /// Per-coordinate noise variance.
    pub noise_var: f64,
    pub process: StateProcess,
    /// Store unit-normalized embeddings (required by the corpus format).
    pub unit_normalize: bool,
    pub words_per_text: usize,
    /// Planted users per target user who copy its final review.
    pub planted_future_peers: usize,
    pub planted_noise_std: f64,
    pub start_ts: i64,
    pub spacing: i64,
    pub seed: u64,
}

impl Default for SyntheticCorpusConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            items: 24,
            background_users: 12,
            users: 60,
            sessions_per_user: 14,
            item_scale: 1.0,
            state_std: 1.0,
            noise_var: 0.1,
            process: StateProcess::default(),
            unit_normalize: true,
            words_per_text: 24,
            planted_future_peers: 0,
            planted_noise_std: 0.05,
            start_ts: 1_600_000_000,
            spacing: 3600,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionRole {
    Background,
    Target,
    PlantedWarmup,
    Planted,
}

/// Ground truth behind one session's embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentRecord {
    pub user: String,
    pub item: String,
    pub ts: i64,
    pub emb: usize,
    pub role: SessionRole,
    pub state: Vec<f64>,
    pub item_component: Vec<f64>,
    pub noise: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub sessions: SessionStore,
    /// Embeddings before any normalization, indexed like the store rows.
    pub raw_embeddings: Vec<Vec<f64>>,
    /// Present when `unit_normalize` is set.
    pub embeddings: Option<EmbeddingStore>,
    pub latents: Vec<LatentRecord>,
}

impl SyntheticCorpus {
    /// Writes `sessions.jsonl`, `embeddings.bin` (if normalized) and `latents.jsonl`.
    pub fn write(&self, dir: &Path) -> Result<(), CorpusError> {
        std::fs::create_dir_all(dir).map_err(|e| CorpusError::io(dir, e))?;
        self.sessions.save(&dir.join("sessions.jsonl"))?;
        if let Some(e) = &self.embeddings {
            e.save(&dir.join("embeddings.bin"))?;
        }
        let path = dir.join("latents.jsonl");
        let mut out = Vec::new();
        for l in &self.latents {
            serde_json::to_writer(&mut out, l).expect("latents serialize");
            out.push(b'\n');
        }
        let mut f = std::fs::File::create(&path).map_err(|e| CorpusError::io(&path, e))?;
        f.write_all(&out).map_err(|e| CorpusError::io(&path, e))
    }
}

const SYLLABLES: [&str; 24] = [
    "ka", "lo", "mi", "ser", "tu", "ven", "ra", "pol", "di", "nex", "ba", "ori", "shi", "gal", "te", "mun", "fa", "qui", "zo", "len", "pa", "dri",
    "hu", "cor",
];

fn word(index: usize) -> String {
    let n = SYLLABLES.len();
    let mut w = String::new();
    let mut i = index;
    for _ in 0..3 {
        w.push_str(SYLLABLES[i % n]);
        i /= n;
    }
    w
}

struct Vocab {
    general: Vec<String>,
    items: Vec<Vec<String>>,
}

impl Vocab {
    fn new(items: usize) -> Self {
        let general = (0..200).map(word).collect();
        let items = (0..items).map(|j| (0..40).map(|k| word(200 + j * 40 + k)).collect()).collect();
        Self { general, items }
    }

    fn user_words(user: usize) -> Vec<String> {
        (0..40).map(|k| word(5000 + user * 40 + k)).collect()
    }

    fn text(&self, item: usize, user_words: &[String], n: usize, rng: &mut StreamRng) -> String {
        let mut words: Vec<&String> = Vec::with_capacity(n);
        for k in 0..n {
            let pool = match k % 3 {
                0 => &self.items[item],
                1 => user_words,
                _ => &self.general,
            };
            words.push(pool.choose(rng).expect("non-empty pool"));
        }
        words.shuffle(rng);
        let mut s = words.iter().map(|w| w.as_str()).collect::<Vec<_>>().join(" ");
        s.push('.');
        s
    }
}

struct Builder<'a> {
    cfg: &'a SyntheticCorpusConfig,
    sessions: Vec<Session>,
    raw: Vec<Vec<f64>>,
    latents: Vec<LatentRecord>,
}

impl Builder<'_> {
    #[allow(clippy::too_many_arguments)]
    fn push(&mut self, user: String, item: usize, ts: i64, text: String, role: SessionRole, state: &[f64], item_component: &[f64], noise: Vec<f64>) {
        let raw: Vec<f64> = (0..self.cfg.dim).map(|k| item_component[k] + state[k] + noise[k]).collect();
        let emb = self.raw.len();
        let item_id = format!("item{item:03}");
        self.sessions.push(Session { user_id: user.clone(), item_id: item_id.clone(), timestamp: ts, text, embedding_index: emb });
        self.latents.push(LatentRecord { user, item: item_id, ts, emb, role, state: state.to_vec(), item_component: item_component.to_vec(), noise });
        self.raw.push(raw);
    }
}

fn validate(cfg: &SyntheticCorpusConfig) -> Result<(), DriftError> {
    let bad = |reason: &str| Err(DriftError::Config(reason.to_string()));
    if cfg.dim == 0 || cfg.items == 0 || cfg.sessions_per_user == 0 {
        return bad("dim, items and sessions_per_user must be positive");
    }
    if cfg.item_scale < 0.0 || cfg.noise_var < 0.0 || cfg.state_std < 0.0 || cfg.planted_noise_std < 0.0 {
        return bad("variances must be non-negative");
    }
    if cfg.start_ts <= 0 || cfg.spacing <= cfg.planted_future_peers as i64 + 1 {
        return bad("start_ts must be positive and spacing must exceed the planted offsets");
    }
    Ok(())
}

pub fn gen_additive(cfg: &SyntheticCorpusConfig) -> Result<SyntheticCorpus, DriftError> {
    validate(cfg)?;
    let d = cfg.dim;
    let vocab = Vocab::new(cfg.items);
    let mut setup = rng::labeled(cfg.seed, b"corpus-setup", 0);
    let item_components: Vec<Vec<f64>> = (0..cfg.items).map(|_| rng::gaussian_vec(&mut setup, d, cfg.item_scale.sqrt())).collect();
    let noise_std = cfg.noise_var.sqrt();
    let mut b = Builder { cfg, sessions: Vec::new(), raw: Vec::new(), latents: Vec::new() };

    // background users: fixed states, every item once, in a private order
    let bg = cfg.background_users;
    for u in 0..bg {
        let mut r = rng::labeled(cfg.seed, b"background-user", u as u64);
        let state = rng::gaussian_vec(&mut r, d, cfg.state_std);
        let words = Vocab::user_words(u);
        let mut order: Vec<usize> = (0..cfg.items).collect();
        order.shuffle(&mut r);
        for (round, &item) in order.iter().enumerate() {
            let ts = cfg.start_ts + ((round * bg + u) as i64) * cfg.spacing;
            let text = vocab.text(item, &words, cfg.words_per_text, &mut r);
            let noise = rng::gaussian_vec(&mut r, d, noise_std);
            b.push(format!("bg{u:03}"), item, ts, text, SessionRole::Background, &state, &item_components[item], noise);
        }
    }

    let targets_start = cfg.start_ts + ((cfg.items * bg.max(1)) as i64 + 1) * cfg.spacing;
    let mut finals = Vec::new();
    for u in 0..cfg.users {
        let mut r = rng::labeled(cfg.seed, b"target-user", u as u64);
        let states = latent_states(cfg.process, d, cfg.sessions_per_user, cfg.state_std, &mut r);
        let words = Vocab::user_words(bg + u);
        for (t, state) in states.iter().enumerate() {
            let ts = targets_start + ((t * cfg.users + u) as i64) * cfg.spacing;
            let item = r.random_range(0..cfg.items);
            let text = vocab.text(item, &words, cfg.words_per_text, &mut r);
            let noise = rng::gaussian_vec(&mut r, d, noise_std);
            b.push(format!("user{u:03}"), item, ts, text.clone(), SessionRole::Target, state, &item_components[item], noise);
            if t + 1 == cfg.sessions_per_user {
                finals.push((u, item, ts, text, b.raw.len() - 1));
            }
        }
    }

    for (u, item, ts, text, emb) in finals {
        for k in 0..cfg.planted_future_peers {
            let mut r = rng::labeled(cfg.seed, b"planted-user", (u * cfg.planted_future_peers + k) as u64);
            let name = format!("planted{u:03}x{k}");
            let words = Vocab::user_words(bg + cfg.users + u * cfg.planted_future_peers + k);
            let state = rng::gaussian_vec(&mut r, d, cfg.state_std);
            for w in 0..4 {
                let warm_item = r.random_range(0..cfg.items);
                // offsets inside the background window never collide with its spacing grid
                let warm_ts = cfg.start_ts + (w as i64) * cfg.spacing + 1 + (u * cfg.planted_future_peers + k) as i64 % (cfg.spacing - 1);
                let warm_text = vocab.text(warm_item, &words, cfg.words_per_text, &mut r);
                let noise = rng::gaussian_vec(&mut r, d, noise_std);
                b.push(name.clone(), warm_item, warm_ts, warm_text, SessionRole::PlantedWarmup, &state, &item_components[warm_item], noise);
            }
            // a near copy of the target response, one to a few seconds later
            let copy_noise = rng::gaussian_vec(&mut r, d, cfg.planted_noise_std);
            let target_raw = b.raw[emb].clone();
            let copy_state = linalg::sub(&linalg::add(&target_raw, &copy_noise), &item_components[item]);
            b.push(name, item, ts + 1 + k as i64, text.clone(), SessionRole::Planted, &copy_state, &item_components[item], vec![0.0; d]);
        }
    }

    let embeddings = if cfg.unit_normalize {
        let unit: Vec<Vec<f64>> = b
            .raw
            .iter()
            .map(|x| {
                linalg::normalized(x, 1e-12).ok_or_else(|| DriftError::Config("zero embedding cannot be normalized".into()))
            })
            .collect::<Result<_, _>>()?;
        Some(EmbeddingStore::from_vectors(d, &unit)?)
    } else {
        None
    };
    let sessions = SessionStore::from_sessions(b.sessions)?;
    Ok(SyntheticCorpus { sessions, raw_embeddings: b.raw, embeddings, latents: b.latents })
}
