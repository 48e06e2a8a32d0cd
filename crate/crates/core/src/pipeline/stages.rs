use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{ForecastMode, ProviderKind};
use super::{PipelineError, Stage, StageOutcome, StageWriter, Workspace};
use crate::anchor::{build_trajectory, read_trajectories, write_trajectories, AnchorContext, PeerSource, RelativeState, TimeMaskedPeers, Trajectory};
use crate::audit::AccessAudit;
use crate::bridge::{self as bridge_mod, assemble_prompt, write_bundle, BridgeModel, CosineAlignment, InjectionBundle, LossProvider, QuadraticAlignment};
use crate::corpus::{apply_filters, chronological_split, EmbeddingStore, EmbeddingView, PeerIndex, SessionStore, SplitAssignment};
use crate::diagnostics::{self, pooled_copy_rate, read_text_records, score_records, DiagnosticsInputs};
use crate::driftlab::{crossover_sweep, monte_carlo_mse, verify_anchoring, Estimator, OracleReport};
use crate::forecast::{self, Arch, ForecastError, PredictorModel, TrainingPair, MIN_PREFIX_STATES};
use crate::linalg;
use crate::rng;

fn input_err(e: impl std::fmt::Display) -> PipelineError {
    PipelineError::Input(e.to_string())
}

fn internal(e: impl std::fmt::Display) -> PipelineError {
    PipelineError::Internal(e.to_string())
}

/// Which held-out slot a forecast targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    /// The session before validation; bridge training input.
    Bridge,
    Val,
    Test,
}

impl TargetKind {
    const ALL: [TargetKind; 3] = [TargetKind::Bridge, TargetKind::Val, TargetKind::Test];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForecastRecord {
    pub user: String,
    pub target: TargetKind,
    pub session: usize,
    pub mode: ForecastMode,
    pub vector: Vec<f64>,
    /// Cosine to the true state, or to the raw response embedding for
    /// embedding-space profiles.
    pub cosine: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruthRecord {
    pub user: String,
    pub target: TargetKind,
    pub session: usize,
    pub state: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ModeSummary {
    pub n: usize,
    pub mean_cosine: f64,
    pub skipped: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ForecastSummary {
    pub users: usize,
    /// Held-out slots whose true state could not be built.
    pub missing_truth: BTreeMap<TargetKind, usize>,
    pub modes: BTreeMap<String, BTreeMap<TargetKind, ModeSummary>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulateReport {
    pub anchoring: OracleReport,
    pub mse: Vec<OracleReport>,
    pub crossover_agreement: f64,
    pub crossover_cells: usize,
    pub passed: bool,
}

/// Crossover cells whose empirical winner must match the analytic one.
pub const CROSSOVER_AGREEMENT: f64 = 0.95;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ItemRecord {
    item: String,
    title: String,
    description: String,
}

#[derive(Debug, Clone, Serialize)]
struct IngestSummary {
    sessions: usize,
    users: usize,
    items: usize,
    embedding_rows: usize,
    dim: usize,
    tied_sessions: usize,
    users_retained: usize,
    retention: f64,
    split_users: usize,
    target_instances: usize,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct StatesSummary {
    users: usize,
    states: usize,
    skipped_no_peers: usize,
    skipped_degenerate: usize,
    time_mask_violations: usize,
    mean_peer_count: f64,
    forbidden_reads: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PredictorSummary {
    arch: Arch,
    dim: usize,
    train_pairs: usize,
    val_pairs: usize,
    best_val_cosine: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct BridgeSummary {
    input: ForecastMode,
    state_dim: usize,
    train: usize,
    val: usize,
    params: usize,
    best_val_loss: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct EmitIndexRecord {
    user: String,
    item: String,
    session: usize,
    header: String,
}

pub(crate) fn steps(stage: Stage, config: &super::RunConfig) -> Vec<String> {
    let modes: Vec<String> = config.forecast.modes.iter().map(|m| m.name()).collect();
    match stage {
        Stage::Ingest => vec![
            "load and validate sessions and embeddings".into(),
            "apply eligibility filters, assign chronological splits".into(),
            "write sessions.jsonl, split.json, filters.json, summary.json".into(),
        ],
        Stage::BuildStates => vec![
            format!("anchor every split user's non-held-out sessions (m={}, gamma={})", config.anchor.m, config.anchor.gamma),
            format!("write trajectories.trj, summary.json{}", if config.audit { ", audit.json" } else { "" }),
        ],
        Stage::TrainPredictor => vec![
            format!("assemble rolling pairs; train {} for {} epochs", config.predictor.arch.tag(), config.predictor.epochs),
            "write model.ltm, model.ltm.log.json, summary.json".into(),
        ],
        Stage::Forecast => vec![
            "build held-out validation and test states".into(),
            format!("forecast modes: {}", modes.join(", ")),
            "write forecasts.jsonl, truth.jsonl, summary.json".into(),
        ],
        Stage::TrainBridge => vec![
            format!("train bridge on {} forecasts for {} epochs", config.bridge.input, config.bridge.epochs),
            "write model.ltm, model.ltm.log.json, summary.json".into(),
        ],
        Stage::Emit => vec![format!("one injection bundle per user from the test {} forecast", config.bridge.input), "write index.jsonl".into()],
        Stage::Diagnose => {
            let mut s = vec!["effective rank, same-item and adjacent cosine, collapse check".into(), "write report.json, report.txt".into()];
            if config.diagnostics.candidates.is_some() {
                s.push("score candidate texts: rouge.json, copy.json".into());
            }
            s
        }
        Stage::Simulate => vec![
            "anchoring oracle".into(),
            "Monte Carlo MSE of static, last-state and OLS estimators".into(),
            "crossover sweep".into(),
            "write report.json, crossover.csv".into(),
        ],
    }
}

fn load_store(ws: &Workspace<'_>) -> Result<SessionStore, PipelineError> {
    SessionStore::load(&ws.artifact(Stage::Ingest, "sessions.jsonl")).map_err(internal)
}

fn load_embeddings(ws: &Workspace<'_>) -> Result<EmbeddingStore, PipelineError> {
    EmbeddingStore::load_any(&ws.config.data()?.embeddings).map_err(input_err)
}

fn load_split(ws: &Workspace<'_>) -> Result<SplitAssignment, PipelineError> {
    let text = std::fs::read_to_string(ws.artifact(Stage::Ingest, "split.json")).map_err(|e| PipelineError::io(&ws.artifact(Stage::Ingest, "split.json"), e))?;
    SplitAssignment::from_json(&text).map_err(internal)
}

fn load_trajectories(ws: &Workspace<'_>) -> Result<(usize, BTreeMap<String, Trajectory>), PipelineError> {
    let path = ws.artifact(Stage::BuildStates, "trajectories.trj");
    let file = File::open(&path).map_err(|e| PipelineError::io(&path, e))?;
    let (dim, trajs) = read_trajectories(&mut BufReader::new(file)).map_err(internal)?;
    Ok((dim, trajs.into_iter().map(|t| (t.user_id.clone(), t)).collect()))
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &std::path::Path) -> Result<Vec<T>, PipelineError> {
    let file = File::open(path).map_err(|e| PipelineError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| PipelineError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| PipelineError::Input(format!("{} line {}: {e}", path.display(), i + 1)))?);
    }
    Ok(out)
}

fn to_jsonl<T: Serialize>(records: &[T]) -> Vec<u8> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r).expect("record serializes");
        out.push(b'\n');
    }
    out
}

fn load_items(ws: &Workspace<'_>) -> Result<BTreeMap<String, ItemRecord>, PipelineError> {
    let Some(path) = &ws.config.data()?.items else {
        return Ok(BTreeMap::new());
    };
    let mut items = BTreeMap::new();
    for rec in read_jsonl::<ItemRecord>(path)? {
        if items.contains_key(&rec.item) {
            return Err(PipelineError::Input(format!("{}: duplicate item {}", path.display(), rec.item)));
        }
        items.insert(rec.item.clone(), rec);
    }
    Ok(items)
}

pub(crate) fn ingest(ws: &Workspace<'_>) -> Result<StageOutcome, PipelineError> {
    let config = ws.config;
    let data = config.data()?;
    let store = SessionStore::load(&data.sessions).map_err(input_err)?;
    let embeddings = EmbeddingStore::load_any(&data.embeddings).map_err(input_err)?;
    store.check_embeddings(&embeddings).map_err(input_err)?;
    load_items(ws)?;

    let index = PeerIndex::build(&store);
    let filters = apply_filters(&store, &index, &config.filters);
    let split = chronological_split(&store, &config.split, Some(&filters));
    if split.users.is_empty() {
        return Err(PipelineError::Input(format!(
            "no user passes the filters and has {} sessions; nothing to train on",
            config.split.min_sessions
        )));
    }

    let mut w = StageWriter::new(ws, Stage::Ingest)?;
    w.input("sessions", ws.hashed_input(&data.sessions)?);
    w.input("embeddings", ws.hashed_input(&data.embeddings)?);
    if let Some(items) = &data.items {
        w.input("items", ws.hashed_input(items)?);
    }
    let mut sessions = Vec::new();
    store.write_jsonl(&mut sessions).map_err(internal)?;
    w.write("sessions.jsonl", &sessions)?;
    w.write("split.json", split.to_json().as_bytes())?;
    w.write_json("filters.json", &filters)?;
    let summary = IngestSummary {
        sessions: store.len(),
        users: store.user_count(),
        items: store.items().count(),
        embedding_rows: embeddings.len(),
        dim: embeddings.dim(),
        tied_sessions: store.tied_sessions(),
        users_retained: filters.retained.len(),
        retention: filters.retention(),
        split_users: split.users.len(),
        target_instances: split.target_instances(),
    };
    w.write_json("summary.json", &summary)?;
    let line = format!(
        "ingest: {} sessions, {} users, {} items, dim {}; {} users retained, {} split users, {} target instances",
        summary.sessions, summary.users, summary.items, summary.dim, summary.users_retained, summary.split_users, summary.target_instances
    );
    w.finish(ws, line)
}

pub(crate) fn build_states(ws: &Workspace<'_>) -> Result<StageOutcome, PipelineError> {
    let config = ws.config;
    let store = load_store(ws)?;
    let embeddings = load_embeddings(ws)?;
    let split = load_split(ws)?;
    let held = split.held_out_sessions();
    let index = PeerIndex::build_excluding(&store, &held);
    let audit = AccessAudit::new();
    let view = if config.audit { EmbeddingView::audited(&embeddings, &audit, "build-states") } else { EmbeddingView::new(&embeddings) };
    let ctx = AnchorContext::new(&store, view, &index, config.anchor);

    let users: Vec<&String> = split.users.keys().collect();
    let builds: Vec<_> = users
        .par_iter()
        .map(|user| {
            let sessions: Vec<usize> = store.user_sessions(user).iter().copied().filter(|s| !held.contains(s)).collect();
            build_trajectory(&ctx, user, &sessions, &TimeMaskedPeers)
        })
        .collect();

    let mut summary = StatesSummary { users: builds.len(), ..StatesSummary::default() };
    let mut peer_total = 0;
    for b in &builds {
        summary.states += b.trajectory.len();
        summary.skipped_no_peers += b.skipped_no_peers;
        summary.skipped_degenerate += b.skipped_degenerate;
        summary.time_mask_violations += b.time_mask_violations;
        peer_total += b.peer_counts.iter().sum::<usize>();
    }
    summary.mean_peer_count = if summary.states == 0 { 0.0 } else { peer_total as f64 / summary.states as f64 };

    let mut w = StageWriter::new(ws, Stage::BuildStates)?;
    w.input("sessions", ws.hashed_input(&ws.artifact(Stage::Ingest, "sessions.jsonl"))?);
    w.input("split", ws.hashed_input(&ws.artifact(Stage::Ingest, "split.json"))?);
    let trajectories: Vec<Trajectory> = builds.into_iter().map(|b| b.trajectory).collect();
    let mut bytes = Vec::new();
    write_trajectories(&mut bytes, embeddings.dim(), &trajectories).map_err(internal)?;
    w.write("trajectories.trj", &bytes)?;
    if config.audit {
        let checks = audit.check(&split.held_out_rows(&store));
        summary.forbidden_reads = checks.iter().map(|c| c.forbidden_touched.len()).sum();
        w.write_json("audit.json", &checks)?;
    }
    w.write_json("summary.json", &summary)?;
    if summary.forbidden_reads > 0 {
        return Err(PipelineError::Internal(format!("state construction read {} held-out embedding rows", summary.forbidden_reads)));
    }
    let line = format!(
        "build-states: {} states for {} users; skipped {} without peers, {} degenerate; {} future reads",
        summary.states, summary.users, summary.skipped_no_peers, summary.skipped_degenerate, summary.time_mask_violations
    );
    w.finish(ws, line)
}

fn state_at(traj: &Trajectory, session: usize) -> Option<&RelativeState> {
    traj.states.iter().find(|s| s.session == session)
}

fn vectors(states: &[RelativeState]) -> Vec<Vec<f64>> {
    states.iter().map(|s| s.vector.clone()).collect()
}

pub(crate) fn train_predictor(ws: &Workspace<'_>) -> Result<StageOutcome, PipelineError> {
    let config = ws.config;
    let split = load_split(ws)?;
    let (dim, trajs) = load_trajectories(ws)?;
    let min_prefix = split.config.min_prefix_states.max(MIN_PREFIX_STATES);
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (user, us) in &split.users {
        let Some(traj) = trajs.get(user) else { continue };
        for pair in &us.predictor_pairs {
            let prefix = traj.prefix_before(pair.target);
            let Some(target) = state_at(traj, pair.target) else { continue };
            if prefix.len() < min_prefix {
                continue;
            }
            let example = TrainingPair { prefix: vectors(prefix), target: target.vector.clone() };
            if pair.target == us.bridge_train {
                val.push(example);
            } else {
                train.push(example);
            }
        }
    }
    let arch = config.predictor.arch;
    let hyper = config.predictor.hyper();
    let model = if arch.is_learned() {
        if train.is_empty() {
            return Err(PipelineError::Input("no rolling training pairs with enough states".into()));
        }
        forecast::train_predictor(&train, &val, arch, &hyper).map_err(internal)?
    } else {
        PredictorModel::init(arch, dim, hyper)
    };

    let mut w = StageWriter::new(ws, Stage::TrainPredictor)?;
    w.input("trajectories", ws.hashed_input(&ws.artifact(Stage::BuildStates, "trajectories.trj"))?);
    w.input("split", ws.hashed_input(&ws.artifact(Stage::Ingest, "split.json"))?);
    model.save(&w.path("model.ltm")).map_err(internal)?;
    w.adopt("model.ltm")?;
    w.adopt("model.ltm.log.json")?;
    let best_val_cosine = model.training_log.iter().find(|l| l.best).and_then(|l| l.val_cosine);
    let summary = PredictorSummary { arch, dim, train_pairs: train.len(), val_pairs: val.len(), best_val_cosine };
    w.write_json("summary.json", &summary)?;
    let line = format!(
        "train-predictor: {} on {} pairs ({} validation){}",
        arch.tag(),
        summary.train_pairs,
        summary.val_pairs,
        best_val_cosine.map(|c| format!(", best validation cosine {c:.4}")).unwrap_or_default()
    );
    w.finish(ws, line)
}

fn state_forecast(mode: ForecastMode, prefix: &[Vec<f64>], truth: &[f64], model: Option<&PredictorModel>, ema_beta: f64) -> Result<Vec<f64>, ForecastError> {
    let result = match mode {
        ForecastMode::Oracle => return Ok(truth.to_vec()),
        ForecastMode::Dep => return forecast::dep_style_profile(prefix),
        ForecastMode::Predictor(Arch::Last) => forecast::predict_last(prefix)?,
        ForecastMode::Predictor(Arch::Trend) => forecast::predict_linear_trend(prefix)?,
        ForecastMode::Predictor(Arch::Ema) => forecast::predict_ema(prefix, ema_beta)?,
        ForecastMode::Predictor(Arch::Ols) => forecast::predict_ols(prefix)?,
        ForecastMode::Predictor(arch) => {
            let model = model.ok_or(ForecastError::NotLearned(arch))?;
            model.predict(prefix)?
        }
        ForecastMode::Static | ForecastMode::Recent | ForecastMode::Decayed => unreachable!("embedding-space modes are handled separately"),
    };
    result.normalized.ok_or(ForecastError::Degenerate)
}

pub(crate) fn forecast(ws: &Workspace<'_>) -> Result<StageOutcome, PipelineError> {
    let config = ws.config;
    let fc = &config.forecast;
    let store = load_store(ws)?;
    let embeddings = load_embeddings(ws)?;
    let split = load_split(ws)?;
    let (_, trajs) = load_trajectories(ws)?;
    let needs_model = fc.modes.iter().any(|m| matches!(m, ForecastMode::Predictor(a) if a.is_learned()));
    let model = if needs_model { Some(PredictorModel::load(&ws.artifact(Stage::TrainPredictor, "model.ltm")).map_err(internal)?) } else { None };

    let held = split.held_out_sessions();
    let index = PeerIndex::build_excluding(&store, &held);
    let ctx = AnchorContext::new(&store, EmbeddingView::new(&embeddings), &index, config.anchor);
    let empty = Trajectory { user_id: String::new(), states: Vec::new() };

    type UserOut = (Vec<TruthRecord>, Vec<ForecastRecord>, Vec<(TargetKind, ForecastMode)>, Vec<TargetKind>);
    let per_user: Vec<UserOut> = split
        .users
        .par_iter()
        .map(|(user, us)| {
            let traj = trajs.get(user).unwrap_or(&empty);
            let held_state = |sid: usize| ctx.session_state(sid, &TimeMaskedPeers.peer_set(&ctx, sid)).0.ok();
            let val_state = held_state(us.val);
            let test_state = held_state(us.test);
            let mut test_prefix = traj.states.clone();
            test_prefix.extend(val_state.clone());

            let slots = [
                (TargetKind::Bridge, us.bridge_train, state_at(traj, us.bridge_train).cloned(), traj.prefix_before(us.bridge_train).to_vec()),
                (TargetKind::Val, us.val, val_state, traj.prefix_before(us.val).to_vec()),
                (TargetKind::Test, us.test, test_state, test_prefix),
            ];
            let mut truths = Vec::new();
            let mut records = Vec::new();
            let mut skipped = Vec::new();
            let mut missing = Vec::new();
            for (kind, sid, truth, prefix) in slots {
                let Some(truth) = truth else {
                    missing.push(kind);
                    continue;
                };
                let prefix = vectors(&prefix);
                let history: Vec<usize> = store.user_sessions(user).iter().copied().filter(|&s| s < sid).collect();
                let raw_truth = embeddings.row_f64(store.session(sid).embedding_index);
                for &mode in &fc.modes {
                    let out = if mode.in_embedding_space() {
                        let embs: Vec<Vec<f64>> = history.iter().map(|&s| embeddings.row_f64(store.session(s).embedding_index)).collect();
                        let ts: Vec<i64> = history.iter().map(|&s| store.session(s).timestamp).collect();
                        match mode {
                            ForecastMode::Static => forecast::static_profile(&embs),
                            ForecastMode::Recent => forecast::recent_profile(&embs, fc.recent_k),
                            _ => forecast::time_decayed_profile(&embs, &ts, fc.half_life_seconds),
                        }
                        .map(|v| {
                            let c = linalg::cosine(&v, &raw_truth);
                            (v, c)
                        })
                    } else {
                        state_forecast(mode, &prefix, &truth.vector, model.as_ref(), config.predictor.ema_beta).map(|v| {
                            let c = linalg::cosine(&v, &truth.vector);
                            (v, c)
                        })
                    };
                    match out {
                        Ok((vector, cosine)) => records.push(ForecastRecord { user: user.clone(), target: kind, session: sid, mode, vector, cosine }),
                        Err(_) => skipped.push((kind, mode)),
                    }
                }
                truths.push(TruthRecord { user: user.clone(), target: kind, session: sid, state: truth.vector });
            }
            (truths, records, skipped, missing)
        })
        .collect();

    let mut summary = ForecastSummary { users: split.users.len(), ..ForecastSummary::default() };
    let mut truths = Vec::new();
    let mut records = Vec::new();
    for (t, r, skipped, missing) in per_user {
        for kind in missing {
            *summary.missing_truth.entry(kind).or_default() += 1;
        }
        for (kind, mode) in skipped {
            summary.modes.entry(mode.name()).or_default().entry(kind).or_default().skipped += 1;
        }
        truths.extend(t);
        records.extend(r);
    }
    for mode in &fc.modes {
        for kind in TargetKind::ALL {
            let cos: Vec<f64> = records.iter().filter(|r| r.mode == *mode && r.target == kind).map(|r| r.cosine).collect();
            let entry = summary.modes.entry(mode.name()).or_default().entry(kind).or_default();
            entry.n = cos.len();
            entry.mean_cosine = if cos.is_empty() { 0.0 } else { cos.iter().sum::<f64>() / cos.len() as f64 };
        }
    }

    let mut w = StageWriter::new(ws, Stage::Forecast)?;
    w.input("trajectories", ws.hashed_input(&ws.artifact(Stage::BuildStates, "trajectories.trj"))?);
    if needs_model {
        w.input("predictor", ws.hashed_input(&ws.artifact(Stage::TrainPredictor, "model.ltm"))?);
    }
    w.write("forecasts.jsonl", &to_jsonl(&records))?;
    w.write("truth.jsonl", &to_jsonl(&truths))?;
    w.write_json("summary.json", &summary)?;
    let mut line = format!("forecast: {} users, test cosine", summary.users);
    for mode in &fc.modes {
        let s = summary.modes[&mode.name()][&TargetKind::Test];
        line.push_str(&format!(" {}={:.4}", mode.name(), s.mean_cosine));
    }
    w.finish(ws, line)
}

fn load_forecasts(ws: &Workspace<'_>, mode: ForecastMode) -> Result<(Vec<ForecastRecord>, Vec<TruthRecord>), PipelineError> {
    let records: Vec<ForecastRecord> = read_jsonl(&ws.artifact(Stage::Forecast, "forecasts.jsonl"))?;
    if !records.iter().any(|r| r.mode == mode) {
        return Err(PipelineError::Stale { needs: "forecast", reason: format!("it produced no {mode} forecasts; add {mode} to forecast.modes") });
    }
    Ok((records, read_jsonl(&ws.artifact(Stage::Forecast, "truth.jsonl"))?))
}

/// Seeded Gaussian projection of true states to token space.
fn provider_targets(truths: &[&[f64]], token_dim: usize, scale: f64, seed: u64) -> Vec<Vec<f64>> {
    let Some(d) = truths.first().map(|t| t.len()) else { return Vec::new() };
    let mut r = rng::labeled(seed, b"bridge-provider-projection", 0);
    let rows: Vec<Vec<f64>> = (0..token_dim).map(|_| rng::gaussian_vec(&mut r, d, scale)).collect();
    truths.iter().map(|t| rows.iter().map(|row| linalg::dot(row, t)).collect()).collect()
}

pub(crate) fn train_bridge(ws: &Workspace<'_>) -> Result<StageOutcome, PipelineError> {
    let bc = &ws.config.bridge;
    let (records, truths) = load_forecasts(ws, ws.config.bridge.input)?;
    let truth: BTreeMap<(&str, TargetKind), &[f64]> = truths.iter().map(|t| ((t.user.as_str(), t.target), t.state.as_slice())).collect();
    let pick = |kind: TargetKind| -> (Vec<Vec<f64>>, Vec<&[f64]>) {
        records
            .iter()
            .filter(|r| r.mode == bc.input && r.target == kind)
            .filter_map(|r| truth.get(&(r.user.as_str(), kind)).map(|t| (r.vector.clone(), *t)))
            .unzip()
    };
    let (train, train_truth) = pick(TargetKind::Bridge);
    let (val, val_truth) = pick(TargetKind::Val);
    if train.is_empty() {
        return Err(PipelineError::Input(format!("no {} forecasts at the bridge-training session", bc.input)));
    }
    let state_dim = train[0].len();
    let bridge_config = bc.bridge_config(state_dim);
    bridge_config.validate().map_err(|e| PipelineError::Config(format!("bridge: {e} (state dimension is {state_dim})")))?;
    let all_truth: Vec<&[f64]> = train_truth.iter().chain(&val_truth).copied().collect();
    let targets = provider_targets(&all_truth, bc.token_dim, bc.provider.target_scale, bc.provider.seed);
    let provider: Box<dyn LossProvider> = match bc.provider.kind {
        ProviderKind::Quadratic => Box::new(QuadraticAlignment { targets }),
        ProviderKind::Cosine => Box::new(CosineAlignment { targets }),
    };
    let model = bridge_mod::train_bridge(&train, &val, provider.as_ref(), &bridge_config).map_err(internal)?;

    let mut w = StageWriter::new(ws, Stage::TrainBridge)?;
    w.input("forecasts", ws.hashed_input(&ws.artifact(Stage::Forecast, "forecasts.jsonl"))?);
    w.input("truth", ws.hashed_input(&ws.artifact(Stage::Forecast, "truth.jsonl"))?);
    model.save(&w.path("model.ltm")).map_err(internal)?;
    w.adopt("model.ltm")?;
    w.adopt("model.ltm.log.json")?;
    let best_val_loss = model.training_log.iter().find(|l| l.best).and_then(|l| l.val_loss);
    let summary = BridgeSummary { input: bc.input, state_dim, train: train.len(), val: val.len(), params: model.param_count(), best_val_loss };
    w.write_json("summary.json", &summary)?;
    let line = format!(
        "train-bridge: {} parameters on {} states ({} validation){}",
        summary.params,
        summary.train,
        summary.val,
        best_val_loss.map(|l| format!(", best validation loss {l:.6}")).unwrap_or_default()
    );
    w.finish(ws, line)
}

pub(crate) fn emit(ws: &Workspace<'_>) -> Result<StageOutcome, PipelineError> {
    let config = ws.config;
    let store = load_store(ws)?;
    let items = load_items(ws)?;
    let (records, _) = load_forecasts(ws, config.bridge.input)?;
    let model = BridgeModel::load(&ws.artifact(Stage::TrainBridge, "model.ltm")).map_err(internal)?;

    let mut w = StageWriter::new(ws, Stage::Emit)?;
    w.input("forecasts", ws.hashed_input(&ws.artifact(Stage::Forecast, "forecasts.jsonl"))?);
    w.input("bridge", ws.hashed_input(&ws.artifact(Stage::TrainBridge, "model.ltm"))?);
    let mut index = Vec::new();
    let mut warnings = 0;
    for r in records.iter().filter(|r| r.mode == config.bridge.input && r.target == TargetKind::Test) {
        let item = &store.session(r.session).item_id;
        let (title, description) = match items.get(item) {
            Some(meta) => (meta.title.as_str(), meta.description.as_str()),
            None => (item.as_str(), item.as_str()),
        };
        let prompt = assemble_prompt(title, description, &config.emit.marker).map_err(input_err)?;
        warnings += prompt.warnings.len();
        let token = model.forward(&r.vector).map_err(internal)?;
        let n = index.len();
        let header = format!("bundle_{n:05}.json");
        let vector = format!("bundle_{n:05}.f32");
        write_bundle(&InjectionBundle::new(&prompt, &token, &vector), &w.path(&header)).map_err(internal)?;
        w.adopt(&header)?;
        w.adopt(&vector)?;
        index.push(EmitIndexRecord { user: r.user.clone(), item: item.clone(), session: r.session, header });
    }
    if index.is_empty() {
        return Err(PipelineError::Input(format!("no test forecasts for mode {}", config.bridge.input)));
    }
    w.write("index.jsonl", &to_jsonl(&index))?;
    let line = format!("emit: {} bundles ({} prompt warnings)", index.len(), warnings);
    w.finish(ws, line)
}

pub(crate) fn diagnose(ws: &Workspace<'_>) -> Result<StageOutcome, PipelineError> {
    let dc = &ws.config.diagnostics;
    let store = load_store(ws)?;
    let embeddings = load_embeddings(ws)?;
    let split = load_split(ws)?;
    let (_, trajs) = load_trajectories(ws)?;
    let (records, _) = load_forecasts(ws, dc.predictions)?;
    let index = PeerIndex::build_excluding(&store, &split.held_out_sessions());

    let mut states = BTreeMap::new();
    let mut raw = BTreeMap::new();
    let mut trajectories = Vec::new();
    for traj in trajs.values() {
        for s in &traj.states {
            states.insert(s.session, s.vector.clone());
            raw.insert(s.session, embeddings.row_f64(store.session(s.session).embedding_index));
        }
        trajectories.push(vectors(&traj.states));
    }
    let predictions: Vec<Vec<f64>> = records.iter().filter(|r| r.mode == dc.predictions && r.target == TargetKind::Test).map(|r| r.vector.clone()).collect();
    let inputs = DiagnosticsInputs { store: &store, index: &index, states: &states, raw_embeddings: Some(&raw), trajectories: &trajectories, predictions: &predictions };
    let report = diagnostics::diagnose(&inputs, &dc.config()).map_err(input_err)?;

    let mut w = StageWriter::new(ws, Stage::Diagnose)?;
    w.input("trajectories", ws.hashed_input(&ws.artifact(Stage::BuildStates, "trajectories.trj"))?);
    w.input("forecasts", ws.hashed_input(&ws.artifact(Stage::Forecast, "forecasts.jsonl"))?);
    w.write_json("report.json", &report)?;
    w.write("report.txt", report.to_table().as_bytes())?;
    let mut line = format!(
        "diagnose: effective rank {:.2}, same-item cosine {:.4} (raw {:.4}), pairwise cosine {:.4} +- {:.4}",
        report.effective_rank,
        report.same_item_peer_cosine.mean,
        report.raw_same_item_peer_cosine.map_or(f64::NAN, |r| r.mean),
        report.pairwise_cosine.mean,
        report.pairwise_cosine.std
    );

    if let (Some(cand_path), Some(ref_path)) = (&dc.candidates, &dc.references) {
        let open = |p: &std::path::Path| File::open(p).map(BufReader::new).map_err(|e| PipelineError::Input(format!("{}: {e}", p.display())));
        let candidates = read_text_records(open(cand_path)?).map_err(input_err)?;
        let references = read_text_records(open(ref_path)?).map_err(input_err)?;
        w.input("candidates", ws.hashed_input(cand_path)?);
        w.input("references", ws.hashed_input(ref_path)?);
        let rouge = score_records(&candidates, &references).map_err(input_err)?;
        // candidate ids name users; their test item's earlier texts by others are the copy sources
        let mut cases = Vec::new();
        for c in &candidates {
            let us = split.users.get(&c.id).ok_or_else(|| PipelineError::Input(format!("candidate id {} is not a split user", c.id)))?;
            let t = store.session(us.test);
            let peers: Vec<String> = store
                .item_sessions(&t.item_id)
                .iter()
                .map(|&s| store.session(s))
                .filter(|s| s.user_id != t.user_id && s.timestamp < t.timestamp)
                .map(|s| s.text.clone())
                .collect();
            cases.push((c.text.clone(), peers));
        }
        let copy = pooled_copy_rate(&cases, dc.ngram);
        w.write_json("rouge.json", &rouge)?;
        w.write_json("copy.json", &copy)?;
        line.push_str(&format!("; ROUGE-L {:.4}, {}-gram copy {:.2}%", rouge.mean_rl_f, dc.ngram, copy.pooled.rate));
    }
    w.finish(ws, line)
}

pub(crate) fn simulate(ws: &Workspace<'_>) -> Result<StageOutcome, PipelineError> {
    let s = &ws.config.simulate;
    let oracle = |e: crate::driftlab::DriftError| PipelineError::Config(format!("simulate: {e}"));
    let anchoring = verify_anchoring(&s.anchoring, s.anchoring.trials, s.anchoring.seed).map_err(oracle)?;
    let mse = Estimator::ALL.iter().map(|&e| monte_carlo_mse(e, &s.drift, s.drift.trials, s.drift.seed)).collect::<Result<Vec<_>, _>>().map_err(oracle)?;
    let table = crossover_sweep(&s.crossover).map_err(oracle)?;
    let ok = |r: &OracleReport| r.passed || !r.graded;
    let crossover_agreement = table.agreement();
    let mut failures: Vec<String> = std::iter::once(&anchoring).chain(&mse).filter(|r| !ok(r)).map(|r| r.oracle.clone()).collect();
    if crossover_agreement < CROSSOVER_AGREEMENT {
        failures.push(format!("crossover agreement {crossover_agreement:.3}"));
    }
    let report = SimulateReport { anchoring, mse, crossover_agreement, crossover_cells: table.cells.len(), passed: failures.is_empty() };

    let mut w = StageWriter::new(ws, Stage::Simulate)?;
    w.write_json("report.json", &report)?;
    w.write("crossover.csv", table.to_csv().as_bytes())?;
    let mut line = format!("simulate: anchoring {}", if ok(&report.anchoring) { "pass" } else { "FAIL" });
    for r in &report.mse {
        let name = r.estimator.map_or("mse", |e| e.name());
        line.push_str(&format!(", {name} {}", if ok(r) { "pass" } else { "FAIL" }));
    }
    line.push_str(&format!(", crossover agreement {:.1}%", 100.0 * crossover_agreement));
    let outcome = w.finish(ws, line)?;
    if !failures.is_empty() {
        return Err(PipelineError::OracleFailed(failures.join(", ")));
    }
    Ok(outcome)
}

/// Convenience for tests and tools: writes a jsonl file of item metadata.
pub fn write_items<W: std::io::Write>(w: &mut W, items: &[(String, String, String)]) -> std::io::Result<()> {
    for (item, title, description) in items {
        let line = serde_json::to_string(&ItemRecord { item: item.clone(), title: title.clone(), description: description.clone() }).expect("item serializes");
        writeln!(w, "{line}")?;
    }
    Ok(())
}
