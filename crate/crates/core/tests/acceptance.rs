//! Acceptance suite. Runs every criterion in order, prints one PASS/FAIL line
//! each and exits non-zero if any failed.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use latte_core::anchor::{peer_baseline, read_trajectories, relative_state, write_trajectories, ResidualOutcome};
use latte_core::bridge::{bridge_gradient_check, read_bundle, train_bridge, write_bundle, BridgeConfig, BridgeModel, QuadraticAlignment};
use latte_core::corpus::{EmbeddingStore, PeerIndex, SplitAssignment};
use latte_core::diagnostics::{effective_rank, effective_rank_from_spectrum, leakage_demo, pairwise_cosine_stats, rouge, LeakageConfig};
use latte_core::driftlab::{
    analytic_mse, crossover_sweep, gen_additive, gen_state_trajectories, monte_carlo_mse, verify_anchoring, AdditiveModelConfig, CrossoverGrid, DriftModelConfig,
    Estimator, StateProcess, SyntheticCorpusConfig, TrajectoryConfig, WeightSpec,
};
use latte_core::forecast::{
    dep_style_profile, gradient_check, predict_ema, predict_last, predict_linear_trend, predict_ols, train_predictor, Arch, PredictorHyper, PredictorModel, TrainingPair,
};
use latte_core::pipeline::{self, ForecastMode, ForecastRecord, RunConfig, Stage, TargetKind};
use latte_core::{linalg, rng};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within_time(start: Instant, limit: Duration) -> Result<Duration, String> {
    let t = start.elapsed();
    ensure(t < limit, || format!("took {t:.1?}, limit {limit:?}"))?;
    Ok(t)
}

fn c1_anchoring_oracle() -> Outcome {
    let start = Instant::now();
    let mut r = rng::stream(2024, 0);
    let weights = rng::simplex(&mut r, 3);
    let cfg = AdditiveModelConfig { dim: 8, peers: 3, noise_var: 0.04, item_scale: 1.0, weights: WeightSpec::Fixed(weights.clone()), ..AdditiveModelConfig::default() };
    let report = verify_anchoring(&cfg, 100_000, 1).map_err(|e| e.to_string())?;
    let t = within_time(start, Duration::from_secs(30))?;

    let expected_var = 0.04 * (1.0 + weights.iter().map(|w| w * w).sum::<f64>());
    let var = report.checks.iter().find(|c| c.name == "residual_variance").ok_or("no variance check")?;
    ensure((var.expected - expected_var).abs() < 1e-12, || format!("variance target {} vs {expected_var}", var.expected))?;
    ensure((var.observed - expected_var).abs() <= 0.05 * expected_var, || format!("variance {} vs {expected_var}", var.observed))?;
    let means: Vec<_> = report.checks.iter().filter(|c| c.name.starts_with("residual_mean")).collect();
    ensure(means.len() == 8, || format!("{} mean checks", means.len()))?;
    let se = report.standard_error.ok_or("no standard error")?;
    for c in &means {
        ensure(c.passed && c.tolerance <= 4.0 * se + 1e-15, || format!("{c:?}"))?;
    }
    ensure(report.passed, || format!("{:?}", report.checks))?;
    Ok(format!("variance {:.5} vs {expected_var:.5}, 8/8 means within 4 SE, {t:.1?}", var.observed))
}

fn c2_exact_cancellation() -> Outcome {
    // dyadic inputs and weights keep every intermediate exactly representable
    let mut r = rng::stream(7, 0);
    let grid = |r: &mut rng::StreamRng, n: usize| rng::uniform_vec(r, n, 64.0).into_iter().map(|x| x.round() / 64.0).collect::<Vec<f64>>();
    for trial in 0..100 {
        let k = 1 + trial % 5;
        let mut cuts: Vec<f64> = rng::uniform_vec(&mut r, k - 1, 1.0).into_iter().map(|x| (x.abs() * 64.0).round()).collect();
        cuts.push(0.0);
        cuts.push(64.0);
        cuts.sort_by(f64::total_cmp);
        let weights: Vec<f64> = cuts.windows(2).map(|w| (w[1] - w[0]) / 64.0).collect();
        let d = 6;
        let response = grid(&mut r, d);
        let peers: Vec<Vec<f64>> = (0..k).map(|_| grid(&mut r, d)).collect();
        let offset = grid(&mut r, d);
        let state = |resp: &[f64], ps: &[Vec<f64>]| match relative_state(resp, &peer_baseline(&weights, ps).unwrap(), 1e-8).unwrap() {
            ResidualOutcome::Normalized { vector, .. } => Some(vector.iter().map(|x| x.to_bits()).collect::<Vec<_>>()),
            ResidualOutcome::Degenerate { .. } => None,
        };
        let shifted: Vec<Vec<f64>> = peers.iter().map(|p| linalg::add(p, &offset)).collect();
        let a = state(&response, &peers);
        let b = state(&linalg::add(&response, &offset), &shifted);
        ensure(a == b, || format!("trial {trial}: states differ"))?;
    }
    Ok("100/100 trials bit-identical".into())
}

fn c3_drift_closed_forms() -> Outcome {
    let start = Instant::now();
    let cfg = DriftModelConfig::default();
    ensure(cfg.horizon == 10 && cfg.dim == 4 && cfg.noise_var == 0.04, || format!("{cfg:?}"))?;
    ensure((linalg::dot(&cfg.drift, &cfg.drift) - 0.01).abs() < 1e-15, || "drift norm".into())?;
    let mut parts = Vec::new();
    for (e, reference) in [(Estimator::StaticAverage, 0.26778), (Estimator::LastState, 0.17)] {
        let (b, v) = analytic_mse(e, &cfg).map_err(|e| e.to_string())?;
        ensure((b + v - reference).abs() < 5e-6, || format!("{} analytic {}", e.name(), b + v))?;
        let mc = monte_carlo_mse(e, &cfg, 10_000, 3).map_err(|e| e.to_string())?;
        let m = mc.empirical_mse.ok_or("no mse")?;
        ensure((m - reference).abs() / reference < 0.05, || format!("{} empirical {m} vs {reference}", e.name()))?;
        parts.push(format!("{} {m:.4}", e.name()));
    }
    let ols = monte_carlo_mse(Estimator::Ols, &cfg, 10_000, 3).map_err(|e| e.to_string())?;
    let bias = ols.empirical_bias_norm.ok_or("no bias")?;
    let bias_check = ols.checks.iter().find(|c| c.name == "bias_norm").ok_or("no bias check")?;
    ensure(bias_check.passed, || format!("OLS bias {bias} vs bound {}", bias_check.tolerance))?;
    let t = within_time(start, Duration::from_secs(60))?;
    Ok(format!("{}, OLS bias {bias:.4} < {:.4}, {t:.1?}", parts.join(", "), bias_check.tolerance))
}

fn c4_crossover() -> Outcome {
    let grid = CrossoverGrid::default();
    ensure(grid.trials == 10_000 && grid.drift_norms.len() == 5 && grid.noise_stds.len() == 5, || format!("{grid:?}"))?;
    let table = crossover_sweep(&grid).map_err(|e| e.to_string())?;
    let agreement = table.agreement();
    ensure(agreement >= 0.95, || format!("agreement {agreement}"))?;
    let min_noise = grid.noise_stds.iter().copied().fold(f64::INFINITY, f64::min);
    for c in &table.cells {
        if c.drift_norm == 0.0 {
            ensure(c.empirical_winner == Estimator::StaticAverage, || format!("g=0 cell {c:?}"))?;
        }
        if c.noise_std == min_noise && c.drift_norm > 0.0 {
            ensure(c.empirical_winner == Estimator::LastState, || format!("low-noise cell {c:?}"))?;
        }
    }
    Ok(format!("{:.0}% of {} cells agree", 100.0 * agreement, table.cells.len()))
}

fn c5_gradients() -> Outcome {
    let mut worst = [0.0f64; 3];
    for seed in 0..20 {
        worst[0] = worst[0].max(gradient_check(Arch::Attention, seed, 1e-5));
        worst[1] = worst[1].max(gradient_check(Arch::Gru, seed, 1e-5));
        worst[2] = worst[2].max(bridge_gradient_check(seed, 1e-5));
    }
    ensure(worst.iter().all(|w| *w < 1e-4), || format!("max rel err P3 {:e} P4 {:e} bridge {:e}", worst[0], worst[1], worst[2]))?;
    Ok(format!("20 instances each, max rel err P3 {:.1e} P4 {:.1e} bridge {:.1e}", worst[0], worst[1], worst[2]))
}

fn rolling_pairs(trajectories: &[Vec<Vec<f64>>], min_prefix: usize) -> Vec<TrainingPair> {
    trajectories.iter().flat_map(|t| (min_prefix..t.len()).map(move |k| TrainingPair { prefix: t[..k].to_vec(), target: t[k].clone() })).collect()
}

fn mean_final_cosine(trajectories: &[Vec<Vec<f64>>], f: impl Fn(&[Vec<f64>]) -> Vec<f64>) -> f64 {
    trajectories.iter().map(|t| linalg::cosine(&f(&t[..t.len() - 1]), &t[t.len() - 1])).sum::<f64>() / trajectories.len() as f64
}

fn c6_predictor_ordering() -> Outcome {
    let start = Instant::now();
    let drifting = gen_state_trajectories(&TrajectoryConfig::default());
    // per user: rolling pairs for training, second-to-last state for validation, last for test
    let train: Vec<Vec<Vec<f64>>> = drifting.iter().map(|t| t[..t.len() - 1].to_vec()).collect();
    let val: Vec<TrainingPair> = drifting.iter().map(|t| TrainingPair { prefix: t[..t.len() - 2].to_vec(), target: t[t.len() - 2].clone() }).collect();
    let train_pairs: Vec<TrainingPair> = rolling_pairs(&train, 4).into_iter().filter(|p| p.prefix.len() < train[0].len() - 1).collect();
    let hyper = PredictorHyper { hidden_size: 64, attention_size: 64, batch_size: 32, ..PredictorHyper::default() };
    let model = train_predictor(&train_pairs, &val, Arch::Gru, &hyper).map_err(|e| e.to_string())?;
    let p0 = mean_final_cosine(&drifting, |p| predict_last(p).unwrap().raw);
    let p2 = mean_final_cosine(&drifting, |p| predict_ema(p, 0.5).unwrap().raw);
    let p4 = mean_final_cosine(&drifting, |p| model.predict(p).unwrap().raw);
    let drift_time = start.elapsed();
    ensure(drift_time < Duration::from_secs(300), || format!("drifting run took {drift_time:.1?}"))?;
    ensure(p4 - p2 >= 0.005 && p2 - p0 >= 0.005, || format!("P4 {p4:.4} P2 {p2:.4} P0 {p0:.4}"))?;

    let iid = gen_state_trajectories(&TrajectoryConfig { process: StateProcess::Iid { spread: 0.5 }, ..TrajectoryConfig::default() });
    let iid_p0 = mean_final_cosine(&iid, |p| predict_last(p).unwrap().raw);
    let iid_dep = mean_final_cosine(&iid, |p| dep_style_profile(p).unwrap());
    ensure(iid_dep > iid_p0, || format!("iid DEP {iid_dep:.4} vs P0 {iid_p0:.4}"))?;
    Ok(format!("drifting P4 {p4:.4} >= P2 {p2:.4} >= P0 {p0:.4} ({drift_time:.1?}); iid DEP {iid_dep:.4} > P0 {iid_p0:.4}"))
}

fn c7_bridge_fixture() -> Outcome {
    let cfg = BridgeConfig::default();
    let mut r = rng::stream(1, 0);
    let states: Vec<Vec<f64>> = (0..500).map(|_| linalg::normalized(&rng::gaussian_vec(&mut r, cfg.state_dim, 1.0), 1e-12).unwrap()).collect();
    let targets = (0..500).map(|_| rng::gaussian_vec(&mut r, cfg.token_dim, 0.02)).collect();
    let model = train_bridge(&states, &[], &QuadraticAlignment { targets }, &cfg).map_err(|e| e.to_string())?;
    let first = model.training_log[0].train_provider_loss;
    let best = model.training_log.iter().find(|l| l.best).ok_or("no best epoch")?;
    let drop = 1.0 - best.train_provider_loss / first;
    ensure(drop >= 0.5, || format!("provider loss {first:.4} -> {:.4}", best.train_provider_loss))?;
    let act = best.mean_activation.ok_or("no activation")?;
    ensure((0.02..=0.15).contains(&act), || format!("mean activation {act}"))?;

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("bridge.ltm");
    model.save(&path).map_err(|e| e.to_string())?;
    let reloaded = BridgeModel::load(&path).map_err(|e| e.to_string())?;
    for s in states.iter().take(20) {
        let a = model.forward(s).map_err(|e| e.to_string())?;
        let b = model.forward(s).map_err(|e| e.to_string())?;
        let c = reloaded.forward(s).map_err(|e| e.to_string())?;
        let bits = |t: &latte_core::bridge::TokenEmbedding| t.vector.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        ensure(bits(&a) == bits(&b) && bits(&a) == bits(&c), || "forward output differs".into())?;
    }
    Ok(format!("provider loss -{:.0}%, mean activation {act:.4}, forward bit-identical", 100.0 * drop))
}

/// The demo fixture shipped with the command line crate.
fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../cli/fixtures/demo")
}

fn fixture_config(out: &Path) -> Result<RunConfig, String> {
    let mut config = RunConfig::load(&fixture_dir().join("config.json")).map_err(|e| e.to_string())?;
    config.output_dir = out.to_path_buf();
    Ok(config)
}

const ALL_STAGES: [Stage; 7] = [Stage::Ingest, Stage::BuildStates, Stage::TrainPredictor, Stage::Forecast, Stage::TrainBridge, Stage::Emit, Stage::Diagnose];

fn run_pipeline(config: &RunConfig) -> Result<(), String> {
    for stage in ALL_STAGES {
        pipeline::run_stage(stage, config).map_err(|e| format!("{}: {e}", stage.name()))?;
    }
    Ok(())
}

fn read_text(path: &Path) -> Result<String, String> {
    std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))
}

fn c8_leakage(run: &Path) -> Outcome {
    let config = fixture_config(run)?;
    let audit: Vec<serde_json::Value> = serde_json::from_str(&read_text(&run.join("states/audit.json"))?).map_err(|e| e.to_string())?;
    ensure(!audit.is_empty(), || "empty audit".into())?;
    for stage in &audit {
        ensure(stage["forbidden_touched"].as_array().is_some_and(|a| a.is_empty()), || format!("{stage}"))?;
    }
    // predictor training reads only the audited trajectories, which hold no held-out session
    let manifest: serde_json::Value = serde_json::from_str(&read_text(&run.join("predictor/manifest.json"))?).map_err(|e| e.to_string())?;
    let inputs: Vec<&String> = manifest["inputs"].as_object().ok_or("manifest inputs")?.keys().collect();
    let embeddings = config.data().map_err(|e| e.to_string())?.embeddings.display().to_string();
    ensure(!manifest["inputs"].to_string().contains(&embeddings), || format!("predictor read embeddings: {inputs:?}"))?;
    let split = SplitAssignment::from_json(&read_text(&run.join("ingest/split.json"))?).map_err(|e| e.to_string())?;
    let held_out = split.held_out_sessions();
    let (_, trajectories) = read_trajectories(&mut std::fs::File::open(run.join("states/trajectories.trj")).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let leaked = trajectories.iter().flat_map(|t| &t.states).filter(|s| held_out.contains(&s.session)).count();
    ensure(leaked == 0, || format!("{leaked} held-out states in the trajectory cache"))?;

    let cfg = SyntheticCorpusConfig { dim: 16, items: 12, background_users: 8, users: 30, sessions_per_user: 10, item_scale: 0.5, planted_future_peers: 3, ..SyntheticCorpusConfig::default() };
    let corpus = gen_additive(&cfg).map_err(|e| e.to_string())?;
    let index = PeerIndex::build(&corpus.sessions);
    let users: Vec<String> = (0..cfg.users).map(|u| format!("user{u:03}")).collect();
    let report = leakage_demo(&corpus.sessions, corpus.embeddings.as_ref().ok_or("no embeddings")?, &index, &users, &LeakageConfig::default()).map_err(|e| e.to_string())?;
    let (m, u) = (&report.masked, &report.unmasked);
    ensure(m.future_peer_reads == 0, || format!("masked arm read {} future peers", m.future_peer_reads))?;
    ensure(u.copy.pooled.rate > m.copy.pooled.rate, || format!("copy rate {} -> {}", m.copy.pooled.rate, u.copy.pooled.rate))?;
    ensure(u.peer_cosine > m.peer_cosine, || format!("peer cosine {} -> {}", m.peer_cosine, u.peer_cosine))?;
    Ok(format!(
        "audit clean over {} states, {} predictor inputs; 8-gram copy {:.1}% -> {:.1}%, peer cosine {:.3} -> {:.3}",
        trajectories.iter().map(|t| t.len()).sum::<usize>(),
        inputs.len(),
        m.copy.pooled.rate,
        u.copy.pooled.rate,
        m.peer_cosine,
        u.peer_cosine
    ))
}

fn c9_collapse(run: &Path) -> Outcome {
    let records: Vec<ForecastRecord> =
        read_text(&run.join("forecast/forecasts.jsonl"))?.lines().map(serde_json::from_str).collect::<Result<_, _>>().map_err(|e| e.to_string())?;
    let learned: Vec<&ForecastRecord> = records.iter().filter(|r| r.mode == ForecastMode::Predictor(Arch::Gru) && r.target == TargetKind::Test).collect();
    let trained: Vec<Vec<f64>> = learned.iter().map(|r| r.vector.clone()).collect();
    let stats = pairwise_cosine_stats(&trained).map_err(|e| e.to_string())?;
    let rank = effective_rank(&trained).map_err(|e| e.to_string())?;
    ensure(stats.mean < 0.8 && rank > 10.0, || format!("trained P4 mean {:.4} rank {rank:.2}", stats.mean))?;

    // a GRU whose only nonzero parameters are the output bias ignores its input
    let dim = trained[0].len();
    let mut constant = PredictorModel::zeros(Arch::Gru, dim, PredictorHyper { hidden_size: 16, ..PredictorHyper::default() });
    let head = constant.layout().ok_or("no layout")?.block("b_head").clone();
    let bias = linalg::normalized(&rng::gaussian_vec(&mut rng::stream(3, 0), dim, 1.0), 1e-12).ok_or("zero bias")?;
    constant.params[head.offset..head.offset + dim].copy_from_slice(&bias);
    let (_, trajectories) = read_trajectories(&mut std::fs::File::open(run.join("states/trajectories.trj")).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let outputs: Vec<Vec<f64>> = trajectories.iter().filter(|t| !t.is_empty()).map(|t| constant.predict(&t.vectors()).map(|r| r.raw)).collect::<Result<_, _>>().map_err(|e| e.to_string())?;
    let cstats = pairwise_cosine_stats(&outputs).map_err(|e| e.to_string())?;
    let crank = effective_rank(&outputs).map_err(|e| e.to_string())?;
    ensure(cstats.mean > 0.95 && cstats.std < 0.05 && crank < 2.0, || format!("constant mean {:.4} std {:.4} rank {crank:.2}", cstats.mean, cstats.std))?;
    Ok(format!(
        "trained P4 mean {:.3} rank {rank:.1} ({} users); constant mean {:.3} std {:.3} rank {crank:.1}",
        stats.mean,
        trained.len(),
        cstats.mean,
        cstats.std
    ))
}

fn c10_metric_units() -> Outcome {
    let er = effective_rank_from_spectrum(&[2.0, 1.0]);
    ensure(er == 1.8, || format!("effective rank {er}"))?;
    let rl = rouge("a b c", "a c d").rl_f;
    ensure(rl == 2.0 / 3.0, || format!("ROUGE-L {rl}"))?;
    let states = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
    let newest = predict_ema(&states, 1.0).map_err(|e| e.to_string())?.raw;
    let flat = predict_ema(&states, 0.0).map_err(|e| e.to_string())?.raw;
    ensure(newest == states[1] && flat == vec![0.5, 0.5], || format!("EMA endpoints {newest:?} {flat:?}"))?;
    let pair = vec![vec![0.3, -0.2, 0.7], vec![-0.1, 0.9, 0.25]];
    let ols = predict_ols(&pair).map_err(|e| e.to_string())?.raw;
    let trend = predict_linear_trend(&pair).map_err(|e| e.to_string())?.raw;
    ensure(ols.iter().zip(&trend).all(|(a, b)| a.to_bits() == b.to_bits()), || format!("OLS {ols:?} vs trend {trend:?}"))?;
    Ok("effective rank 1.8, ROUGE-L 2/3, EMA endpoints, OLS = trend at two states".into())
}

fn tree(root: &Path) -> Result<BTreeMap<PathBuf, Vec<u8>>, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).map_err(|e| e.to_string())? {
            let p = e.map_err(|e| e.to_string())?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let bytes = std::fs::read(&p).map_err(|e| e.to_string())?;
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), bytes);
            }
        }
    }
    Ok(out)
}

fn c11_determinism(a: &Path, b: &Path) -> Outcome {
    // manifests hold absolute data paths, which both runs share
    let (ta, tb) = (tree(a)?, tree(b)?);
    let keys: BTreeSet<_> = ta.keys().chain(tb.keys()).collect();
    let differing: Vec<_> = keys.iter().filter(|k| ta.get(**k) != tb.get(**k)).collect();
    ensure(differing.is_empty(), || format!("differing files: {differing:?}"))?;
    let stages: BTreeSet<_> = ta.keys().filter_map(|k| k.components().next()).collect();
    ensure(stages.len() == ALL_STAGES.len(), || format!("stage dirs {stages:?}"))?;

    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let same = |original: &Path, copy: &Path| -> Result<(), String> {
        ensure(std::fs::read(original).ok() == std::fs::read(copy).ok(), || format!("{} does not round-trip", original.display()))
    };
    let emb_path = fixture_dir().join("embeddings.bin");
    EmbeddingStore::load_any(&emb_path).map_err(|e| e.to_string())?.save(&tmp.path().join("e.bin")).map_err(|e| e.to_string())?;
    same(&emb_path, &tmp.path().join("e.bin"))?;

    let trj = a.join("states/trajectories.trj");
    let (dim, trajectories) = read_trajectories(&mut std::fs::File::open(&trj).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let mut bytes = Vec::new();
    write_trajectories(&mut bytes, dim, &trajectories).map_err(|e| e.to_string())?;
    ensure(std::fs::read(&trj).map_err(|e| e.to_string())? == bytes, || "trajectory cache does not round-trip".into())?;

    let predictor = a.join("predictor/model.ltm");
    PredictorModel::load(&predictor).map_err(|e| e.to_string())?.save(&tmp.path().join("p.ltm")).map_err(|e| e.to_string())?;
    same(&predictor, &tmp.path().join("p.ltm"))?;
    let bridge = a.join("bridge/model.ltm");
    BridgeModel::load(&bridge).map_err(|e| e.to_string())?.save(&tmp.path().join("b.ltm")).map_err(|e| e.to_string())?;
    same(&bridge, &tmp.path().join("b.ltm"))?;

    let header = a.join("emit/bundle_00000.json");
    let bundle = read_bundle(&header).map_err(|e| e.to_string())?;
    let copy = tmp.path().join("bundle_00000.json");
    write_bundle(&bundle, &copy).map_err(|e| e.to_string())?;
    same(&header, &copy)?;
    same(&a.join("emit/bundle_00000.f32"), &tmp.path().join("bundle_00000.f32"))?;
    Ok(format!("{} files identical across two runs; embeddings, trajectories, checkpoints and bundles round-trip", ta.len()))
}

fn main() {
    let work = tempfile::tempdir().expect("temp dir");
    let (run_a, run_b) = (work.path().join("a"), work.path().join("b"));
    let pipeline_runs: Result<(), String> = [&run_a, &run_b].iter().try_for_each(|dir| run_pipeline(&fixture_config(dir)?));

    let needs_runs = |f: &dyn Fn() -> Outcome| match &pipeline_runs {
        Ok(()) => f(),
        Err(e) => Err(format!("fixture pipeline failed: {e}")),
    };
    let criteria: Vec<(&str, Outcome)> = vec![
        ("1 anchoring oracle", c1_anchoring_oracle()),
        ("2 exact cancellation", c2_exact_cancellation()),
        ("3 drift closed forms", c3_drift_closed_forms()),
        ("4 crossover", c4_crossover()),
        ("5 gradient fidelity", c5_gradients()),
        ("6 predictor ordering", c6_predictor_ordering()),
        ("7 bridge fixture", c7_bridge_fixture()),
        ("8 leakage", needs_runs(&|| c8_leakage(&run_a))),
        ("9 collapse detector", needs_runs(&|| c9_collapse(&run_a))),
        ("10 metric units", c10_metric_units()),
        ("11 determinism and formats", needs_runs(&|| c11_determinism(&run_a, &run_b))),
    ];
    let mut failed = 0;
    for (name, outcome) in &criteria {
        match outcome {
            Ok(detail) => println!("criterion {name}: PASS ({detail})"),
            Err(detail) => {
                failed += 1;
                println!("criterion {name}: FAIL ({detail})");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
