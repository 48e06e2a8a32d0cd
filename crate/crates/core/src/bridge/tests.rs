use nalgebra::DMatrix;

use super::*;

fn small_config() -> BridgeConfig {
    BridgeConfig { state_dim: 16, bottleneck: 8, projector_hidden: 12, token_dim: 10, seed: 3, ..BridgeConfig::default() }
}

fn unit_states(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut r = rng::stream(seed, 0);
    (0..n).map(|_| linalg::normalized(&rng::gaussian_vec(&mut r, d, 1.0), 1e-12).unwrap()).collect()
}

#[test]
fn forward_shapes_purity_and_zero_state() {
    let model = BridgeModel::init(small_config()).unwrap();
    let s = unit_states(1, 16, 1).remove(0);
    let a = model.forward(&s).unwrap();
    let b = model.forward(&s).unwrap();
    assert_eq!(a.vector.len(), 10);
    assert_eq!(a, b);

    // zero input: sigmoid(b_f) -> tanh(W1 . + b1) -> W2 . + b2
    let zero = vec![0.0; 16];
    let p = &model.params;
    let bf = model.view_in(p, "filter_b").column(0).map(|x| 1.0 / (1.0 + (-x).exp()));
    let h = (model.view_in(p, "proj1_w") * bf + model.view_in(p, "proj1_b").column(0)).map(f64::tanh);
    let e = model.view_in(p, "proj2_w") * h + model.view_in(p, "proj2_b").column(0);
    let out = model.forward(&zero).unwrap().vector;
    for (x, y) in out.iter().zip(e.iter()) {
        assert!((x - y).abs() < 1e-14);
    }
    assert!(matches!(model.forward(&[1.0; 3]), Err(BridgeError::Dimension { expected: 16, found: 3 })));
}

#[test]
fn default_dims_map_1024_to_token_width() {
    let model = BridgeModel::init(BridgeConfig::default()).unwrap();
    let s = unit_states(1, 1024, 2).remove(0);
    assert_eq!(model.forward(&s).unwrap().vector.len(), 4096);
}

#[test]
fn forward_ignores_decoder() {
    let mut model = BridgeModel::init(small_config()).unwrap();
    let s = unit_states(1, 16, 4).remove(0);
    let before = model.forward(&s).unwrap().vector;
    let mask = model.decoder_mask();
    for (p, m) in model.params.iter_mut().zip(mask) {
        if m {
            *p += 0.75;
        }
    }
    assert_eq!(model.forward(&s).unwrap().vector, before);
}

#[test]
fn corrupt_params_are_reported() {
    let mut model = BridgeModel::init(small_config()).unwrap();
    let b = model.block("proj2_b");
    model.params[b.offset] = f64::INFINITY;
    assert!(matches!(model.forward(&unit_states(1, 16, 0)[0]), Err(BridgeError::Corrupt)));
}

#[test]
fn reconstruction_loss_examples() {
    let x = vec![0.5, -0.5, 0.5, -0.5];
    assert_eq!(reconstruction_loss(&x, &x), 0.0);
    let mut off = x.clone();
    off[2] += 1.0;
    assert!((reconstruction_loss(&off, &x) - 0.25).abs() < 1e-15);
    let model = BridgeModel::init(small_config()).unwrap();
    let (recon, loss) = model.reconstruct(&unit_states(1, 16, 9)[0]).unwrap();
    assert_eq!(recon.len(), 16);
    assert!(loss >= 0.0);
}

#[test]
fn kl_examples() {
    let at_rho = DMatrix::from_element(3, 4, 0.05);
    assert!(kl_sparsity(&at_rho, 0.05).unwrap().abs() < 1e-15);
    let half = DMatrix::from_element(1, 2, 0.5);
    let expected = 0.05 * 0.1f64.ln() + 0.95 * 1.9f64.ln();
    assert!((kl_sparsity(&half, 0.05).unwrap() - expected).abs() < 1e-12);
    assert!((expected - 0.4946).abs() < 1e-3);
    assert!(matches!(kl_sparsity(&DMatrix::zeros(2, 0), 0.05), Err(BridgeError::EmptyBatch)));
    // clamping keeps saturated units finite
    assert!(kl_sparsity(&DMatrix::from_element(1, 1, 1.0), 0.05).unwrap().is_finite());
}

#[test]
fn kl_increases_away_from_rho() {
    let kl = |r: f64| kl_sparsity(&DMatrix::from_element(1, 1, r), 0.05).unwrap();
    let below = [0.04, 0.02, 0.01, 0.001];
    let above = [0.06, 0.1, 0.3, 0.9];
    for w in below.windows(2).chain(above.windows(2)) {
        assert!(kl(w[1]) > kl(w[0]));
    }
}

#[test]
fn gradient_check_passes() {
    for seed in 0..3 {
        let err = bridge_gradient_check(seed, 1e-4);
        assert!(err < 1e-4, "seed {seed}: {err:e}");
    }
}

fn quadratic_fixture(n: usize, cfg: &BridgeConfig, seed: u64) -> (Vec<Vec<f64>>, QuadraticAlignment) {
    let states = unit_states(n, cfg.state_dim, seed);
    let mut r = rng::stream(seed, 1);
    let targets = (0..n).map(|_| rng::gaussian_vec(&mut r, cfg.token_dim, 0.3)).collect();
    (states, QuadraticAlignment { targets })
}

#[test]
fn alpha_zero_freezes_decoder_and_training_is_deterministic() {
    let cfg = BridgeConfig { alpha: 0.0, epochs: 2, ..small_config() };
    let (states, provider) = quadratic_fixture(80, &cfg, 5);
    let init = BridgeModel::init(cfg.clone()).unwrap();
    let a = train_bridge(&states, &[], &provider, &cfg).unwrap();
    let b = train_bridge(&states, &[], &provider, &cfg).unwrap();
    assert_eq!(a.params, b.params);
    let mask = a.decoder_mask();
    for ((p, q), m) in a.params.iter().zip(&init.params).zip(&mask) {
        if *m {
            assert_eq!(p.to_bits(), q.to_bits());
        }
    }
    assert!(a.params.iter().zip(&init.params).zip(&mask).any(|((p, q), m)| !m && p != q));
}

#[test]
fn objective_is_provider_plus_scaled_aux() {
    let cfg = BridgeConfig { alpha: 0.3, sparsity_weight: 0.2, ..small_config() };
    let (states, provider) = quadratic_fixture(20, &cfg, 6);
    let model = BridgeModel::init(cfg.clone()).unwrap();
    let log = train_bridge(&states[..20], &[], &provider, &BridgeConfig { epochs: 0, micro_batch: 20, ..cfg.clone() }).unwrap().training_log;
    let x = crate::forecast::nets::stack_columns(&states.iter().map(Vec::as_slice).collect::<Vec<_>>());
    let act = model.activations(&model.params, &x);
    let provider_mean: f64 = (0..20).map(|j| provider.loss_and_grad(j, act.token.column(j).as_slice()).unwrap().0).sum::<f64>() / 20.0;
    let recon: f64 = states.iter().map(|s| model.reconstruct(s).unwrap().1).sum::<f64>() / 20.0;
    let kl = kl_sparsity(act.bottleneck.as_ref().unwrap(), 0.05).unwrap();
    assert!((log[0].train_provider_loss - provider_mean).abs() < 1e-12);
    assert!((log[0].train_loss - (provider_mean + 0.3 * (recon + 0.2 * kl))).abs() < 1e-12);
}

#[test]
fn training_reduces_provider_loss() {
    let cfg = BridgeConfig { state_dim: 32, bottleneck: 16, projector_hidden: 32, token_dim: 24, ..BridgeConfig::default() };
    let (states, provider) = quadratic_fixture(200, &cfg, 8);
    let model = train_bridge(&states, &[], &provider, &cfg).unwrap();
    let first = model.training_log[0].train_provider_loss;
    let best = model.training_log.iter().find(|l| l.best).unwrap().train_provider_loss;
    assert!(best < first);
    assert_eq!(model.training_log.len(), 7);
}

#[test]
fn provider_errors_carry_the_example() {
    let cfg = small_config();
    let (states, _) = quadratic_fixture(10, &cfg, 1);
    let short = QuadraticAlignment { targets: vec![vec![0.0; 10]; 4] };
    match train_bridge(&states, &[], &short, &cfg) {
        Err(BridgeError::Provider { example, .. }) => assert!(example >= 4),
        other => panic!("expected provider error, got {other:?}"),
    }
}

#[test]
fn no_filter_variant_projects_directly() {
    let cfg = BridgeConfig { filter: FilterMode::None, ..small_config() };
    let model = BridgeModel::init(cfg.clone()).unwrap();
    assert!(model.decoder_mask().iter().all(|m| !m));
    assert_eq!(model.forward(&unit_states(1, 16, 0)[0]).unwrap().vector.len(), 10);
    let (states, provider) = quadratic_fixture(40, &cfg, 2);
    let trained = train_bridge(&states, &[], &provider, &BridgeConfig { epochs: 1, ..cfg }).unwrap();
    assert!(trained.training_log[1].mean_activation.is_none());
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("stb.mdl");
    let mut model = BridgeModel::init(BridgeConfig { seed: u64::MAX - 5, ..small_config() }).unwrap();
    model.training_log.push(BridgeEpochLog { epoch: 0, train_provider_loss: 1.0, train_loss: 1.5, val_provider_loss: None, val_loss: None, mean_activation: Some(0.05), best: true });
    model.save(&path).unwrap();
    let back = BridgeModel::load(&path).unwrap();
    assert_eq!(back, model);
    let mut ckpt = model.to_checkpoint();
    ckpt.arch = "P4".into();
    assert!(BridgeModel::from_checkpoint(&ckpt).is_err());
}

#[test]
fn prompt_has_sections_in_order_and_one_marker() {
    let p = assemble_prompt("X", "Y", DEFAULT_MARKER).unwrap();
    assert_eq!(p.text.matches(DEFAULT_MARKER).count(), 1);
    assert!(p.text.contains("Title: X\n") && p.text.contains("Description: Y\n"));
    let pos: Vec<usize> = ["[System]", "[User context]", "[Target item]", "[Task]"].iter().map(|s| p.text.find(s).unwrap()).collect();
    assert!(pos.windows(2).all(|w| w[0] < w[1]));
    let at: String = p.text.chars().skip(p.marker_offset).take(DEFAULT_MARKER.chars().count()).collect();
    assert_eq!(at, DEFAULT_MARKER);
    assert!(p.warnings.is_empty());
}

#[test]
fn marker_in_item_text_is_escaped() {
    let p = assemble_prompt("Über <PREF_TOKEN> book", "has <PREF_TOKEN> twice <PREF_TOKEN>", DEFAULT_MARKER).unwrap();
    assert_eq!(p.text.matches(DEFAULT_MARKER).count(), 1);
    assert_eq!(p.warnings.len(), 2);
    let at: String = p.text.chars().skip(p.marker_offset).take(12).collect();
    assert_eq!(at, DEFAULT_MARKER);
    assert!(assemble_prompt("", "d", DEFAULT_MARKER).is_err());
    assert!(assemble_prompt("t", "d", "user").is_err());
}

#[test]
fn bundle_round_trip_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let model = BridgeModel::init(small_config()).unwrap();
    let token = model.forward(&unit_states(1, 16, 3)[0]).unwrap();
    let prompt = assemble_prompt("Title", "Description", DEFAULT_MARKER).unwrap();
    let bundle = InjectionBundle::new(&prompt, &token, "u1.f32");
    let header = dir.path().join("u1.json");
    write_bundle(&bundle, &header).unwrap();
    let back = read_bundle(&header).unwrap();
    assert_eq!(back, bundle);
    assert_eq!(back.vector.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), bundle.vector.iter().map(|x| x.to_bits()).collect::<Vec<_>>());

    assert!(matches!(read_bundle(&dir.path().join("missing.json")), Err(BridgeError::Io { .. })));
    let vp = dir.path().join("u1.f32");
    let bytes = std::fs::read(&vp).unwrap();
    std::fs::write(&vp, &bytes[..bytes.len() - 3]).unwrap();
    assert!(matches!(read_bundle(&header), Err(BridgeError::Format(_))));
}
