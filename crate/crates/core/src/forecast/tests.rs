use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use super::*;
use crate::rng;

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

fn unit(rng: &mut rng::StreamRng, d: usize) -> Vec<f64> {
    linalg::normalized(&rng::gaussian_vec(rng, d, 1.0), 1e-12).unwrap()
}

fn tiny_hyper() -> PredictorHyper {
    PredictorHyper { hidden_size: 8, attention_size: 8, ..PredictorHyper::default() }
}

#[test]
fn last_state() {
    let e1 = vec![1.0, 0.0];
    let e2 = vec![0.0, 1.0];
    assert_eq!(predict_last(&[e1.clone()]).unwrap().raw, e1);
    let r = predict_last(&[e1, e2.clone()]).unwrap();
    assert_eq!(r.raw, e2);
    assert_eq!(r.normalized.unwrap(), e2);
    assert!(matches!(predict_last(&[]), Err(ForecastError::Empty)));
}

#[test]
fn linear_trend() {
    let c = vec![0.6, 0.8];
    assert_eq!(predict_linear_trend(&[c.clone(), c.clone(), c.clone()]).unwrap().raw, c);
    assert_eq!(predict_linear_trend(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap().raw, vec![-1.0, 2.0]);
    assert!(matches!(predict_linear_trend(&[vec![1.0]]), Err(ForecastError::TooFewStates { need: 2, got: 1, .. })));
    let a = [0.25, -0.5];
    let g = [0.125, 0.25];
    let line: Vec<Vec<f64>> = (1..=4).map(|t| vec![a[0] + t as f64 * g[0], a[1] + t as f64 * g[1]]).collect();
    assert_eq!(predict_linear_trend(&line).unwrap().raw, vec![a[0] + 5.0 * g[0], a[1] + 5.0 * g[1]]);
}

#[test]
fn ema_endpoints_and_midpoint() {
    let states = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
    assert_eq!(predict_ema(&states, 1.0).unwrap().raw, vec![0.0, 1.0]);
    assert_eq!(predict_ema(&states, 0.0).unwrap().raw, vec![0.5, 0.5]);
    assert_eq!(predict_ema(&states, 0.5).unwrap().raw, vec![0.25, 0.75]);
    assert!(matches!(predict_ema(&states, 1.5), Err(ForecastError::InvalidBeta(_))));
    assert!(matches!(predict_ema(&states, -0.1), Err(ForecastError::InvalidBeta(_))));
}

#[test]
fn ols_matches_trend_on_two_states_and_lines() {
    let s = vec![vec![0.3, -0.2, 0.9], vec![0.1, 0.4, -0.7]];
    assert_eq!(predict_ols(&s).unwrap().raw, predict_linear_trend(&s).unwrap().raw);
    let a = [0.5, -1.0];
    let g = [0.25, 0.125];
    let line: Vec<Vec<f64>> = (1..=9).map(|t| vec![a[0] + t as f64 * g[0], a[1] + t as f64 * g[1]]).collect();
    assert!(close(&predict_ols(&line).unwrap().raw, &[a[0] + 10.0 * g[0], a[1] + 10.0 * g[1]], 1e-12));
    assert!(predict_ols(&[vec![1.0]]).is_err());
}

// Independent re-implementations for the dual-implementation oracle.
fn naive_ols(states: &[Vec<f64>]) -> Vec<f64> {
    let n = states.len();
    let x = DMatrix::from_fn(n, 2, |i, j| if j == 0 { 1.0 } else { (i + 1) as f64 });
    let xtx = x.transpose() * &x;
    let inv = xtx.try_inverse().unwrap();
    (0..states[0].len())
        .map(|k| {
            let y = DVector::from_fn(n, |i, _| states[i][k]);
            let coef = &inv * x.transpose() * y;
            coef[0] + coef[1] * (n + 1) as f64
        })
        .collect()
}

fn naive_ema(states: &[Vec<f64>], beta: f64) -> Vec<f64> {
    let d = states[0].len();
    let mut out = vec![0.0; d];
    for k in 0..d {
        let mut sum = 0.0;
        for s in states {
            sum += s[k];
        }
        out[k] = beta * states[states.len() - 1][k] + (1.0 - beta) * sum / states.len() as f64;
    }
    out
}

fn arb_states() -> impl Strategy<Value = Vec<Vec<f64>>> {
    (1usize..6).prop_flat_map(|d| prop::collection::vec(prop::collection::vec(-1.0f64..1.0, d), 2..12))
}

proptest! {
    #[test]
    fn closed_forms_match_naive(states in arb_states(), beta in 0.0f64..=1.0) {
        let ols = predict_ols(&states).unwrap().raw;
        prop_assert!(close(&ols, &naive_ols(&states), 1e-9));
        prop_assert!(close(&predict_ema(&states, beta).unwrap().raw, &naive_ema(&states, beta), 1e-12));
        let n = states.len();
        let trend: Vec<f64> = (0..states[0].len()).map(|k| states[n - 1][k] + (states[n - 1][k] - states[n - 2][k])).collect();
        prop_assert!(close(&predict_linear_trend(&states).unwrap().raw, &trend, 1e-12));
        prop_assert_eq!(&predict_last(&states).unwrap().raw, &states[n - 1]);
    }

    #[test]
    fn cosine_term_is_scale_invariant(raw in prop::collection::vec(-1.0f64..1.0, 4), target in prop::collection::vec(-1.0f64..1.0, 4), c in 0.1f64..10.0) {
        prop_assume!(linalg::norm(&raw) > 1e-3 && linalg::norm(&target) > 1e-3);
        let target = linalg::normalized(&target, 1e-12).unwrap();
        let scaled = linalg::scale(&raw, c);
        let (a, _) = loss_with_grad(&raw, &target, 0.0);
        let (b, _) = loss_with_grad(&scaled, &target, 0.0);
        prop_assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn full_loss_is_not_scale_invariant() {
    let target = vec![0.6, 0.8];
    let raw = vec![0.8, 0.6];
    let (a, _) = loss_with_grad(&raw, &target, 0.01);
    let (b, _) = loss_with_grad(&linalg::scale(&raw, 3.0), &target, 0.01);
    assert!((a - b).abs() > 1e-3);
}

#[test]
fn loss_examples() {
    let p = vec![0.0, 0.6, 0.8];
    let at = |raw: Vec<f64>, lambda| predictor_loss(&ForecastResult::new(raw, Arch::Last, 1), &p, lambda).unwrap().loss;
    assert!(at(p.clone(), 0.01).abs() < 1e-15);
    let neg = linalg::scale(&p, -1.0);
    assert!((at(neg.clone(), 0.0) - 2.0).abs() < 1e-15);
    assert!((at(neg, 0.01) - 2.04).abs() < 1e-15);
    let degenerate = predictor_loss(&ForecastResult::new(vec![0.0; 3], Arch::Last, 1), &p, 0.01).unwrap();
    assert!(degenerate.degenerate);
    assert!(degenerate.loss.is_finite());
}

#[test]
fn lambda_changes_gradient_only_by_mse_term() {
    let raw = vec![0.3, -0.4, 0.5];
    let target = vec![0.0, 0.6, 0.8];
    let (_, g0) = loss_with_grad(&raw, &target, 0.0);
    let (_, g1) = loss_with_grad(&raw, &target, 0.5);
    // d/dr_k of 0.5 * |r - p|^2 is (r_k - p_k)
    assert!((g1[1] - g0[1] - (raw[1] - target[1])).abs() < 1e-15);
}

#[test]
fn static_and_recent_profiles() {
    let e = vec![0.6, 0.8];
    assert_eq!(static_profile(&[e.clone()]).unwrap(), e);
    assert!(matches!(static_profile(&[e.clone(), linalg::scale(&e, -1.0)]), Err(ForecastError::Degenerate)));
    assert!(close(&static_profile(&vec![e.clone(); 5]).unwrap(), &e, 1e-15));

    let xs = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![0.6, 0.8]];
    assert_eq!(recent_profile(&xs, 8).unwrap(), static_profile(&xs).unwrap());
    assert!(close(&recent_profile(&xs, 1).unwrap(), &xs[2], 1e-15));
    let permuted = vec![vec![1.0, 0.0], vec![0.6, 0.8], vec![0.0, 1.0]];
    assert!(close(&recent_profile(&xs, 2).unwrap(), &recent_profile(&permuted, 2).unwrap(), 1e-15));
}

#[test]
fn time_decay_limits_and_weights() {
    let xs = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
    let ts = vec![100, 200];
    assert!(close(&time_decayed_profile(&xs, &ts, 1e15).unwrap(), &static_profile(&xs).unwrap(), 1e-9));
    assert!(close(&time_decayed_profile(&xs, &ts, 1e-3).unwrap(), &xs[1], 1e-12));
    // one half-life apart: weights 1/3 and 2/3 before normalization
    let expected = linalg::normalized(&[1.0 / 3.0, 2.0 / 3.0], 1e-12).unwrap();
    assert!(close(&time_decayed_profile(&xs, &ts, 100.0).unwrap(), &expected, 1e-15));
    assert!(matches!(time_decayed_profile(&xs, &ts, 0.0), Err(ForecastError::InvalidHalfLife(_))));
}

#[test]
fn dep_style_average() {
    let e1 = vec![1.0, 0.0];
    let e2 = vec![0.0, 1.0];
    assert_eq!(dep_style_profile(&[e1.clone()]).unwrap(), e1);
    assert!(close(&dep_style_profile(&[e1.clone(), e1.clone()]).unwrap(), &e1, 1e-15));
    let r = dep_style_profile(&[e1, e2]).unwrap();
    assert!(close(&r, &[0.70710678, 0.70710678], 1e-8));
}

#[test]
fn attention_single_state_attends_to_itself() {
    let d = 4;
    let model = PredictorModel::init(Arch::Attention, d, tiny_hyper());
    let layout = model.layout().unwrap();
    let e = vec![0.5, 0.5, 0.5, 0.5];
    let out = model.predict(&[e.clone()]).unwrap();
    let w_o = layout.view(&model.params, "w_o");
    let cat = DVector::from_iterator(2 * d, e.iter().chain(&e).copied());
    let z = w_o * cat;
    let expected = linalg::normalized(z.as_slice(), 1e-12).unwrap();
    assert!(close(&out.raw, &expected, 1e-12));
    assert!((linalg::norm(&out.raw) - 1.0).abs() < 1e-12);
}

#[test]
fn attention_zero_scores_pool_uniformly() {
    let d = 3;
    let mut model = PredictorModel::init(Arch::Attention, d, tiny_hyper());
    let layout = model.layout().unwrap();
    for name in ["w_h", "w_q", "b_a"] {
        let b = layout.block(name);
        model.params[b.offset..b.offset + b.rows * b.cols].iter_mut().for_each(|p| *p = 0.0);
    }
    let states = vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]];
    let out = model.predict(&states).unwrap();
    let mean = linalg::mean(&states);
    let w_o = layout.view(&model.params, "w_o");
    let cat = DVector::from_iterator(2 * d, mean.iter().chain(&states[2]).copied());
    let expected = linalg::normalized((w_o * cat).as_slice(), 1e-12).unwrap();
    assert!(close(&out.raw, &expected, 1e-12));
}

#[test]
fn learned_predictions_are_deterministic() {
    let mut r = rng::stream(3, 0);
    let states: Vec<Vec<f64>> = (0..5).map(|_| unit(&mut r, 6)).collect();
    for arch in [Arch::Attention, Arch::Gru] {
        let a = PredictorModel::init(arch, 6, tiny_hyper()).predict(&states).unwrap();
        let b = PredictorModel::init(arch, 6, tiny_hyper()).predict(&states).unwrap();
        assert_eq!(a.raw.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), b.raw.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
    }
}

#[test]
fn zero_gru_outputs_head_bias() {
    let mut model = PredictorModel::zeros(Arch::Gru, 3, tiny_hyper());
    let layout = model.layout().unwrap();
    let b = layout.block("b_head").clone();
    model.params[b.offset..b.offset + 3].copy_from_slice(&[0.1, -0.2, 0.3]);
    for states in [vec![vec![1.0, 0.0, 0.0]], vec![vec![0.0, 0.6, 0.8], vec![0.0, 0.0, 1.0]]] {
        assert_eq!(model.predict(&states).unwrap().raw, vec![0.1, -0.2, 0.3]);
    }
}

#[test]
fn gru_is_order_sensitive() {
    let mut r = rng::stream(5, 1);
    let states: Vec<Vec<f64>> = (0..4).map(|_| unit(&mut r, 6)).collect();
    let reversed: Vec<Vec<f64>> = states.iter().rev().cloned().collect();
    let model = PredictorModel::init(Arch::Gru, 6, tiny_hyper());
    let a = model.predict(&states).unwrap().raw;
    let b = model.predict(&reversed).unwrap().raw;
    assert!(!close(&a, &b, 1e-9));
}

#[test]
fn arch_mismatch_and_nonfinite_are_errors() {
    let mut model = PredictorModel::init(Arch::Attention, 3, tiny_hyper());
    model.params[0] = f64::NAN;
    assert!(matches!(model.predict(&[vec![1.0, 0.0, 0.0]]), Err(ForecastError::NonFinite(_))));
    let model = PredictorModel::init(Arch::Gru, 3, tiny_hyper());
    assert!(matches!(model.predict(&[vec![1.0, 0.0]]), Err(ForecastError::Dimension { .. })));
}

#[test]
fn gradients_match_finite_differences() {
    for seed in 0..4 {
        let p3 = gradient_check(Arch::Attention, seed, 1e-4);
        let p4 = gradient_check(Arch::Gru, seed, 1e-4);
        assert!(p3 < 1e-4, "P3 seed {seed}: {p3:e}");
        assert!(p4 < 1e-4, "P4 seed {seed}: {p4:e}");
    }
    assert!(gradcheck::gradient_check_lambda(Arch::Gru, 9, 1e-4, 0.0) < 1e-4);
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    for arch in Arch::ALL {
        let mut model = PredictorModel::init(arch, 5, tiny_hyper());
        model.training_log.push(EpochLog { epoch: 0, train_loss: 0.5, val_loss: Some(0.25), val_cosine: Some(0.75), best: true });
        let path = dir.path().join(format!("{arch}.mdl"));
        model.save(&path).unwrap();
        let back = PredictorModel::load(&path).unwrap();
        assert_eq!(back, model);
        assert_eq!(model.to_checkpoint().to_bytes().unwrap(), back.to_checkpoint().to_bytes().unwrap());
    }
}

fn constant_task(n: usize, d: usize, seed: u64) -> Vec<TrainingPair> {
    let mut r = rng::stream(seed, 7);
    (0..n)
        .map(|i| {
            let u = unit(&mut r, d);
            TrainingPair { prefix: vec![u.clone(); 4 + i % 3], target: u }
        })
        .collect()
}

#[test]
fn training_is_deterministic_and_improves() {
    let train = constant_task(96, 4, 1);
    let val = constant_task(32, 4, 2);
    let hyper = PredictorHyper { hidden_size: 8, attention_size: 8, epochs: 3, batch_size: 16, seed: 4, ..PredictorHyper::default() };
    for arch in [Arch::Attention, Arch::Gru] {
        let a = train_predictor(&train, &val, arch, &hyper).unwrap();
        let b = train_predictor(&train, &val, arch, &hyper).unwrap();
        assert_eq!(a.params.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), b.params.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
        assert_eq!(a.training_log.len(), 4);
        let first = a.training_log[0].train_loss;
        let last = a.training_log[3].train_loss;
        assert!(last <= first, "{arch}: {last} > {first}");
        assert_eq!(a.training_log.iter().filter(|l| l.best).count(), 1);
    }
}

#[test]
fn learns_identity_on_constant_trajectories() {
    let d = 4;
    let train = constant_task(256, d, 11);
    let val = constant_task(64, d, 12);
    let hyper = PredictorHyper {
        hidden_size: 16,
        epochs: 60,
        batch_size: 32,
        optimizer: crate::optim::AdamWConfig { learning_rate: 1e-2, ..Default::default() },
        ..PredictorHyper::default()
    };
    let model = train_predictor(&train, &val, Arch::Gru, &hyper).unwrap();
    let p4: f64 = val.iter().map(|p| linalg::cosine(&model.predict(&p.prefix).unwrap().raw, &p.target)).sum::<f64>() / val.len() as f64;
    let p0: f64 = val.iter().map(|p| linalg::cosine(&predict_last(&p.prefix).unwrap().raw, &p.target)).sum::<f64>() / val.len() as f64;
    assert!(p4 >= p0 - 1e-3, "P4 {p4} vs P0 {p0}");
}

#[test]
fn lambda_sweep_stays_finite() {
    let train = constant_task(48, 4, 21);
    for lambda in [0.0, 0.01, 0.1, 1.0] {
        let hyper = PredictorHyper { hidden_size: 8, epochs: 2, batch_size: 16, lambda, ..PredictorHyper::default() };
        let m = train_predictor(&train, &[], Arch::Gru, &hyper).unwrap();
        assert!(m.training_log.iter().all(|l| l.train_loss.is_finite()));
    }
}

#[test]
fn training_rejects_bad_inputs() {
    let hyper = tiny_hyper();
    assert!(matches!(train_predictor(&[], &[], Arch::Gru, &hyper), Err(ForecastError::EmptyDataset)));
    assert!(matches!(train_predictor(&constant_task(4, 3, 0), &[], Arch::Ema, &hyper), Err(ForecastError::NotLearned(_))));
    let short = vec![TrainingPair { prefix: vec![vec![1.0, 0.0]; 3], target: vec![1.0, 0.0] }];
    assert!(matches!(train_predictor(&short, &[], Arch::Gru, &hyper), Err(ForecastError::TooFewStates { .. })));
}
