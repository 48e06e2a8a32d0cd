use proptest::prelude::*;

use super::*;
use crate::corpus::{EmbeddingStore, Session};
use crate::rng;

fn unit(d: usize, i: usize) -> Vec<f64> {
    let mut v = vec![0.0; d];
    v[i] = 1.0;
    v
}

fn profile(v: Vec<f64>) -> ProfileSummary {
    ProfileSummary { is_zero: v.iter().all(|&x| x == 0.0), vector: v }
}

/// Four background peers with warm-up history review items x0..x5 at
/// ts 10..15; user "u" reviews x0..x5 at ts 20..25 plus, optionally, a
/// peerless item at ts 30. Embeddings are seeded random unit vectors.
struct Fixture {
    store: SessionStore,
    embeddings: EmbeddingStore,
}

fn fixture(with_lonely: bool) -> Fixture {
    let d = 8;
    let mut sessions = Vec::new();
    let mut push = |user: &str, item: &str, ts: i64| {
        let idx = sessions.len();
        sessions.push(Session {
            user_id: user.into(),
            item_id: item.into(),
            timestamp: ts,
            text: format!("{user} on {item}"),
            embedding_index: idx,
        });
    };
    for p in 0..4 {
        let u = format!("p{p}");
        for k in 0..4 {
            push(&u, &format!("w{k}"), 1 + k as i64);
        }
        for k in 0..6 {
            push(&u, &format!("x{k}"), 10 + k as i64);
        }
    }
    for k in 0..6 {
        push("u", &format!("x{k}"), 20 + k as i64);
    }
    if with_lonely {
        push("u", "lonely", 30);
    }
    let mut r = rng::stream(11, 0);
    let rows: Vec<Vec<f64>> = (0..sessions.len())
        .map(|_| linalg::normalized(&rng::gaussian_vec(&mut r, d, 1.0), 1e-12).unwrap())
        .collect();
    Fixture { store: SessionStore::from_sessions(sessions).unwrap(), embeddings: EmbeddingStore::from_vectors(d, &rows).unwrap() }
}

#[test]
fn profile_of_empty_history_is_zero() {
    let f = fixture(false);
    let index = PeerIndex::build(&f.store);
    let ctx = AnchorContext::new(&f.store, EmbeddingView::new(&f.embeddings), &index, AnchorParams::default());
    let p = ctx.profile_summary("u", 20);
    assert!(p.is_zero);
    assert!(p.vector.iter().all(|&x| x == 0.0));
}

#[test]
fn profile_of_one_session_is_its_embedding() {
    let f = fixture(false);
    let index = PeerIndex::build(&f.store);
    let ctx = AnchorContext::new(&f.store, EmbeddingView::new(&f.embeddings), &index, AnchorParams::default());
    let p = ctx.profile_summary("u", 21);
    let first = f.store.user_sessions("u")[0];
    let e = f.embeddings.row_f64(f.store.session(first).embedding_index);
    for (a, b) in p.vector.iter().zip(&e) {
        assert!((a - b).abs() < 1e-6);
    }
}

#[test]
fn cancelling_profile_is_zero() {
    let e = vec![0.6, 0.8];
    let p = ProfileSummary::from_embeddings(2, &[e.clone(), linalg::scale(&e, -1.0)]);
    assert!(p.is_zero);
}

#[test]
fn equal_similarities_give_uniform_weights() {
    let t = profile(unit(3, 0));
    let peers = vec![profile(vec![0.5, 0.5, 0.0]), profile(vec![0.5, 0.0, 0.5]), profile(vec![0.5, -0.5, 0.0])];
    let w = peer_weights(&t, &peers, 10.0).unwrap();
    for x in w {
        assert!((x - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn zero_temperature_is_uniform() {
    let t = profile(unit(2, 0));
    let peers = vec![profile(unit(2, 0)), profile(unit(2, 1))];
    assert_eq!(peer_weights(&t, &peers, 0.0).unwrap(), vec![0.5, 0.5]);
}

#[test]
fn two_peer_softmax_matches_logistic() {
    // similarities 1.0 and 0.8 at gamma 10: weights are sigma(2), 1 - sigma(2)
    let t = profile(unit(2, 0));
    let peers = vec![profile(unit(2, 0)), profile(vec![0.8, 0.6])];
    let w = peer_weights(&t, &peers, 10.0).unwrap();
    let sigma2 = 1.0 / (1.0 + (-2.0f64).exp());
    assert!((w[0] - sigma2).abs() < 1e-12);
    assert!((w[1] - (1.0 - sigma2)).abs() < 1e-12);
    assert!((w[0] - 0.8808).abs() < 1e-4 && (w[1] - 0.1192).abs() < 1e-4);
}

#[test]
fn zero_profiles_fall_back_to_uniform() {
    let peers = vec![profile(unit(2, 0)), profile(unit(2, 1))];
    assert_eq!(peer_weights(&ProfileSummary::zero(2), &peers, 10.0).unwrap(), vec![0.5, 0.5]);
    let zeros = vec![ProfileSummary::zero(2), ProfileSummary::zero(2)];
    assert_eq!(peer_weights(&profile(unit(2, 0)), &zeros, 10.0).unwrap(), vec![0.5, 0.5]);
}

#[test]
fn empty_peer_list_is_an_error() {
    assert_eq!(peer_weights(&profile(unit(2, 0)), &[], 10.0), Err(AnchorError::NoPeers));
}

#[test]
fn baseline_examples() {
    let e = vec![0.6, 0.8];
    assert_eq!(peer_baseline(&[1.0], &[e.clone()]).unwrap(), e);
    let b = peer_baseline(&[0.5, 0.5], &[unit(2, 0), unit(2, 1)]).unwrap();
    assert!((linalg::norm(&b) - 0.5f64.sqrt()).abs() < 1e-15);
    let b = peer_baseline(&[0.25; 4], &[e.clone(), e.clone(), e.clone(), e.clone()]).unwrap();
    assert_eq!(b, e);
    assert_eq!(peer_baseline(&[1.0], &[e.clone(), e]), Err(AnchorError::LengthMismatch(1, 2)));
}

#[test]
fn relative_state_examples() {
    match relative_state(&[1.0, 0.0], &[0.0, 1.0], 1e-8).unwrap() {
        ResidualOutcome::Normalized { vector, residual_norm } => {
            assert!((residual_norm - 2f64.sqrt()).abs() < 1e-15);
            assert!((vector[0] - 0.5f64.sqrt()).abs() < 1e-15 && (vector[1] + 0.5f64.sqrt()).abs() < 1e-15);
        }
        other => panic!("{other:?}"),
    }
    assert!(matches!(relative_state(&[0.6, 0.8], &[0.6, 0.8], 1e-8).unwrap(), ResidualOutcome::Degenerate { .. }));
    match relative_state(&[0.6, 0.8], &[0.0, 0.0], 1e-8).unwrap() {
        ResidualOutcome::Normalized { vector, .. } => assert_eq!(vector, vec![0.6, 0.8]),
        other => panic!("{other:?}"),
    }
    assert_eq!(relative_state(&[1.0], &[1.0, 0.0], 1e-8), Err(AnchorError::Dimension(1, 2)));
}

#[test]
fn six_sessions_with_peers_give_six_states() {
    let f = fixture(false);
    let index = PeerIndex::build(&f.store);
    let ctx = AnchorContext::new(&f.store, EmbeddingView::new(&f.embeddings), &index, AnchorParams::default());
    let build = build_trajectory(&ctx, "u", f.store.user_sessions("u"), &TimeMaskedPeers);
    assert_eq!(build.trajectory.len(), 6);
    assert_eq!(build.skipped_no_peers, 0);
    assert_eq!(build.time_mask_violations, 0);
    let ts = build.trajectory.timestamps();
    assert!(ts.windows(2).all(|w| w[0] < w[1]));
    for s in &build.trajectory.states {
        assert!((linalg::norm(&s.vector) - 1.0).abs() < 1e-6);
        assert_eq!(s.peer_count, 4);
        assert!(s.residual_norm > 0.0);
    }
}

#[test]
fn peerless_session_is_skipped_and_counted() {
    let f = fixture(true);
    let index = PeerIndex::build(&f.store);
    let ctx = AnchorContext::new(&f.store, EmbeddingView::new(&f.embeddings), &index, AnchorParams::default());
    let users: Vec<usize> = f.store.user_sessions("u").to_vec();
    assert_eq!(users.len(), 7);
    let build = build_trajectory(&ctx, "u", &users[1..], &TimeMaskedPeers);
    assert_eq!(build.trajectory.len(), 5);
    assert_eq!(build.skipped_no_peers, 1);
}

#[test]
fn supplied_future_peers_are_flagged() {
    let f = fixture(false);
    let index = PeerIndex::build(&f.store);
    let ctx = AnchorContext::new(&f.store, EmbeddingView::new(&f.embeddings), &index, AnchorParams::default());
    let first = f.store.user_sessions("u")[0];
    let later = f.store.user_sessions("u")[3];
    let s = f.store.session(later);
    let supplied = SuppliedPeers(
        [(first, vec![Peer { user_id: "u2".into(), session: later, embedding_index: s.embedding_index, timestamp: s.timestamp }])]
            .into_iter()
            .collect(),
    );
    let build = build_trajectory(&ctx, "u", &[first], &supplied);
    assert_eq!(build.trajectory.len(), 1);
    assert!(build.time_mask_violations > 0);
}

#[test]
fn deltas() {
    let mk = |v: Vec<Vec<f64>>| Trajectory {
        user_id: "u".into(),
        states: v
            .into_iter()
            .enumerate()
            .map(|(i, vector)| RelativeState { vector, residual_norm: 1.0, peer_count: 1, weight_entropy: 0.0, session: i, timestamp: i as i64 + 1 })
            .collect(),
    };
    let same = mk(vec![unit(3, 0), unit(3, 0)]);
    assert_eq!(adjacent_delta(&same, 2).unwrap(), vec![0.0; 3]);
    let ortho = mk(vec![unit(3, 0), unit(3, 1)]);
    let d = adjacent_delta(&ortho, 2).unwrap();
    assert_eq!(d, vec![-1.0, 1.0, 0.0]);
    assert!((linalg::norm(&d) - 2f64.sqrt()).abs() < 1e-15);
    assert!(adjacent_delta(&ortho, 1).is_err());
    assert!(adjacent_delta(&ortho, 3).is_err());

    let mut r = rng::stream(3, 0);
    let traj = mk((0..7).map(|_| linalg::normalized(&rng::gaussian_vec(&mut r, 5, 1.0), 0.0).unwrap()).collect());
    let mut total = vec![0.0; 5];
    for t in 2..=traj.len() {
        linalg::axpy(&mut total, 1.0, &adjacent_delta(&traj, t).unwrap());
    }
    let direct = linalg::sub(&traj.states[6].vector, &traj.states[0].vector);
    for (a, b) in total.iter().zip(&direct) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn audit_never_sees_excluded_or_future_rows() {
    let f = fixture(false);
    // exclude the last review of x5 by a peer to act as a held-out session
    let held: BTreeSet<usize> = [f.store.item_sessions("x5")[3]].into_iter().collect();
    let index = PeerIndex::build_excluding(&f.store, &held);
    let audit = crate::audit::AccessAudit::new();
    let ctx = AnchorContext::new(&f.store, EmbeddingView::audited(&f.embeddings, &audit, "states"), &index, AnchorParams::default());
    build_trajectory(&ctx, "u", f.store.user_sessions("u"), &TimeMaskedPeers);
    let forbidden: BTreeSet<usize> = held.iter().map(|&s| f.store.session(s).embedding_index).collect();
    let report = audit.check(&forbidden);
    assert!(report.iter().all(|s| s.forbidden_touched.is_empty()));
}

#[test]
fn trajectory_cache_round_trips() {
    let f = fixture(false);
    let index = PeerIndex::build(&f.store);
    let ctx = AnchorContext::new(&f.store, EmbeddingView::new(&f.embeddings), &index, AnchorParams::default());
    let traj = build_trajectory(&ctx, "u", f.store.user_sessions("u"), &TimeMaskedPeers).trajectory;
    let mut bytes = Vec::new();
    write_trajectories(&mut bytes, 8, &[traj.clone()]).unwrap();
    let (dim, back) = read_trajectories(&mut bytes.as_slice()).unwrap();
    assert_eq!(dim, 8);
    assert_eq!(back[0].len(), traj.len());
    let mut again = Vec::new();
    write_trajectories(&mut again, 8, &back).unwrap();
    assert_eq!(again, bytes);
    assert!(read_trajectories(&mut &bytes[..bytes.len() - 1]).is_err());
}

fn simplex_strategy(k: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, k * 4).prop_map(move |raw| {
        raw.chunks(4).map(|c| linalg::normalized(c, 1e-9).unwrap_or_else(|| vec![1.0, 0.0, 0.0, 0.0])).flatten().collect()
    })
}

proptest! {
    #[test]
    fn weights_stay_on_the_simplex(gamma in 0.0f64..50.0, flat in simplex_strategy(5), t in prop::collection::vec(-1.0f64..1.0, 4)) {
        let target = ProfileSummary::from_embeddings(4, &[t]);
        let peers: Vec<ProfileSummary> = flat.chunks(4).map(|c| ProfileSummary::from_embeddings(4, &[c.to_vec()])).collect();
        let w = peer_weights(&target, &peers, gamma).unwrap();
        prop_assert!(w.iter().all(|&x| x >= 0.0));
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn higher_similarity_weight_grows_with_gamma(s1 in -1.0f64..1.0, s2 in -1.0f64..1.0, g1 in 0.0f64..30.0, dg in 0.0f64..30.0) {
        prop_assume!((s1 - s2).abs() > 1e-6);
        let target = profile(unit(2, 0));
        let p = |s: f64| profile(vec![s, (1.0 - s * s).max(0.0).sqrt()]);
        let peers = vec![p(s1), p(s2)];
        let hi = if s1 > s2 { 0 } else { 1 };
        let w_lo = peer_weights(&target, &peers, g1).unwrap()[hi];
        let w_hi = peer_weights(&target, &peers, g1 + dg).unwrap()[hi];
        prop_assert!(w_hi >= w_lo - 1e-15);
    }

    /// On a dyadic grid every operation is exact, so the cancellation holds bitwise.
    #[test]
    fn shared_offset_cancels_exactly(
        response in prop::collection::vec(-64i32..64, 6),
        peers in prop::collection::vec(prop::collection::vec(-64i32..64, 6), 4),
        offset in prop::collection::vec(-64i32..64, 6),
    ) {
        let grid = |v: &[i32]| v.iter().map(|&x| f64::from(x) / 64.0).collect::<Vec<f64>>();
        let weights = [0.5, 0.25, 0.125, 0.125];
        let c = grid(&offset);
        let r = grid(&response);
        let ps: Vec<Vec<f64>> = peers.iter().map(|p| grid(p)).collect();
        let base = raw_residual(&r, &peer_baseline(&weights, &ps).unwrap()).unwrap();
        let shifted_peers: Vec<Vec<f64>> = ps.iter().map(|p| linalg::add(p, &c)).collect();
        let shifted = raw_residual(&linalg::add(&r, &c), &peer_baseline(&weights, &shifted_peers).unwrap()).unwrap();
        prop_assert_eq!(base.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), shifted.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn shared_offset_cancels_in_floating_point(seed in 0u64..1000) {
        let mut r = rng::stream(seed, 1);
        let weights = rng::simplex(&mut r, 5);
        let resp = rng::gaussian_vec(&mut r, 8, 1.0);
        let ps: Vec<Vec<f64>> = (0..5).map(|_| rng::gaussian_vec(&mut r, 8, 1.0)).collect();
        let c = rng::gaussian_vec(&mut r, 8, 3.0);
        let base = raw_residual(&resp, &peer_baseline(&weights, &ps).unwrap()).unwrap();
        let shifted_peers: Vec<Vec<f64>> = ps.iter().map(|p| linalg::add(p, &c)).collect();
        let shifted = raw_residual(&linalg::add(&resp, &c), &peer_baseline(&weights, &shifted_peers).unwrap()).unwrap();
        for (a, b) in base.iter().zip(&shifted) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}
