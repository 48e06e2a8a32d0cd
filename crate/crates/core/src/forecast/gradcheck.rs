//! Central finite differences against the analytic predictor gradients.

use super::nets;
use super::{Arch, PredictorHyper, PredictorModel};
use crate::rng;

/// Relative errors use `max(|analytic|, |numeric|, GRAD_FLOOR)` as denominator.
pub const GRAD_FLOOR: f64 = 1e-3;

const CHECK_DIM: usize = 6;
const CHECK_HIDDEN: usize = 8;
const CHECK_LEN: usize = 5;
const CHECK_BATCH: usize = 3;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR)
}

/// Max relative error over every parameter of a small random P3 or P4
/// instance, with loss weight `lambda`.
pub fn gradient_check_lambda(arch: Arch, seed: u64, eps: f64, lambda: f64) -> f64 {
    assert!(arch.is_learned(), "{arch} has no parameters");
    let hyper = PredictorHyper { hidden_size: CHECK_HIDDEN, attention_size: CHECK_HIDDEN, lambda, seed, ..PredictorHyper::default() };
    let model = PredictorModel::init(arch, CHECK_DIM, hyper);
    let layout = model.layout().expect("learned arch");

    let mut rng = rng::stream(seed, rng::stream_id(&[b"gradcheck", arch.tag().as_bytes()]));
    let unit = |rng: &mut rng::StreamRng| {
        let v = rng::gaussian_vec(rng, CHECK_DIM, 1.0);
        crate::linalg::normalized(&v, 1e-12).expect("gaussian draw is nonzero")
    };
    let prefixes: Vec<Vec<Vec<f64>>> = (0..CHECK_BATCH).map(|_| (0..CHECK_LEN).map(|_| unit(&mut rng)).collect()).collect();
    let targets: Vec<Vec<f64>> = (0..CHECK_BATCH).map(|_| unit(&mut rng)).collect();
    let prefix_refs: Vec<&[Vec<f64>]> = prefixes.iter().map(Vec::as_slice).collect();
    let target_refs: Vec<&[f64]> = targets.iter().map(Vec::as_slice).collect();
    let steps = nets::stack_steps(&prefix_refs);
    let target_m = nets::stack_columns(&target_refs);

    let (_, grad) = nets::loss_and_grad(arch, &layout, &model.params, &steps, &target_m, lambda, true);
    let grad = grad.expect("gradient requested");
    let mut params = model.params.clone();
    let mut worst: f64 = 0.0;
    for i in 0..params.len() {
        let orig = params[i];
        params[i] = orig + eps;
        let (up, _) = nets::loss_and_grad(arch, &layout, &params, &steps, &target_m, lambda, false);
        params[i] = orig - eps;
        let (down, _) = nets::loss_and_grad(arch, &layout, &params, &steps, &target_m, lambda, false);
        params[i] = orig;
        worst = worst.max(relative_error(grad[i], (up - down) / (2.0 * eps)));
    }
    worst
}

pub fn gradient_check(arch: Arch, seed: u64, eps: f64) -> f64 {
    gradient_check_lambda(arch, seed, eps, PredictorHyper::default().lambda)
}
