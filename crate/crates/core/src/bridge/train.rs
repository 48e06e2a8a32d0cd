use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{batch_rates, bernoulli_kl, BridgeConfig, BridgeError, BridgeModel, FilterMode, ACT_CLAMP};
use crate::forecast::gradcheck::relative_error;
use crate::linalg;
use crate::optim::AdamW;
use crate::rng;

#[derive(Debug, Error)]
#[error("{0}")]
pub struct ProviderError(pub String);

/// Supplies the generation-side loss for one example and its gradient with
/// respect to the token embedding. Example ids index the training states,
/// then continue through the validation states.
pub trait LossProvider: Sync {
    fn loss_and_grad(&self, example: usize, token: &[f64]) -> Result<(f64, Vec<f64>), ProviderError>;
}

fn target<'a>(targets: &'a [Vec<f64>], example: usize, token: &[f64]) -> Result<&'a [f64], ProviderError> {
    let t = targets.get(example).ok_or_else(|| ProviderError(format!("no target for example {example}")))?;
    if t.len() != token.len() {
        return Err(ProviderError(format!("target has dim {}, token has {}", t.len(), token.len())));
    }
    Ok(t)
}

/// `0.5 * |token - target|^2`.
#[derive(Debug, Clone)]
pub struct QuadraticAlignment {
    pub targets: Vec<Vec<f64>>,
}

/// `1 - cos(token, target)`.
#[derive(Debug, Clone)]
pub struct CosineAlignment {
    pub targets: Vec<Vec<f64>>,
}

impl LossProvider for QuadraticAlignment {
    fn loss_and_grad(&self, example: usize, token: &[f64]) -> Result<(f64, Vec<f64>), ProviderError> {
        let t = target(&self.targets, example, token)?;
        let diff = linalg::sub(token, t);
        Ok((0.5 * linalg::dot(&diff, &diff), diff))
    }
}

impl LossProvider for CosineAlignment {
    fn loss_and_grad(&self, example: usize, token: &[f64]) -> Result<(f64, Vec<f64>), ProviderError> {
        let t = target(&self.targets, example, token)?;
        let (loss, grad) = crate::forecast::loss_with_grad(token, t, 0.0);
        Ok((loss, grad))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BridgeEpochLog {
    pub epoch: usize,
    pub train_provider_loss: f64,
    pub train_loss: f64,
    pub val_provider_loss: Option<f64>,
    pub val_loss: Option<f64>,
    /// Mean bottleneck activation on the validation states (training states
    /// when there is no validation set).
    pub mean_activation: Option<f64>,
    pub best: bool,
}

struct Objective {
    provider_sum: f64,
    total: f64,
    activation_sum: f64,
    grad: Option<Vec<f64>>,
}

fn add_block(model: &BridgeModel, grad: &mut [f64], name: &str, m: &DMatrix<f64>) {
    let b = model.block(name);
    for (g, x) in grad[b.offset..b.offset + b.rows * b.cols].iter_mut().zip(m.as_slice()) {
        *g += x;
    }
}

fn row_sums(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(m.nrows(), 1);
    for col in m.column_iter() {
        out.column_mut(0).axpy(1.0, &col, 1.0);
    }
    out
}

/// Micro-batch objective: mean provider loss plus
/// `alpha * (mean reconstruction MSE + sparsity_weight * KL)`.
fn objective(model: &BridgeModel, params: &[f64], states: &[&[f64]], ids: &[usize], provider: &dyn LossProvider, want_grad: bool) -> Result<Objective, BridgeError> {
    let cfg = &model.config;
    let n = states.len() as f64;
    let x = crate::forecast::nets::stack_columns(states);
    let act = model.activations(params, &x);

    let mut provider_sum = 0.0;
    let mut d_token = DMatrix::zeros(cfg.token_dim, states.len());
    for (j, &id) in ids.iter().enumerate() {
        let token: Vec<f64> = act.token.column(j).iter().copied().collect();
        let (loss, g) = provider.loss_and_grad(id, &token).map_err(|e| BridgeError::Provider { example: id, message: e.0 })?;
        provider_sum += loss;
        for (k, gk) in g.into_iter().enumerate() {
            d_token[(k, j)] = gk / n;
        }
    }
    let mut total = provider_sum / n;

    let aux = cfg.filter == FilterMode::Sigmoid && cfg.alpha > 0.0;
    let mut recon_diff = None;
    let mut rates = Vec::new();
    if aux {
        let a = act.bottleneck.as_ref().expect("filter present");
        let mut recon = model.view_in(params, "decoder_w") * a;
        for mut col in recon.column_iter_mut() {
            col += model.view_in(params, "decoder_b").column(0);
        }
        let diff = recon - &x;
        let recon_loss = diff.norm_squared() / (n * cfg.state_dim as f64);
        rates = batch_rates(a);
        let kl: f64 = rates.iter().map(|&r| bernoulli_kl(cfg.rho, r)).sum();
        total += cfg.alpha * (recon_loss + cfg.sparsity_weight * kl);
        recon_diff = Some(diff);
    }
    let activation_sum = act.bottleneck.as_ref().map_or(0.0, |a| a.sum() / a.nrows() as f64);

    if !want_grad {
        return Ok(Objective { provider_sum, total, activation_sum, grad: None });
    }

    let mut grad = vec![0.0; params.len()];
    add_block(model, &mut grad, "proj2_w", &(&d_token * act.hidden.transpose()));
    add_block(model, &mut grad, "proj2_b", &row_sums(&d_token));
    let mut d_hidden = model.view_in(params, "proj2_w").transpose() * &d_token;
    d_hidden.zip_apply(&act.hidden, |g, h| *g *= 1.0 - h * h);
    let input = act.bottleneck.as_ref().unwrap_or(&x);
    add_block(model, &mut grad, "proj1_w", &(&d_hidden * input.transpose()));
    add_block(model, &mut grad, "proj1_b", &row_sums(&d_hidden));

    if let Some(a) = act.bottleneck.as_ref() {
        let mut d_a = model.view_in(params, "proj1_w").transpose() * &d_hidden;
        if let Some(diff) = recon_diff {
            let d_recon = diff * (2.0 * cfg.alpha / (n * cfg.state_dim as f64));
            add_block(model, &mut grad, "decoder_w", &(&d_recon * a.transpose()));
            add_block(model, &mut grad, "decoder_b", &row_sums(&d_recon));
            d_a += model.view_in(params, "decoder_w").transpose() * &d_recon;
            let scale = cfg.alpha * cfg.sparsity_weight / n;
            for (unit, &r) in rates.iter().enumerate() {
                let d_rate = scale * (-cfg.rho / r + (1.0 - cfg.rho) / (1.0 - r));
                for j in 0..a.ncols() {
                    let v = a[(unit, j)];
                    if v > ACT_CLAMP && v < 1.0 - ACT_CLAMP {
                        d_a[(unit, j)] += d_rate;
                    }
                }
            }
        }
        d_a.zip_apply(a, |g, s| *g *= s * (1.0 - s));
        add_block(model, &mut grad, "filter_w", &(&d_a * x.transpose()));
        add_block(model, &mut grad, "filter_b", &row_sums(&d_a));
    }
    Ok(Objective { provider_sum, total, activation_sum, grad: Some(grad) })
}

struct Eval {
    provider_mean: f64,
    total: f64,
    mean_activation: f64,
}

fn evaluate(model: &BridgeModel, params: &[f64], states: &[Vec<f64>], first_id: usize, provider: &dyn LossProvider) -> Result<Eval, BridgeError> {
    let mb = model.config.micro_batch;
    let parts: Vec<Result<Objective, BridgeError>> = states
        .par_chunks(mb)
        .enumerate()
        .map(|(c, chunk)| {
            let refs: Vec<&[f64]> = chunk.iter().map(Vec::as_slice).collect();
            let ids: Vec<usize> = (0..chunk.len()).map(|j| first_id + c * mb + j).collect();
            objective(model, params, &refs, &ids, provider, false)
        })
        .collect();
    let n = states.len() as f64;
    let (mut provider, mut total, mut activation) = (0.0, 0.0, 0.0);
    for (part, chunk) in parts.into_iter().zip(states.chunks(mb)) {
        let o = part?;
        provider += o.provider_sum;
        total += o.total * chunk.len() as f64;
        activation += o.activation_sum;
    }
    Ok(Eval { provider_mean: provider / n, total: total / n, mean_activation: activation / n })
}

fn check_states(states: &[Vec<f64>], dim: usize) -> Result<(), BridgeError> {
    match states.iter().find(|s| s.len() != dim) {
        Some(bad) => Err(BridgeError::Dimension { expected: dim, found: bad.len() }),
        None => Ok(()),
    }
}

/// Trains with micro-batches accumulated into one AdamW update and returns the
/// epoch with the lowest validation objective (training objective without a
/// validation set). Provider ids: `0..train.len()` then `train.len()..`.
pub fn train_bridge(train: &[Vec<f64>], val: &[Vec<f64>], provider: &dyn LossProvider, config: &BridgeConfig) -> Result<BridgeModel, BridgeError> {
    config.validate()?;
    if train.is_empty() {
        return Err(BridgeError::EmptyDataset);
    }
    check_states(train, config.state_dim)?;
    check_states(val, config.state_dim)?;
    let mut model = BridgeModel::init(config.clone())?;
    let mut opt = AdamW::new(config.optimizer, model.params.len());
    let frozen = (config.alpha == 0.0).then(|| model.decoder_mask());

    let score = |model: &BridgeModel, epoch: usize| -> Result<BridgeEpochLog, BridgeError> {
        let t = evaluate(model, &model.params, train, 0, provider)?;
        let v = if val.is_empty() { None } else { Some(evaluate(model, &model.params, val, train.len(), provider)?) };
        let has_filter = config.filter == FilterMode::Sigmoid;
        Ok(BridgeEpochLog {
            epoch,
            train_provider_loss: t.provider_mean,
            train_loss: t.total,
            val_provider_loss: v.as_ref().map(|v| v.provider_mean),
            val_loss: v.as_ref().map(|v| v.total),
            mean_activation: has_filter.then(|| v.as_ref().map_or(t.mean_activation, |v| v.mean_activation)),
            best: false,
        })
    };
    let selection = |l: &BridgeEpochLog| l.val_loss.unwrap_or(l.train_loss);

    let mut log = vec![BridgeEpochLog { best: true, ..score(&model, 0)? }];
    let mut best_score = selection(&log[0]);
    let mut best_params = model.params.clone();

    for epoch in 1..=config.epochs {
        let mut shuffler = rng::stream(config.seed, rng::stream_id(&[b"bridge-epoch", &(epoch as u64).to_le_bytes()]));
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut shuffler);
        let micro: Vec<&[usize]> = order.chunks(config.micro_batch).collect();
        for (update, group) in micro.chunks(config.accumulation).enumerate() {
            let parts: Vec<Result<Objective, BridgeError>> = group
                .par_iter()
                .map(|ids| {
                    let refs: Vec<&[f64]> = ids.iter().map(|&i| train[i].as_slice()).collect();
                    objective(&model, &model.params, &refs, ids, provider, true)
                })
                .collect();
            let mut grad = vec![0.0; model.params.len()];
            let mut loss = 0.0;
            for p in parts {
                let o = p?;
                loss += o.total;
                for (g, x) in grad.iter_mut().zip(o.grad.expect("gradient requested")) {
                    *g += x;
                }
            }
            let k = group.len() as f64;
            grad.iter_mut().for_each(|g| *g /= k);
            if !loss.is_finite() || !linalg::all_finite(&grad) {
                return Err(BridgeError::Diverged { epoch, update });
            }
            opt.step(&mut model.params, &grad, frozen.as_deref());
        }
        let mut entry = score(&model, epoch)?;
        if !entry.train_loss.is_finite() {
            return Err(BridgeError::Diverged { epoch, update: micro.len().div_ceil(config.accumulation) });
        }
        let s = selection(&entry);
        if s < best_score {
            best_score = s;
            best_params.clone_from(&model.params);
            log.iter_mut().for_each(|l| l.best = false);
            entry.best = true;
        }
        log.push(entry);
    }
    model.params = best_params;
    model.training_log = log;
    Ok(model)
}

/// Max relative error of the analytic bridge gradient against central finite
/// differences on a small instance with strong reconstruction and sparsity terms.
pub fn bridge_gradient_check(seed: u64, eps: f64) -> f64 {
    let config = BridgeConfig {
        state_dim: 16,
        bottleneck: 8,
        projector_hidden: 10,
        token_dim: 12,
        alpha: 0.5,
        sparsity_weight: 0.5,
        micro_batch: 5,
        seed,
        ..BridgeConfig::default()
    };
    let mut model = BridgeModel::init(config.clone()).expect("valid config");
    let mut rng = rng::stream(seed, rng::stream_id(&[b"bridge-gradcheck"]));
    // move the filter bias off logit(rho) so the sparsity gradient is not ~0
    let fb = model.block("filter_b");
    for p in &mut model.params[fb.offset..fb.offset + fb.rows] {
        *p = rng.random_range(-1.5..1.5);
    }
    let states: Vec<Vec<f64>> = (0..config.micro_batch)
        .map(|_| linalg::normalized(&rng::gaussian_vec(&mut rng, config.state_dim, 1.0), 1e-12).expect("nonzero draw"))
        .collect();
    let provider = QuadraticAlignment { targets: (0..config.micro_batch).map(|_| rng::gaussian_vec(&mut rng, config.token_dim, 0.5)).collect() };
    let refs: Vec<&[f64]> = states.iter().map(Vec::as_slice).collect();
    let ids: Vec<usize> = (0..states.len()).collect();
    let eval = |p: &[f64], want: bool| objective(&model, p, &refs, &ids, &provider, want).expect("provider has every target");
    let grad = eval(&model.params, true).grad.expect("gradient requested");
    let mut params = model.params.clone();
    let mut worst: f64 = 0.0;
    for i in 0..params.len() {
        let orig = params[i];
        params[i] = orig + eps;
        let up = eval(&params, false).total;
        params[i] = orig - eps;
        let down = eval(&params, false).total;
        params[i] = orig;
        worst = worst.max(relative_error(grad[i], (up - down) / (2.0 * eps)));
    }
    worst
}
