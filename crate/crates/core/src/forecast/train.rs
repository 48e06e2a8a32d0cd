use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::nets::{self, ParamLayout};
use super::{Arch, ForecastError, PredictorHyper, PredictorModel};
use crate::linalg;
use crate::optim::AdamW;
use crate::rng;

/// Learned predictors train on prefixes of at least this many states.
pub const MIN_PREFIX_STATES: usize = 4;

/// Examples per parallel work unit. Fixed so the reduction order, and hence
/// the summed gradient, does not depend on the thread count.
const CHUNK: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub prefix: Vec<Vec<f64>>,
    pub target: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    /// Epoch 0 is the untrained initialization.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_cosine: Option<f64>,
    pub best: bool,
}

fn buckets(pairs: &[TrainingPair]) -> BTreeMap<usize, Vec<usize>> {
    let mut out: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, p) in pairs.iter().enumerate() {
        out.entry(p.prefix.len()).or_default().push(i);
    }
    out
}

struct ChunkResult {
    loss: f64,
    cosine: f64,
    grad: Option<Vec<f64>>,
}

fn run_chunk(arch: Arch, layout: &ParamLayout, params: &[f64], pairs: &[TrainingPair], idx: &[usize], lambda: f64, want_grad: bool) -> ChunkResult {
    let prefixes: Vec<&[Vec<f64>]> = idx.iter().map(|&i| pairs[i].prefix.as_slice()).collect();
    let targets: Vec<&[f64]> = idx.iter().map(|&i| pairs[i].target.as_slice()).collect();
    let steps = nets::stack_steps(&prefixes);
    let target_m = nets::stack_columns(&targets);
    let (loss, grad) = nets::loss_and_grad(arch, layout, params, &steps, &target_m, lambda, want_grad);
    let cosine = if want_grad {
        0.0
    } else {
        let out = nets::forward(arch, layout, params, &steps);
        (0..idx.len()).map(|j| linalg::cosine(out.column(j).as_slice(), targets[j])).sum()
    };
    ChunkResult { loss, cosine, grad }
}

/// Sums over `idx` in fixed-size chunks evaluated in parallel and reduced in order.
fn reduce(arch: Arch, layout: &ParamLayout, params: &[f64], pairs: &[TrainingPair], idx: &[usize], lambda: f64, want_grad: bool) -> ChunkResult {
    let parts: Vec<ChunkResult> = idx
        .par_chunks(CHUNK)
        .map(|c| run_chunk(arch, layout, params, pairs, c, lambda, want_grad))
        .collect();
    let mut total = ChunkResult { loss: 0.0, cosine: 0.0, grad: want_grad.then(|| vec![0.0; layout.total]) };
    for p in parts {
        total.loss += p.loss;
        total.cosine += p.cosine;
        if let (Some(acc), Some(g)) = (total.grad.as_mut(), p.grad) {
            for (a, x) in acc.iter_mut().zip(&g) {
                *a += x;
            }
        }
    }
    total
}

/// Mean loss and mean cosine of the raw output over a dataset.
fn evaluate(arch: Arch, layout: &ParamLayout, params: &[f64], pairs: &[TrainingPair], lambda: f64) -> (f64, f64) {
    let (mut loss, mut cos) = (0.0, 0.0);
    for idx in buckets(pairs).values() {
        let r = reduce(arch, layout, params, pairs, idx, lambda, false);
        loss += r.loss;
        cos += r.cosine;
    }
    (loss / pairs.len() as f64, cos / pairs.len() as f64)
}

fn check_pairs(pairs: &[TrainingPair], dim: usize) -> Result<(), ForecastError> {
    for p in pairs {
        if p.prefix.len() < MIN_PREFIX_STATES {
            return Err(ForecastError::TooFewStates { arch: Arch::Gru, need: MIN_PREFIX_STATES, got: p.prefix.len() });
        }
        if let Some(bad) = p.prefix.iter().chain(std::iter::once(&p.target)).find(|v| v.len() != dim) {
            return Err(ForecastError::Dimension { expected: dim, found: bad.len() });
        }
    }
    Ok(())
}

/// Trains P3 or P4 with minibatch AdamW and returns the parameters from the
/// epoch with the lowest validation loss (training loss if `val` is empty).
pub fn train_predictor(train: &[TrainingPair], val: &[TrainingPair], arch: Arch, hyper: &PredictorHyper) -> Result<PredictorModel, ForecastError> {
    if !arch.is_learned() {
        return Err(ForecastError::NotLearned(arch));
    }
    let dim = train.first().ok_or(ForecastError::EmptyDataset)?.target.len();
    check_pairs(train, dim)?;
    check_pairs(val, dim)?;
    if hyper.batch_size == 0 {
        return Err(ForecastError::Checkpoint("batch_size must be positive".into()));
    }

    let mut model = PredictorModel::init(arch, dim, hyper.clone());
    let layout = model.layout().expect("learned arch");
    let mut opt = AdamW::new(hyper.optimizer, layout.total);
    let train_buckets = buckets(train);

    let score = |params: &[f64]| -> EpochLog {
        let (train_loss, _) = evaluate(arch, &layout, params, train, hyper.lambda);
        let (val_loss, val_cosine) = if val.is_empty() {
            (None, None)
        } else {
            let (l, c) = evaluate(arch, &layout, params, val, hyper.lambda);
            (Some(l), Some(c))
        };
        EpochLog { epoch: 0, train_loss, val_loss, val_cosine, best: false }
    };
    let selection = |log: &EpochLog| log.val_loss.unwrap_or(log.train_loss);

    let mut log = vec![EpochLog { best: true, ..score(&model.params) }];
    let mut best_params = model.params.clone();
    let mut best_score = selection(&log[0]);

    for epoch in 1..=hyper.epochs {
        let mut shuffler = rng::stream(hyper.seed, rng::stream_id(&[b"predictor-epoch", arch.tag().as_bytes(), &(epoch as u64).to_le_bytes()]));
        let mut batches: Vec<Vec<usize>> = Vec::new();
        for idx in train_buckets.values() {
            let mut idx = idx.clone();
            idx.shuffle(&mut shuffler);
            batches.extend(idx.chunks(hyper.batch_size).map(<[usize]>::to_vec));
        }
        batches.shuffle(&mut shuffler);

        for (b, batch) in batches.iter().enumerate() {
            let r = reduce(arch, &layout, &model.params, train, batch, hyper.lambda, true);
            let n = batch.len() as f64;
            let mut grad = r.grad.expect("gradient requested");
            grad.iter_mut().for_each(|g| *g /= n);
            if !r.loss.is_finite() || !linalg::all_finite(&grad) {
                let bad_block = layout
                    .blocks
                    .iter()
                    .find(|bl| !linalg::all_finite(&grad[bl.offset..bl.offset + bl.rows * bl.cols]))
                    .map_or("none", |bl| bl.name);
                return Err(ForecastError::Diverged {
                    epoch,
                    batch: b,
                    detail: format!("batch loss {}, first non-finite gradient block {bad_block}, batch size {}", r.loss / n, batch.len()),
                });
            }
            opt.step(&mut model.params, &grad, None);
        }

        let mut entry = score(&model.params);
        entry.epoch = epoch;
        if !entry.train_loss.is_finite() {
            return Err(ForecastError::Diverged { epoch, batch: batches.len(), detail: "non-finite training loss after epoch".into() });
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
