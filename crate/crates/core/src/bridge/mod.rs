//! State-to-token bridge: a sigmoid bottleneck filter followed by a two-layer
//! projector that maps one state to one token embedding.

mod prompt;
mod train;

use std::path::Path;

use nalgebra::{DMatrix, DMatrixView, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::format::{Checkpoint, FormatError, Section};
use crate::linalg;
use crate::optim::AdamWConfig;
use crate::rng;

pub use prompt::{assemble_prompt, read_bundle, write_bundle, AssembledPrompt, InjectionBundle, DEFAULT_MARKER};
pub use train::{
    bridge_gradient_check, train_bridge, BridgeEpochLog, CosineAlignment, LossProvider, ProviderError, QuadraticAlignment,
};

pub const STB_ARCH: &str = "STB";
/// Sigmoid activations are clamped to `[ACT_CLAMP, 1 - ACT_CLAMP]` inside the KL term.
pub const ACT_CLAMP: f64 = 1e-7;

#[derive(Debug, Error)]
pub enum BridgeError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    Dimension { expected: usize, found: usize },
    #[error("bridge produced non-finite output; parameters are corrupt")]
    Corrupt,
    #[error("invalid bridge config: {0}")]
    Config(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("training set is empty")]
    EmptyDataset,
    #[error("loss provider failed on example {example}: {message}")]
    Provider { example: usize, message: String },
    #[error("non-finite loss at epoch {epoch}, update {update}")]
    Diverged { epoch: usize, update: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("bundle: {0}")]
    Bundle(String),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

impl BridgeError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io { path: path.display().to_string(), source }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterMode {
    Sigmoid,
    /// No bottleneck: the projector reads the state directly and there is no
    /// decoder or sparsity term.
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BridgeConfig {
    pub state_dim: usize,
    pub bottleneck: usize,
    pub projector_hidden: usize,
    pub token_dim: usize,
    pub filter: FilterMode,
    pub rho: f64,
    pub alpha: f64,
    pub sparsity_weight: f64,
    pub epochs: usize,
    pub micro_batch: usize,
    pub accumulation: usize,
    pub optimizer: AdamWConfig,
    pub seed: u64,
}

impl Default for BridgeConfig {
    fn default() -> Self {
        Self {
            state_dim: 1024,
            bottleneck: 512,
            projector_hidden: 1024,
            token_dim: 4096,
            filter: FilterMode::Sigmoid,
            rho: 0.05,
            alpha: 0.01,
            sparsity_weight: 1e-3,
            epochs: 6,
            micro_batch: 32,
            accumulation: 4,
            optimizer: AdamWConfig::default(),
            seed: 0,
        }
    }
}

impl BridgeConfig {
    pub fn validate(&self) -> Result<(), BridgeError> {
        let bad = |m: &str| Err(BridgeError::Config(m.to_string()));
        if self.state_dim == 0 || self.token_dim == 0 || self.projector_hidden == 0 {
            return bad("dimensions must be positive");
        }
        if self.filter == FilterMode::Sigmoid && (self.bottleneck == 0 || self.bottleneck >= self.state_dim) {
            return bad("bottleneck must be narrower than the state");
        }
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return bad("rho must lie in (0, 1)");
        }
        if self.alpha < 0.0 || self.sparsity_weight < 0.0 {
            return bad("loss weights must be non-negative");
        }
        if self.micro_batch == 0 || self.accumulation == 0 {
            return bad("micro_batch and accumulation must be positive");
        }
        Ok(())
    }

    fn projector_input(&self) -> usize {
        match self.filter {
            FilterMode::Sigmoid => self.bottleneck,
            FilterMode::None => self.state_dim,
        }
    }

    /// Parameter blocks as `(name, rows, cols)`; decoder blocks come last.
    pub(crate) fn shapes(&self) -> Vec<(&'static str, usize, usize)> {
        let (d, b, m, h) = (self.state_dim, self.bottleneck, self.projector_hidden, self.token_dim);
        let mut out = Vec::new();
        if self.filter == FilterMode::Sigmoid {
            out.extend([("filter_w", b, d), ("filter_b", b, 1)]);
        }
        out.extend([("proj1_w", m, self.projector_input()), ("proj1_b", m, 1), ("proj2_w", h, m), ("proj2_b", h, 1)]);
        if self.filter == FilterMode::Sigmoid {
            out.extend([("decoder_w", d, b), ("decoder_b", d, 1)]);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Block {
    pub name: &'static str,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BridgeModel {
    pub config: BridgeConfig,
    pub params: Vec<f64>,
    pub training_log: Vec<BridgeEpochLog>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenEmbedding {
    pub vector: Vec<f64>,
    pub state_hash: String,
    pub model_hash: String,
}

/// Intermediate activations of a batch, one column per example.
pub(crate) struct Activations {
    pub bottleneck: Option<DMatrix<f64>>,
    pub hidden: DMatrix<f64>,
    pub token: DMatrix<f64>,
}

fn add_bias(m: &mut DMatrix<f64>, bias: &DMatrixView<'_, f64>) {
    for mut col in m.column_iter_mut() {
        col += bias.column(0);
    }
}

pub(crate) fn hash_f64(values: &[f64]) -> String {
    let mut h = Sha256::new();
    for v in values {
        h.update(v.to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

impl BridgeModel {
    /// Seeded uniform `±1/sqrt(fan_in)` init. The filter bias starts at
    /// `logit(rho)` so activations begin near the sparsity target.
    pub fn init(config: BridgeConfig) -> Result<Self, BridgeError> {
        config.validate()?;
        let mut rng = rng::stream(config.seed, rng::stream_id(&[b"bridge-init"]));
        let mut params = Vec::new();
        for (name, rows, cols) in config.shapes() {
            let fan_in = match name {
                "filter_b" => config.state_dim,
                "proj1_b" => config.projector_input(),
                "proj2_b" => config.projector_hidden,
                "decoder_b" => config.bottleneck,
                _ => cols,
            };
            let bound = 1.0 / (fan_in as f64).sqrt();
            if name == "filter_b" {
                let logit = (config.rho / (1.0 - config.rho)).ln();
                params.extend(std::iter::repeat_n(logit, rows * cols));
            } else {
                params.extend((0..rows * cols).map(|_| rng.random_range(-bound..bound)));
            }
        }
        Ok(Self { config, params, training_log: Vec::new() })
    }

    pub(crate) fn blocks(&self) -> Vec<Block> {
        let mut offset = 0;
        self.config
            .shapes()
            .into_iter()
            .map(|(name, rows, cols)| {
                let b = Block { name, rows, cols, offset };
                offset += rows * cols;
                b
            })
            .collect()
    }

    pub(crate) fn block(&self, name: &str) -> Block {
        self.blocks().into_iter().find(|b| b.name == name).unwrap_or_else(|| panic!("no bridge block {name}"))
    }

    pub(crate) fn view_in<'a>(&self, params: &'a [f64], name: &str) -> DMatrixView<'a, f64> {
        let b = self.block(name);
        DMatrixView::from_slice(&params[b.offset..b.offset + b.rows * b.cols], b.rows, b.cols)
    }

    pub fn param_count(&self) -> usize {
        self.config.shapes().iter().map(|(_, r, c)| r * c).sum()
    }

    /// Mask of decoder parameters (frozen when `alpha == 0`).
    pub fn decoder_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.params.len()];
        for b in self.blocks().iter().filter(|b| b.name.starts_with("decoder")) {
            mask[b.offset..b.offset + b.rows * b.cols].iter_mut().for_each(|m| *m = true);
        }
        mask
    }

    pub fn model_hash(&self) -> String {
        hash_f64(&self.params)
    }

    pub(crate) fn activations(&self, params: &[f64], states: &DMatrix<f64>) -> Activations {
        let bottleneck = (self.config.filter == FilterMode::Sigmoid).then(|| {
            let mut a = self.view_in(params, "filter_w") * states;
            add_bias(&mut a, &self.view_in(params, "filter_b"));
            a.apply(|x| *x = 1.0 / (1.0 + (-*x).exp()));
            a
        });
        let input = bottleneck.as_ref().unwrap_or(states);
        let mut hidden = self.view_in(params, "proj1_w") * input;
        add_bias(&mut hidden, &self.view_in(params, "proj1_b"));
        hidden.apply(|x| *x = x.tanh());
        let mut token = self.view_in(params, "proj2_w") * &hidden;
        add_bias(&mut token, &self.view_in(params, "proj2_b"));
        Activations { bottleneck, hidden, token }
    }

    fn check_dim(&self, state: &[f64]) -> Result<(), BridgeError> {
        if state.len() != self.config.state_dim {
            return Err(BridgeError::Dimension { expected: self.config.state_dim, found: state.len() });
        }
        Ok(())
    }

    pub fn forward(&self, state: &[f64]) -> Result<TokenEmbedding, BridgeError> {
        self.check_dim(state)?;
        let x = DMatrix::from_column_slice(state.len(), 1, state);
        let act = self.activations(&self.params, &x);
        let vector: Vec<f64> = act.token.column(0).iter().copied().collect();
        if !linalg::all_finite(&vector) {
            return Err(BridgeError::Corrupt);
        }
        Ok(TokenEmbedding { vector, state_hash: hash_f64(state), model_hash: self.model_hash() })
    }

    /// Bottleneck activations of one state (`None` without a filter).
    pub fn bottleneck(&self, state: &[f64]) -> Result<Option<Vec<f64>>, BridgeError> {
        self.check_dim(state)?;
        let x = DMatrix::from_column_slice(state.len(), 1, state);
        Ok(self.activations(&self.params, &x).bottleneck.map(|a| a.column(0).iter().copied().collect()))
    }

    /// Decoder output and its mean squared error against the input.
    pub fn reconstruct(&self, state: &[f64]) -> Result<(Vec<f64>, f64), BridgeError> {
        self.check_dim(state)?;
        if self.config.filter == FilterMode::None {
            return Err(BridgeError::Config("no decoder without a filter".into()));
        }
        let a = DVector::from_vec(self.bottleneck(state)?.expect("filter present"));
        let recon = self.view_in(&self.params, "decoder_w") * a + self.view_in(&self.params, "decoder_b").column(0);
        let recon: Vec<f64> = recon.iter().copied().collect();
        let loss = reconstruction_loss(&recon, state);
        Ok((recon, loss))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let c = &self.config;
        let hyper = vec![
            ("state_dim".to_string(), c.state_dim as f64),
            ("bottleneck".to_string(), c.bottleneck as f64),
            ("projector_hidden".to_string(), c.projector_hidden as f64),
            ("token_dim".to_string(), c.token_dim as f64),
            ("filter".to_string(), if c.filter == FilterMode::Sigmoid { 1.0 } else { 0.0 }),
            ("rho".to_string(), c.rho),
            ("alpha".to_string(), c.alpha),
            ("sparsity_weight".to_string(), c.sparsity_weight),
            ("epochs".to_string(), c.epochs as f64),
            ("micro_batch".to_string(), c.micro_batch as f64),
            ("accumulation".to_string(), c.accumulation as f64),
            ("learning_rate".to_string(), c.optimizer.learning_rate),
            ("beta1".to_string(), c.optimizer.beta1),
            ("beta2".to_string(), c.optimizer.beta2),
            ("adam_eps".to_string(), c.optimizer.eps),
            ("weight_decay".to_string(), c.optimizer.weight_decay),
        ];
        let sections = self
            .blocks()
            .iter()
            .map(|b| Section { name: b.name.to_string(), shape: vec![b.rows, b.cols], data: self.params[b.offset..b.offset + b.rows * b.cols].to_vec() })
            .collect();
        let mut ckpt = Checkpoint { arch: STB_ARCH.to_string(), hyper, sections };
        ckpt.push_u64("seed", c.seed);
        ckpt
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, BridgeError> {
        if ckpt.arch != STB_ARCH {
            return Err(BridgeError::Checkpoint(format!("arch tag {:?}, expected {STB_ARCH}", ckpt.arch)));
        }
        let get = |k: &str| ckpt.hyper_value(k).ok_or_else(|| BridgeError::Checkpoint(format!("missing hyper {k}")));
        let config = BridgeConfig {
            state_dim: get("state_dim")? as usize,
            bottleneck: get("bottleneck")? as usize,
            projector_hidden: get("projector_hidden")? as usize,
            token_dim: get("token_dim")? as usize,
            filter: if get("filter")? == 1.0 { FilterMode::Sigmoid } else { FilterMode::None },
            rho: get("rho")?,
            alpha: get("alpha")?,
            sparsity_weight: get("sparsity_weight")?,
            epochs: get("epochs")? as usize,
            micro_batch: get("micro_batch")? as usize,
            accumulation: get("accumulation")? as usize,
            optimizer: AdamWConfig {
                learning_rate: get("learning_rate")?,
                beta1: get("beta1")?,
                beta2: get("beta2")?,
                eps: get("adam_eps")?,
                weight_decay: get("weight_decay")?,
            },
            seed: ckpt.u64_value("seed").ok_or_else(|| BridgeError::Checkpoint("missing hyper seed".into()))?,
        };
        config.validate()?;
        let mut params = Vec::new();
        for (name, rows, cols) in config.shapes() {
            let s = ckpt.section(name).ok_or_else(|| BridgeError::Checkpoint(format!("missing section {name}")))?;
            if s.shape != [rows, cols] {
                return Err(BridgeError::Checkpoint(format!("section {name} has shape {:?}, expected [{rows}, {cols}]", s.shape)));
            }
            params.extend_from_slice(&s.data);
        }
        if !linalg::all_finite(&params) {
            return Err(BridgeError::Corrupt);
        }
        Ok(Self { config, params, training_log: Vec::new() })
    }

    pub fn save(&self, path: &Path) -> Result<(), BridgeError> {
        std::fs::write(path, self.to_checkpoint().to_bytes()?).map_err(|e| BridgeError::io(path, e))?;
        let log = serde_json::to_vec_pretty(&self.training_log).expect("log serializes");
        std::fs::write(crate::forecast::log_sidecar(path), log).map_err(|e| BridgeError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, BridgeError> {
        let bytes = std::fs::read(path).map_err(|e| BridgeError::io(path, e))?;
        let mut model = Self::from_checkpoint(&Checkpoint::from_bytes(&bytes)?)?;
        if let Ok(log) = std::fs::read(crate::forecast::log_sidecar(path)) {
            model.training_log = serde_json::from_slice(&log).map_err(|e| BridgeError::Checkpoint(format!("training log: {e}")))?;
        }
        Ok(model)
    }
}

pub fn reconstruction_loss(reconstruction: &[f64], input: &[f64]) -> f64 {
    let diff = linalg::sub(reconstruction, input);
    linalg::dot(&diff, &diff) / input.len() as f64
}

/// Bernoulli KL between the target rate and each unit's batch-mean activation,
/// summed over units. `activations` is `units x batch`.
pub fn kl_sparsity(activations: &DMatrix<f64>, rho: f64) -> Result<f64, BridgeError> {
    if activations.ncols() == 0 {
        return Err(BridgeError::EmptyBatch);
    }
    Ok(batch_rates(activations).iter().map(|&r| bernoulli_kl(rho, r)).sum())
}

pub(crate) fn batch_rates(activations: &DMatrix<f64>) -> Vec<f64> {
    let n = activations.ncols() as f64;
    activations.row_iter().map(|row| row.iter().map(|a| a.clamp(ACT_CLAMP, 1.0 - ACT_CLAMP)).sum::<f64>() / n).collect()
}

pub(crate) fn bernoulli_kl(rho: f64, rate: f64) -> f64 {
    rho * (rho / rate).ln() + (1.0 - rho) * ((1.0 - rho) / (1.0 - rate)).ln()
}

#[cfg(test)]
mod tests;
