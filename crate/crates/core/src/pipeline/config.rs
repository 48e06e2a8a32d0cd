use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::anchor::AnchorParams;
use crate::bridge::{BridgeConfig, FilterMode, DEFAULT_MARKER};
use crate::corpus::{FilterConfig, SplitConfig};
use crate::diagnostics::DiagnosticsConfig;
use crate::driftlab::{AdditiveModelConfig, CrossoverGrid, DriftModelConfig};
use crate::forecast::{Arch, PredictorHyper};
use crate::optim::AdamWConfig;

/// What a forecast record holds: a predictor output, a static profile
/// baseline, or the true held-out state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum ForecastMode {
    Predictor(Arch),
    /// Mean of all earlier response embeddings.
    Static,
    /// Mean of the last `recent_k` response embeddings.
    Recent,
    /// Exponentially time-decayed mean of earlier response embeddings.
    Decayed,
    /// Unordered mean of the anchored states.
    Dep,
    Oracle,
}

impl ForecastMode {
    pub fn name(self) -> String {
        match self {
            ForecastMode::Predictor(a) => a.tag().to_string(),
            ForecastMode::Static => "static".into(),
            ForecastMode::Recent => "recent".into(),
            ForecastMode::Decayed => "decayed".into(),
            ForecastMode::Dep => "dep".into(),
            ForecastMode::Oracle => "oracle".into(),
        }
    }

    /// Profiles of raw embeddings live in embedding space; everything else
    /// lives in the anchored state space.
    pub fn in_embedding_space(self) -> bool {
        matches!(self, ForecastMode::Static | ForecastMode::Recent | ForecastMode::Decayed)
    }
}

impl fmt::Display for ForecastMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl TryFrom<String> for ForecastMode {
    type Error = String;

    fn try_from(s: String) -> Result<Self, String> {
        Ok(match s.as_str() {
            "static" => ForecastMode::Static,
            "recent" => ForecastMode::Recent,
            "decayed" => ForecastMode::Decayed,
            "dep" => ForecastMode::Dep,
            "oracle" => ForecastMode::Oracle,
            other => ForecastMode::Predictor(Arch::from_tag(other).ok_or_else(|| format!("unknown forecast mode `{other}`"))?),
        })
    }
}

impl From<ForecastMode> for String {
    fn from(m: ForecastMode) -> String {
        m.name()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataPaths {
    pub sessions: PathBuf,
    pub embeddings: PathBuf,
    /// Optional JSON-lines item metadata: `item`, `title`, `description`.
    #[serde(default)]
    pub items: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictorSection {
    pub arch: Arch,
    pub ema_beta: f64,
    pub lambda: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub hidden_size: usize,
    pub attention_size: usize,
    pub seed: u64,
}

impl Default for PredictorSection {
    fn default() -> Self {
        let h = PredictorHyper::default();
        Self {
            arch: Arch::Gru,
            ema_beta: h.ema_beta,
            lambda: h.lambda,
            learning_rate: h.optimizer.learning_rate,
            weight_decay: h.optimizer.weight_decay,
            epochs: h.epochs,
            batch_size: h.batch_size,
            hidden_size: h.hidden_size,
            attention_size: h.attention_size,
            seed: 0,
        }
    }
}

impl PredictorSection {
    pub fn hyper(&self) -> PredictorHyper {
        PredictorHyper {
            ema_beta: self.ema_beta,
            hidden_size: self.hidden_size,
            attention_size: self.attention_size,
            lambda: self.lambda,
            optimizer: AdamWConfig { learning_rate: self.learning_rate, weight_decay: self.weight_decay, ..AdamWConfig::default() },
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    Quadratic,
    Cosine,
}

/// Surrogate generation loss. Targets are a fixed random projection of the
/// true state at each training example's session, scaled to `target_scale`
/// per coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProviderSpec {
    pub kind: ProviderKind,
    pub target_scale: f64,
    pub seed: u64,
}

impl Default for ProviderSpec {
    fn default() -> Self {
        Self { kind: ProviderKind::Quadratic, target_scale: 0.02, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BridgeSection {
    /// Which forecast feeds the bridge and the emitted bundles.
    pub input: ForecastMode,
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
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub provider: ProviderSpec,
    pub seed: u64,
}

impl Default for BridgeSection {
    fn default() -> Self {
        let b = BridgeConfig::default();
        Self {
            input: ForecastMode::Predictor(Arch::Gru),
            bottleneck: b.bottleneck,
            projector_hidden: b.projector_hidden,
            token_dim: b.token_dim,
            filter: b.filter,
            rho: b.rho,
            alpha: b.alpha,
            sparsity_weight: b.sparsity_weight,
            epochs: b.epochs,
            micro_batch: b.micro_batch,
            accumulation: b.accumulation,
            learning_rate: b.optimizer.learning_rate,
            weight_decay: b.optimizer.weight_decay,
            provider: ProviderSpec::default(),
            seed: 0,
        }
    }
}

impl BridgeSection {
    pub fn bridge_config(&self, state_dim: usize) -> BridgeConfig {
        BridgeConfig {
            state_dim,
            bottleneck: self.bottleneck,
            projector_hidden: self.projector_hidden,
            token_dim: self.token_dim,
            filter: self.filter,
            rho: self.rho,
            alpha: self.alpha,
            sparsity_weight: self.sparsity_weight,
            epochs: self.epochs,
            micro_batch: self.micro_batch,
            accumulation: self.accumulation,
            optimizer: AdamWConfig { learning_rate: self.learning_rate, weight_decay: self.weight_decay, ..AdamWConfig::default() },
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ForecastSection {
    /// Modes evaluated by `forecast`. Learned architectures other than the
    /// trained one are rejected.
    pub modes: Vec<ForecastMode>,
    pub recent_k: usize,
    pub half_life_seconds: f64,
}

impl Default for ForecastSection {
    fn default() -> Self {
        let mut modes: Vec<ForecastMode> = [Arch::Last, Arch::Trend, Arch::Ema, Arch::Ols, Arch::Gru].into_iter().map(ForecastMode::Predictor).collect();
        modes.extend([ForecastMode::Static, ForecastMode::Recent, ForecastMode::Decayed, ForecastMode::Dep, ForecastMode::Oracle]);
        Self { modes, recent_k: 8, half_life_seconds: 30.0 * 86_400.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagnosticsSection {
    pub rank_sample: usize,
    pub pair_sample: usize,
    pub collapse_users: usize,
    pub seed: u64,
    /// Forecast mode whose test predictions feed the rank and collapse checks.
    pub predictions: ForecastMode,
    /// Optional externally generated texts (JSON-lines `id`, `text`) scored
    /// against `references` with ROUGE and against peer texts for copying.
    pub candidates: Option<PathBuf>,
    pub references: Option<PathBuf>,
    pub ngram: usize,
}

impl Default for DiagnosticsSection {
    fn default() -> Self {
        let d = DiagnosticsConfig::default();
        Self {
            rank_sample: d.rank_sample,
            pair_sample: d.pair_sample,
            collapse_users: d.collapse_users,
            seed: d.seed,
            predictions: ForecastMode::Predictor(Arch::Gru),
            candidates: None,
            references: None,
            ngram: 8,
        }
    }
}

impl DiagnosticsSection {
    pub fn config(&self) -> DiagnosticsConfig {
        DiagnosticsConfig { rank_sample: self.rank_sample, pair_sample: self.pair_sample, collapse_users: self.collapse_users, seed: self.seed }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateSection {
    pub anchoring: AdditiveModelConfig,
    pub drift: DriftModelConfig,
    pub crossover: CrossoverGrid,
}

impl Default for SimulateSection {
    fn default() -> Self {
        Self { anchoring: AdditiveModelConfig::default(), drift: DriftModelConfig::default(), crossover: CrossoverGrid::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmitSection {
    pub marker: String,
}

impl Default for EmitSection {
    fn default() -> Self {
        Self { marker: DEFAULT_MARKER.to_string() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    pub data: Option<DataPaths>,
    /// Record embedding reads per stage and check them against held-out rows.
    pub audit: bool,
    pub anchor: AnchorParams,
    pub filters: FilterConfig,
    pub split: SplitConfig,
    pub predictor: PredictorSection,
    pub forecast: ForecastSection,
    pub bridge: BridgeSection,
    pub emit: EmitSection,
    pub diagnostics: DiagnosticsSection,
    pub simulate: SimulateSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("latte-out"),
            data: None,
            audit: true,
            anchor: AnchorParams::default(),
            filters: FilterConfig::default(),
            split: SplitConfig::default(),
            predictor: PredictorSection::default(),
            forecast: ForecastSection::default(),
            bridge: BridgeSection::default(),
            emit: EmitSection::default(),
            diagnostics: DiagnosticsSection::default(),
            simulate: SimulateSection::default(),
        }
    }
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, PipelineError> {
        serde_json::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))
    }

    /// Reads a config file; relative paths inside it resolve against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(|e| PipelineError::Input(format!("{}: {e}", path.display())))?;
        let mut config = Self::from_json(&text).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        let parent = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        let base = &std::fs::canonicalize(parent).map_err(|e| PipelineError::Input(format!("{}: {e}", parent.display())))?;
        resolve(base, &mut config.output_dir);
        if let Some(d) = &mut config.data {
            resolve(base, &mut d.sessions);
            resolve(base, &mut d.embeddings);
            if let Some(i) = &mut d.items {
                resolve(base, i);
            }
        }
        for p in [&mut config.diagnostics.candidates, &mut config.diagnostics.references].into_iter().flatten() {
            resolve(base, p);
        }
        Ok(config)
    }

    /// Applies one seed to every seeded component.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.anchor.peer_seed = seed;
        self.predictor.seed = seed;
        self.bridge.seed = seed;
        self.bridge.provider.seed = seed;
        self.diagnostics.seed = seed;
        self.simulate.anchoring.seed = seed;
        self.simulate.drift.seed = seed;
        self.simulate.crossover.seed = seed;
        self
    }

    pub fn data(&self) -> Result<&DataPaths, PipelineError> {
        self.data.as_ref().ok_or_else(|| PipelineError::Config("this command needs a `data` section with sessions and embeddings paths".into()))
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        let a = &self.anchor;
        if a.m == 0 || !(a.gamma >= 0.0 && a.gamma.is_finite()) || !(a.eps >= 0.0) {
            return bad("anchor: m must be positive, gamma and eps finite and non-negative".into());
        }
        let p = &self.predictor;
        if p.epochs == 0 || p.batch_size == 0 || p.hidden_size == 0 || p.attention_size == 0 {
            return bad("predictor: epochs, batch_size, hidden_size and attention_size must be positive".into());
        }
        if !(p.ema_beta > 0.0 && p.ema_beta <= 1.0) || !(p.lambda >= 0.0) || !(p.learning_rate > 0.0) {
            return bad("predictor: ema_beta must lie in (0, 1], lambda >= 0, learning_rate > 0".into());
        }
        for m in &self.forecast.modes {
            if let ForecastMode::Predictor(arch) = m {
                if arch.is_learned() && *arch != p.arch {
                    return bad(format!("forecast: mode {arch:?} needs a trained {} model but predictor.arch is {}", arch.tag(), p.arch.tag()));
                }
            }
        }
        // membership in forecast.modes is checked by the consuming stage, so a
        // forecast run narrowed to one mode still validates
        for (what, m) in [("bridge.input", self.bridge.input), ("diagnostics.predictions", self.diagnostics.predictions)] {
            if m.in_embedding_space() || m == ForecastMode::Oracle {
                return bad(format!("{what} must be a state-space forecast, got {m}"));
            }
        }
        if self.forecast.recent_k == 0 || !(self.forecast.half_life_seconds > 0.0) {
            return bad("forecast: recent_k and half_life_seconds must be positive".into());
        }
        // state_dim is only known after ingest; check the rest with a placeholder width
        let probe = self.bridge.bridge_config(self.bridge.bottleneck.max(1) + 1);
        probe.validate().map_err(|e| PipelineError::Config(format!("bridge: {e}")))?;
        if !(self.bridge.provider.target_scale > 0.0) {
            return bad("bridge.provider.target_scale must be positive".into());
        }
        if self.emit.marker.is_empty() {
            return bad("emit.marker must be non-empty".into());
        }
        if self.diagnostics.ngram == 0 || self.diagnostics.collapse_users < 2 || self.diagnostics.rank_sample < 2 {
            return bad("diagnostics: ngram must be positive, rank_sample and collapse_users at least 2".into());
        }
        if self.diagnostics.candidates.is_some() != self.diagnostics.references.is_some() {
            return bad("diagnostics: candidates and references go together".into());
        }
        self.simulate.drift.validate().map_err(|e| PipelineError::Config(format!("simulate.drift: {e}")))?;
        Ok(())
    }
}
