//! Stage orchestration behind the `latte` command: one output directory,
//! one subdirectory per stage, each with a manifest of input and output
//! content hashes.

mod config;
mod stages;

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use config::{
    BridgeSection, DataPaths, DiagnosticsSection, EmitSection, ForecastMode, ForecastSection, PredictorSection, ProviderKind, ProviderSpec, RunConfig,
    SimulateSection,
};
pub use stages::{write_items, ForecastRecord, ForecastSummary, ModeSummary, SimulateReport, TargetKind, TruthRecord, CROSSOVER_AGREEMENT};

pub const LOCK_FILE: &str = ".latte.lock";
pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error("input: {0}")]
    Input(String),
    #[error("`{stage}` needs the outputs of `{needs}`; run `latte {needs} --config <path>` first")]
    MissingStage { stage: &'static str, needs: &'static str },
    #[error("outputs of `{needs}` are stale ({reason}); rerun `latte {needs} --config <path>`")]
    Stale { needs: &'static str, reason: String },
    #[error("{0} exists: another run is writing to this output directory (delete the file if no run is active)")]
    Locked(PathBuf),
    #[error("oracle failure: {0}")]
    OracleFailed(String),
    #[error("{0}")]
    Internal(String),
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

impl PipelineError {
    /// 0 success, 1 internal, 2 input validation, 3 missing dependency stage.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) | PipelineError::Input(_) => 2,
            PipelineError::MissingStage { .. } | PipelineError::Stale { .. } => 3,
            PipelineError::Locked(_) | PipelineError::OracleFailed(_) | PipelineError::Internal(_) | PipelineError::Io { .. } => 1,
        }
    }

    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io { path: path.display().to_string(), source }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Ingest,
    BuildStates,
    TrainPredictor,
    Forecast,
    TrainBridge,
    Emit,
    Diagnose,
    Simulate,
}

impl Stage {
    pub const ALL: [Stage; 8] =
        [Stage::Ingest, Stage::BuildStates, Stage::TrainPredictor, Stage::Forecast, Stage::TrainBridge, Stage::Emit, Stage::Diagnose, Stage::Simulate];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::BuildStates => "build-states",
            Stage::TrainPredictor => "train-predictor",
            Stage::Forecast => "forecast",
            Stage::TrainBridge => "train-bridge",
            Stage::Emit => "emit",
            Stage::Diagnose => "diagnose",
            Stage::Simulate => "simulate",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|s| s.name() == name)
    }

    /// Subdirectory of the output directory.
    pub fn dir(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::BuildStates => "states",
            Stage::TrainPredictor => "predictor",
            Stage::Forecast => "forecast",
            Stage::TrainBridge => "bridge",
            Stage::Emit => "emit",
            Stage::Diagnose => "diagnostics",
            Stage::Simulate => "simulate",
        }
    }

    /// Upstream stages whose outputs this stage reads.
    pub fn dependencies(self, config: &RunConfig) -> Vec<Stage> {
        match self {
            Stage::Ingest | Stage::Simulate => vec![],
            Stage::BuildStates => vec![Stage::Ingest],
            Stage::TrainPredictor => vec![Stage::Ingest, Stage::BuildStates],
            Stage::Forecast => {
                let mut deps = vec![Stage::Ingest, Stage::BuildStates];
                if config.forecast.modes.iter().any(|m| matches!(m, ForecastMode::Predictor(a) if a.is_learned())) {
                    deps.push(Stage::TrainPredictor);
                }
                deps
            }
            Stage::TrainBridge => vec![Stage::Ingest, Stage::Forecast],
            Stage::Emit => vec![Stage::Ingest, Stage::Forecast, Stage::TrainBridge],
            Stage::Diagnose => vec![Stage::Ingest, Stage::BuildStates, Stage::Forecast],
        }
    }

    /// Serialized config sections that determine this stage's outputs.
    fn config_fingerprint(self, config: &RunConfig) -> String {
        let v = match self {
            Stage::Ingest => serde_json::json!({ "data": config.data, "filters": config.filters, "split": config.split, "anchor": config.anchor }),
            Stage::BuildStates => serde_json::json!({ "anchor": config.anchor, "audit": config.audit }),
            Stage::TrainPredictor => serde_json::json!({ "predictor": config.predictor }),
            Stage::Forecast => serde_json::json!({ "forecast": config.forecast, "predictor": config.predictor }),
            Stage::TrainBridge => serde_json::json!({ "bridge": config.bridge }),
            Stage::Emit => serde_json::json!({ "emit": config.emit, "bridge_input": config.bridge.input }),
            Stage::Diagnose => serde_json::json!({ "diagnostics": config.diagnostics }),
            Stage::Simulate => serde_json::json!({ "simulate": config.simulate }),
        };
        sha256_hex(v.to_string().as_bytes())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn file_hash(path: &Path) -> Result<String, PipelineError> {
    let bytes = fs::read(path).map_err(|e| PipelineError::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HashedFile {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub stage: Stage,
    pub config_sha256: String,
    /// Files read, by role. Paths are as given in the config (data files) or
    /// relative to the output directory (upstream artifacts).
    pub inputs: BTreeMap<String, HashedFile>,
    /// Files written, relative to the stage directory.
    pub outputs: BTreeMap<String, String>,
}

/// What a stage run reports back to the caller.
#[derive(Debug, Clone, PartialEq)]
pub struct StageOutcome {
    pub stage: Stage,
    /// One human-readable line with the headline counts.
    pub summary: String,
    pub outputs: Vec<PathBuf>,
}

/// Holds `<out>/.latte.lock` for the lifetime of a run.
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(output_dir: &Path) -> Result<Self, PipelineError> {
        fs::create_dir_all(output_dir).map_err(|e| PipelineError::io(output_dir, e))?;
        let path = output_dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(PipelineError::Locked(path)),
            Err(e) => Err(PipelineError::io(&path, e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Read and write access to one run's output directory.
pub(crate) struct Workspace<'a> {
    pub config: &'a RunConfig,
    pub root: &'a Path,
}

impl<'a> Workspace<'a> {
    pub fn stage_dir(&self, stage: Stage) -> PathBuf {
        self.root.join(stage.dir())
    }

    pub fn artifact(&self, stage: Stage, name: &str) -> PathBuf {
        self.stage_dir(stage).join(name)
    }

    fn read_manifest(&self, stage: Stage) -> Option<Manifest> {
        let text = fs::read_to_string(self.artifact(stage, MANIFEST)).ok()?;
        serde_json::from_str(&text).ok()
    }

    /// Checks that `dep` ran, that its outputs are untouched, that its
    /// inputs have not changed since, and that its config section matches.
    pub fn check_dependency(&self, stage: Stage, dep: Stage) -> Result<(), PipelineError> {
        let manifest = self.read_manifest(dep).ok_or(PipelineError::MissingStage { stage: stage.name(), needs: dep.name() })?;
        let stale = |reason: String| PipelineError::Stale { needs: dep.name(), reason };
        if manifest.config_sha256 != dep.config_fingerprint(self.config) {
            return Err(stale("its config section changed".into()));
        }
        for (name, hash) in &manifest.outputs {
            let path = self.artifact(dep, name);
            match file_hash(&path) {
                Ok(h) if &h == hash => {}
                Ok(_) => return Err(stale(format!("{} was modified", path.display()))),
                Err(_) => return Err(stale(format!("{} is missing", path.display()))),
            }
        }
        for (role, input) in &manifest.inputs {
            let path = self.resolve_input(&input.path);
            match file_hash(&path) {
                Ok(h) if h == input.sha256 => {}
                _ => return Err(stale(format!("input {role} ({}) changed", path.display()))),
            }
        }
        Ok(())
    }

    fn resolve_input(&self, path: &str) -> PathBuf {
        let p = Path::new(path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    /// Records an input for the manifest. Paths inside the output directory
    /// are stored relative to it.
    pub fn hashed_input(&self, path: &Path) -> Result<HashedFile, PipelineError> {
        let shown = path.strip_prefix(self.root).map(|p| p.to_string_lossy().into_owned()).unwrap_or_else(|_| path.to_string_lossy().into_owned());
        Ok(HashedFile { path: shown, sha256: file_hash(path)? })
    }
}

/// Collects a stage's outputs as they are written.
pub(crate) struct StageWriter {
    stage: Stage,
    dir: PathBuf,
    inputs: BTreeMap<String, HashedFile>,
    outputs: BTreeMap<String, String>,
}

impl StageWriter {
    pub fn new(ws: &Workspace<'_>, stage: Stage) -> Result<Self, PipelineError> {
        let dir = ws.stage_dir(stage);
        // drop artifacts of earlier runs so the manifest covers the whole directory
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| PipelineError::io(&dir, e))?;
        }
        fs::create_dir_all(&dir).map_err(|e| PipelineError::io(&dir, e))?;
        Ok(Self { stage, dir, inputs: BTreeMap::new(), outputs: BTreeMap::new() })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn input(&mut self, role: &str, file: HashedFile) {
        self.inputs.insert(role.to_string(), file);
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf, PipelineError> {
        let path = self.path(name);
        fs::write(&path, bytes).map_err(|e| PipelineError::io(&path, e))?;
        self.outputs.insert(name.to_string(), sha256_hex(bytes));
        Ok(path)
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<PathBuf, PipelineError> {
        let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| PipelineError::Internal(format!("serializing {name}: {e}")))?;
        bytes.push(b'\n');
        self.write(name, &bytes)
    }

    /// Registers a file some other writer already produced.
    pub fn adopt(&mut self, name: &str) -> Result<PathBuf, PipelineError> {
        let path = self.path(name);
        self.outputs.insert(name.to_string(), file_hash(&path)?);
        Ok(path)
    }

    pub fn finish(self, ws: &Workspace<'_>, summary: String) -> Result<StageOutcome, PipelineError> {
        let manifest = Manifest { stage: self.stage, config_sha256: self.stage.config_fingerprint(ws.config), inputs: self.inputs, outputs: self.outputs };
        let mut outputs: Vec<PathBuf> = manifest.outputs.keys().map(|k| self.dir.join(k)).collect();
        let bytes = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
        let path = self.dir.join(MANIFEST);
        fs::write(&path, bytes).map_err(|e| PipelineError::io(&path, e))?;
        outputs.push(path);
        Ok(StageOutcome { stage: self.stage, summary, outputs })
    }
}

/// The steps a stage would take, without touching the filesystem.
pub fn plan(stage: Stage, config: &RunConfig) -> Result<Vec<String>, PipelineError> {
    config.validate()?;
    if stage != Stage::Simulate {
        config.data()?;
    }
    let out = config.output_dir.join(stage.dir());
    let mut lines = vec![format!("stage {} -> {}", stage.name(), out.display())];
    for dep in stage.dependencies(config) {
        lines.push(format!("  requires {} ({})", dep.name(), config.output_dir.join(dep.dir()).join(MANIFEST).display()));
    }
    for step in stages::steps(stage, config) {
        lines.push(format!("  {step}"));
    }
    Ok(lines)
}

/// Validates the config, takes the output lock, checks upstream manifests
/// and runs one stage.
pub fn run_stage(stage: Stage, config: &RunConfig) -> Result<StageOutcome, PipelineError> {
    config.validate()?;
    let _lock = RunLock::acquire(&config.output_dir)?;
    let ws = Workspace { config, root: &config.output_dir };
    for dep in stage.dependencies(config) {
        ws.check_dependency(stage, dep)?;
    }
    match stage {
        Stage::Ingest => stages::ingest(&ws),
        Stage::BuildStates => stages::build_states(&ws),
        Stage::TrainPredictor => stages::train_predictor(&ws),
        Stage::Forecast => stages::forecast(&ws),
        Stage::TrainBridge => stages::train_bridge(&ws),
        Stage::Emit => stages::emit(&ws),
        Stage::Diagnose => stages::diagnose(&ws),
        Stage::Simulate => stages::simulate(&ws),
    }
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, PipelineError> {
    let file = File::open(path).map_err(|e| PipelineError::io(path, e))?;
    serde_json::from_reader(std::io::BufReader::new(file)).map_err(|e| PipelineError::Internal(format!("{}: {e}", path.display())))
}
