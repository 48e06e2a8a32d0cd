//! The `latte` command line: argument parsing, thread setup and exit codes
//! around [`latte_core::pipeline`].

pub mod fixture;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use latte_core::pipeline::{self, ForecastMode, PipelineError, RunConfig, Stage};

#[derive(Debug, Parser)]
#[command(name = "latte", version, about = "Peer-anchored preference trajectories: states, forecasts, bridge bundles and diagnostics")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON run configuration.
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides every seed in the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Validate the config and print the plan without writing anything.
    #[arg(long)]
    pub dry_run: bool,
}

#[derive(Debug, Args)]
pub struct ForecastArgs {
    #[command(flatten)]
    pub common: Common,
    /// Evaluate only this mode (P0..P4, OLS, static, recent, decayed, dep, oracle).
    #[arg(long)]
    pub arch: Option<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate sessions and embeddings, filter users, assign splits.
    Ingest(Common),
    /// Build anchored state trajectories from non-held-out sessions.
    BuildStates(Common),
    /// Train the configured forecaster on rolling pairs.
    TrainPredictor(Common),
    /// Forecast held-out states with predictors, baselines and the oracle.
    Forecast(ForecastArgs),
    /// Train the state-to-token bridge on forecast states.
    TrainBridge(Common),
    /// Write one prompt-injection bundle per user.
    Emit(Common),
    /// Representation and leakage diagnostics.
    Diagnose(Common),
    /// Run the synthetic oracles; exits 1 if any fails.
    Simulate(Common),
}

impl Command {
    fn parts(&self) -> (Stage, &Common) {
        match self {
            Command::Ingest(c) => (Stage::Ingest, c),
            Command::BuildStates(c) => (Stage::BuildStates, c),
            Command::TrainPredictor(c) => (Stage::TrainPredictor, c),
            Command::Forecast(f) => (Stage::Forecast, &f.common),
            Command::TrainBridge(c) => (Stage::TrainBridge, c),
            Command::Emit(c) => (Stage::Emit, c),
            Command::Diagnose(c) => (Stage::Diagnose, c),
            Command::Simulate(c) => (Stage::Simulate, c),
        }
    }
}

/// Caps the global rayon pool at `LATTE_THREADS` when set.
fn configure_threads() -> Result<(), PipelineError> {
    let Ok(value) = std::env::var("LATTE_THREADS") else { return Ok(()) };
    let n: usize = value.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| PipelineError::Config(format!("LATTE_THREADS must be a positive integer, got `{value}`")))?;
    // a second call in one process finds the pool already built; keep it
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn load_config(cli: &Cli) -> Result<(Stage, RunConfig, bool), PipelineError> {
    let (stage, common) = cli.command.parts();
    let mut config = RunConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        config = config.with_seed(seed);
    }
    if let Command::Forecast(ForecastArgs { arch: Some(arch), .. }) = &cli.command {
        let mode = ForecastMode::try_from(arch.clone()).map_err(PipelineError::Config)?;
        config.forecast.modes = vec![mode];
        if let ForecastMode::Predictor(a) = mode {
            if a.is_learned() {
                config.predictor.arch = a;
            }
        }
    }
    Ok((stage, config, common.dry_run))
}

fn execute(cli: &Cli) -> Result<Vec<String>, PipelineError> {
    configure_threads()?;
    let (stage, config, dry_run) = load_config(cli)?;
    if dry_run {
        return pipeline::plan(stage, &config);
    }
    let outcome = pipeline::run_stage(stage, &config)?;
    Ok(vec![outcome.summary])
}

/// Parses `args` (including the program name), runs one command and
/// returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(lines) => {
            for line in lines {
                println!("{line}");
            }
            0
        }
        Err(e) => {
            eprintln!("latte: error: {e}");
            e.exit_code()
        }
    }
}
