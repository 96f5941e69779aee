use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;
mod config;
mod output;

use config::ExperimentConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] augoverlap::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        use augoverlap::Error as E;
        match self {
            CliError::Config(_) => 2,
            CliError::Core(E::Divergence { .. }) => 3,
            CliError::Core(E::InvalidArgument(_) | E::Parse(_) | E::Json(_) | E::CapTooSmall(_)) => 2,
            CliError::Core(_) | CliError::Io(_) => 1,
        }
    }
}

#[derive(Parser)]
#[command(name = "augoverlap", version, about = "Augmentation-overlap experiments on hyperspheres")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// JSON experiment config.
    #[arg(long, global = true, conflicts_with = "preset")]
    config: Option<PathBuf>,

    /// Built-in config: paper_synthetic, fig12_sweep, bounds_M_sweep or scaling_d2.
    #[arg(long, global = true)]
    preset: Option<String>,

    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory; overrides `output.dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Build the augmentation graph and export edges, components and statistics.
    SimulateGraph,
    /// Train an encoder; write checkpoint, trace and feature dumps.
    Train,
    /// Train across strengths and report probe accuracy, ACR and diameter.
    Sweep,
    /// Evaluate the downstream bounds for random, trained and constant encoders.
    Bounds,
    /// ACR/ARC on imported feature dumps or over the strength sweep.
    Metrics,
    /// Connectivity thresholds c_N and d_N against N.
    Scaling,
    /// Linear probe on class-uniform features.
    Counterexample,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let base = match (&cli.config, &cli.preset) {
        (Some(path), _) => ExperimentConfig::load(path)?,
        (None, Some(name)) => ExperimentConfig::preset(name)?,
        (None, None) => ExperimentConfig::default(),
    };
    let cfg = base.resolve(cli.seed, cli.out)?;
    let out = output::OutDir::create(&cfg.output.dir)?;
    out.write_json("resolved_config.json", &cfg)?;
    match cli.command {
        Command::SimulateGraph => commands::simulate_graph(&cfg, &out),
        Command::Train => commands::train(&cfg, &out),
        Command::Sweep => commands::sweep(&cfg, &out),
        Command::Bounds => commands::bounds(&cfg, &out),
        Command::Metrics => commands::metrics(&cfg, &out),
        Command::Scaling => commands::scaling(&cfg, &out),
        Command::Counterexample => commands::counterexample(&cfg, &out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
