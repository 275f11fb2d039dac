//! Command-line driver: config ingestion, experiment orchestration, and
//! CSV artifact emission.
//!
//! Exit codes: 0 success, 1 configuration problem, 2 numerical failure,
//! 3 I/O failure. `MFG_LQG_THREADS` caps worker threads.

mod commands;
mod manifest;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Debug, Parser)]
#[command(
    name = "mfg-lqg",
    version,
    about = "Solvers and simulators for linear-quadratic mean field games with regime-switching common noise"
)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args, Clone)]
struct GlobalArgs {
    /// Model configuration file (.json or .toml)
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed for all random streams
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Output directory
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Override the grid step (n_steps becomes round(T / dt))
    #[arg(long, global = true)]
    dt: Option<f64>,
    /// Backward integrator
    #[arg(long, global = true, default_value = "rk4")]
    scheme: String,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Solve the mean-field Riccati system and write trajectory CSVs
    SolveMfg {
        /// Replace the running-cost weights (comma-separated, one per state);
        /// skips the positivity requirement for blow-up experiments
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        override_h: Option<Vec<f64>>,
        /// Replace the terminal-cost weights, same semantics
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        override_g: Option<Vec<f64>>,
    },
    /// Solve the N-player systems (reduced always; --full adds the
    /// matrix oracle and the pattern report)
    SolveNplayer {
        #[arg(short = 'N', long = "players")]
        players: usize,
        /// Also integrate the full matrix system and verify the pattern
        #[arg(long)]
        full: bool,
        /// Probe times for the dense matrix dump (comma-separated)
        #[arg(long, value_delimiter = ',', num_args = 0.., default_value = "1.0")]
        probe_times: Vec<f64>,
        /// Player-count cap for the full solve
        #[arg(long, default_value_t = mfg_lqg::nplayer::DEFAULT_FULL_CAP)]
        cap: usize,
    },
    /// Simulate equilibrium paths and conditional moments for a ladder
    /// of player counts against the mean-field limit
    Simulate {
        /// Player counts (comma-separated)
        #[arg(short = 'N', long = "players", value_delimiter = ',', num_args = 1.., default_value = "10,20,50,100")]
        players: Vec<usize>,
        #[arg(long, default_value_t = 2000)]
        replicas: usize,
        /// Euler substeps per grid cell
        #[arg(long, default_value_t = 1)]
        substeps: usize,
    },
    /// Estimate the coupled-gap convergence rate over player counts
    Converge {
        /// Player counts, at least three (comma-separated)
        #[arg(long, value_delimiter = ',', num_args = 1.., default_value = "8,16,32,64,128")]
        ns: Vec<usize>,
        #[arg(long, default_value_t = 10_000)]
        replicas: usize,
        /// Evaluation times (defaults to T/5, T/2, T)
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        eval_times: Option<Vec<f64>>,
        #[arg(long, default_value_t = 1)]
        substeps: usize,
        /// Replace the running-cost weights (degenerate-coupling probes)
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        override_h: Option<Vec<f64>>,
        /// Replace the terminal-cost weights
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        override_g: Option<Vec<f64>>,
    },
    /// Cross-check the single-state solver against the closed-form
    /// solutions without common noise
    ValidateExplicit,
    /// Run the whole reference pipeline and emit per-figure CSV panels
    ReproduceFigures {
        #[arg(long, default_value_t = 2000)]
        replicas: usize,
        /// Replicas for the convergence-rate panel
        #[arg(long, default_value_t = 10_000)]
        rate_replicas: usize,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            // Help and version are not errors.
            if matches!(err.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{err}");
                return ExitCode::SUCCESS;
            }
            eprintln!("{err}");
            return ExitCode::from(1);
        }
    };

    init_thread_pool();

    let started = std::time::Instant::now();
    let result = match &cli.command {
        Command::SolveMfg { override_h, override_g } => {
            commands::solve_mfg(&cli.global, override_h.clone(), override_g.clone())
        }
        Command::SolveNplayer { players, full, probe_times, cap } => {
            commands::solve_nplayer(&cli.global, *players, *full, probe_times, *cap)
        }
        Command::Simulate { players, replicas, substeps } => {
            commands::simulate(&cli.global, players, *replicas, *substeps)
        }
        Command::Converge { ns, replicas, eval_times, substeps, override_h, override_g } => {
            commands::converge(
                &cli.global,
                ns,
                *replicas,
                eval_times.as_deref(),
                *substeps,
                override_h.clone(),
                override_g.clone(),
            )
        }
        Command::ValidateExplicit => commands::validate_explicit(&cli.global),
        Command::ReproduceFigures { replicas, rate_replicas } => {
            commands::reproduce_figures(&cli.global, *replicas, *rate_replicas)
        }
    };

    match result {
        Ok(outputs) => {
            if let Err(err) = manifest::write(&cli.global, &outputs, started.elapsed()) {
                eprintln!("manifest: {err}");
                return ExitCode::from(3);
            }
            ExitCode::SUCCESS
        }
        Err(err) => {
            eprintln!("{err}");
            ExitCode::from(err.exit_code())
        }
    }
}

fn init_thread_pool() {
    if let Ok(value) = std::env::var("MFG_LQG_THREADS") {
        if let Ok(threads) = value.parse::<usize>() {
            if threads >= 1 {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
            }
        }
    }
}

/// Command failure with its exit-code class.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Numerics(String),
    Io(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 1,
            CliError::Numerics(_) => 2,
            CliError::Io(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(msg) => write!(f, "config error: {msg}"),
            CliError::Numerics(msg) => write!(f, "numerical error: {msg}"),
            CliError::Io(msg) => write!(f, "io error: {msg}"),
        }
    }
}

impl From<mfg_lqg::ModelError> for CliError {
    fn from(err: mfg_lqg::ModelError) -> Self {
        CliError::Config(err.to_string())
    }
}

impl From<mfg_lqg::SolveError> for CliError {
    fn from(err: mfg_lqg::SolveError) -> Self {
        CliError::Numerics(err.to_string())
    }
}

impl From<mfg_lqg::paths::SimError> for CliError {
    fn from(err: mfg_lqg::paths::SimError) -> Self {
        CliError::Numerics(err.to_string())
    }
}

impl From<mfg_lqg::convergence::StatError> for CliError {
    fn from(err: mfg_lqg::convergence::StatError) -> Self {
        CliError::Numerics(err.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(err: std::io::Error) -> Self {
        CliError::Io(err.to_string())
    }
}
