//! Command-line harness for the coded-broadcast simulator.
//!
//! Subcommands: `gen-trace` (write a contact trace), `run` (execute an
//! experiment config and emit CSV results), `sweep` (vary one parameter over
//! a value list), `oracle` (self-checks; exit code 3 on failure).
//!
//! Exit codes: 0 success, 1 configuration error (bad flags, bad config file),
//! 2 runtime failure (I/O, simulation), 3 oracle check failure. The
//! `RLNCSIM_WORKERS` environment variable caps the worker thread count.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use rlncsim_core::mobility::MobilityError;
use rlncsim_core::protocols::ProtocolError;

mod config;
mod oracle_cmd;
mod output;
mod run;
mod sweep;

use config::{ConfigError, ExperimentConfig};
use oracle_cmd::OracleArgs;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
    #[error("{0}")]
    Oracle(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 1,
            CliError::Runtime(_) => 2,
            CliError::Oracle(_) => 3,
        }
    }

    /// Same error with a cell / file prefix, keeping the exit class.
    pub fn context(self, ctx: String) -> CliError {
        match self {
            CliError::Config(m) => CliError::Config(format!("{ctx}: {m}")),
            CliError::Runtime(m) => CliError::Runtime(format!("{ctx}: {m}")),
            CliError::Oracle(m) => CliError::Oracle(format!("{ctx}: {m}")),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> CliError {
        CliError::Config(e.to_string())
    }
}

impl From<MobilityError> for CliError {
    fn from(e: MobilityError) -> CliError {
        match e {
            MobilityError::Parse { .. } => CliError::Config(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<ProtocolError> for CliError {
    fn from(e: ProtocolError) -> CliError {
        match e {
            ProtocolError::BadConfig(_) | ProtocolError::Field(_) => {
                CliError::Config(e.to_string())
            }
            ProtocolError::Mobility(m) => CliError::from(m),
            ProtocolError::Coding(_) => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> CliError {
        CliError::Runtime(e.to_string())
    }
}

#[derive(Parser)]
#[command(
    name = "rlncsim",
    version,
    about = "Coded-broadcast simulator: traces, experiment runs, sweeps, and self-checks"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a contact trace file.
    GenTrace {
        /// Number of nodes (node 0 is the source).
        #[arg(long)]
        n: usize,
        /// Per-pair contact rate.
        #[arg(long)]
        lambda: f64,
        /// Trace length in simulation time.
        #[arg(long)]
        horizon: f64,
        /// Trace seed.
        #[arg(long)]
        seed: u64,
        /// Output path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the experiment described by a config file.
    Run {
        /// Config file path.
        #[arg(long)]
        config: PathBuf,
        /// Output directory; overrides the config's outputs.directory.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Run a config once per value of one swept parameter.
    Sweep {
        /// Config file path (the sweep's baseline).
        #[arg(long)]
        config: PathBuf,
        /// Parameter to vary: density, q, b_minus_nu, nu, buffer, n_batches.
        #[arg(long)]
        param: String,
        /// Comma-separated values for the parameter.
        #[arg(long)]
        values: String,
        /// Output directory; overrides the config's outputs.directory.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Self-checks; exits 3 if any check fails.
    Oracle {
        /// Largest node count for the exact chain comparison.
        #[arg(long, default_value_t = 4)]
        nmax: usize,
        /// Largest batch size for the exact chain comparison.
        #[arg(long, default_value_t = 2)]
        numax: u16,
        /// Trials per innovation-rate experiment.
        #[arg(long, default_value_t = 10_000)]
        trials: u32,
        /// Field sizes for the innovation-rate checks (comma separated).
        #[arg(long, default_value = "2,256", value_delimiter = ',')]
        q: Vec<u64>,
        /// Field sizes for the completion-time ladder (comma separated).
        #[arg(long, default_value = "2,4,16,256,65536", value_delimiter = ',')]
        ladder_q: Vec<u64>,
        /// Paired traces for the ladder.
        #[arg(long, default_value_t = 100)]
        traces: u32,
        /// Seed for every stochastic check.
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Skip the (slower) finite-field ladder.
        #[arg(long)]
        skip_ladder: bool,
    },
}

/// Honor `RLNCSIM_WORKERS` before any parallel work starts.
fn init_workers() -> Result<(), CliError> {
    let Ok(raw) = std::env::var("RLNCSIM_WORKERS") else {
        return Ok(());
    };
    let workers: usize = raw.parse().ok().filter(|w| *w >= 1).ok_or_else(|| {
        CliError::Config(format!("RLNCSIM_WORKERS: expected a positive thread count, got {raw:?}"))
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build_global()
        .map_err(|e| CliError::Runtime(format!("worker pool: {e}")))
}

fn load_config(path: &PathBuf) -> Result<ExperimentConfig, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        CliError::Config(format!("cannot read config {}: {e}", path.display()))
    })?;
    ExperimentConfig::parse(&text)
        .map_err(|e| CliError::from(e).context(format!("config {}", path.display())))
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.cmd {
        Cmd::GenTrace { n, lambda, horizon, seed, out } => {
            run::cmd_gen_trace(n, lambda, horizon, seed, &out)
        }
        Cmd::Run { config, out_dir } => {
            let cfg = load_config(&config)?;
            let out = out_dir.unwrap_or_else(|| cfg.out_dir.clone());
            run::cmd_run(&cfg, &out)
        }
        Cmd::Sweep { config, param, values, out_dir } => {
            let cfg = load_config(&config)?;
            let out = out_dir.unwrap_or_else(|| cfg.out_dir.clone());
            sweep::cmd_sweep(&cfg, &param, &values, &out)
        }
        Cmd::Oracle { nmax, numax, trials, q, ladder_q, traces, seed, skip_ladder } => {
            oracle_cmd::cmd_oracle(&OracleArgs {
                nmax,
                numax,
                trials,
                qs: q,
                ladder_qs: ladder_q,
                traces,
                seed,
                skip_ladder,
            })
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Err(e) = init_workers().and_then(|()| dispatch(cli)) {
        eprintln!("error: {e}");
        return ExitCode::from(e.exit_code());
    }
    ExitCode::SUCCESS
}
