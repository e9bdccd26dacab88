mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::commands::Run;
use crate::config::{Overrides, RunConfig};
use crate::error::CliError;

/// Evidence-gated two-head diffusion policies: data, training, calibration
/// and evaluation.
#[derive(Debug, Parser)]
#[command(name = "lrtd", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// JSON run configuration; defaults to <out>/config.json when present.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Target false-activation level.
    #[arg(long, global = true)]
    alpha: Option<f64>,

    #[arg(long, global = true)]
    beta_max: Option<f64>,

    /// Soft-gate temperature.
    #[arg(long, global = true)]
    delta: Option<f64>,

    /// off, uncond, lrt, adaptive or blend:R.
    #[arg(long, global = true)]
    q_compose: Option<String>,

    #[arg(long, global = true)]
    lambda_max: Option<f64>,

    #[arg(long, global = true)]
    grad_clip: Option<f64>,

    /// soft or hard.
    #[arg(long, global = true)]
    gate: Option<String>,

    /// Inclusive step range A:B in which the gate may open.
    #[arg(long, global = true)]
    gate_window: Option<String>,

    /// Run directory shared by all stages.
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic offline dataset.
    GenData,
    /// Fit the critic and mark the top-p rows as good.
    Label {
        /// Rank rows by the analytic reward instead of the fitted critic.
        #[arg(long)]
        oracle_critic: bool,
    },
    /// Train the two-head policy.
    Train,
    /// Calibrate the evidence threshold.
    Calibrate,
    /// Draw actions and their evidence traces.
    Sample {
        /// Threshold override; accepts inf and -inf.
        #[arg(long, allow_hyphen_values = true)]
        tau: Option<f64>,
        #[arg(long, default_value_t = 16)]
        n: usize,
    },
    /// Type-I rate, return and OOD rate at the calibrated threshold.
    Evaluate,
    /// Calibrate and evaluate over a grid of levels.
    Sweep,
    /// Check the bounds that the theory predicts.
    CheckTheory,
    /// Collect all results into one summary.
    Report,
}

fn init_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("LRTD_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n >= 1)
        .ok_or_else(|| CliError::Usage(format!("LRTD_THREADS must be a positive integer, got {v:?}")))?;
    #[cfg(feature = "parallel")]
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Internal(e.to_string()))?;
    #[cfg(not(feature = "parallel"))]
    let _ = n;
    Ok(())
}

fn resolve(cli: &Cli) -> Result<RunConfig, CliError> {
    let stored = cli.out.join("config.json");
    let path = match &cli.config {
        Some(p) => Some(p.clone()),
        None if stored.exists() => Some(stored),
        None => None,
    };
    let mut cfg = RunConfig::load(path.as_deref())?;
    let over = Overrides {
        seed: cli.seed,
        alpha: cli.alpha,
        beta_max: cli.beta_max,
        delta: cli.delta,
        q_compose: cli.q_compose.clone(),
        lambda_max: cli.lambda_max,
        grad_clip: cli.grad_clip,
        gate: cli.gate.clone(),
        gate_window: cli.gate_window.clone(),
    };
    cfg.apply(&over)?;
    if let Command::Label { oracle_critic: true } = cli.command {
        cfg.label.oracle_critic = true;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    init_threads()?;
    let cfg = resolve(&cli)?;
    let run = Run { cfg, out: cli.out };
    match cli.command {
        Command::GenData => commands::gen_data(&run),
        Command::Label { .. } => commands::label(&run),
        Command::Train => commands::train_cmd(&run),
        Command::Calibrate => commands::calibrate(&run),
        Command::Sample { tau, n } => commands::sample(&run, tau, n),
        Command::Evaluate => commands::evaluate(&run),
        Command::Sweep => commands::sweep(&run),
        Command::CheckTheory => commands::check_theory(&run),
        Command::Report => commands::report(&run),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    // clap exits with 2 on usage errors and 0 for --help
    let cli = Cli::try_parse().unwrap_or_else(|e| e.exit());
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("lrtd: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
