//! `longevity`: fit, project, simulate and decompose annuity liabilities.

mod commands;
mod config;
mod failure;

use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand};

use commands::{DecomposeOutcome, Outputs};
use config::{Flags, RunConfig};
use failure::Failure;

#[derive(Parser)]
#[command(name = "longevity", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the mortality model and its time-index drift to historical rates.
    Fit(#[command(flatten)] Flags),
    /// Export a projected, closed mortality table.
    Project(#[command(flatten)] Flags),
    /// Simulate the liability distribution of a portfolio.
    Simulate(#[command(flatten)] Flags),
    /// Split liability variance into sampling and systematic parts.
    Decompose(#[command(flatten)] Flags),
    /// Write a synthetic mortality history and portfolio.
    Synth(#[command(flatten)] Flags),
}

impl Command {
    fn parts(&self) -> (&'static str, &Flags) {
        match self {
            Command::Fit(f) => ("fit", f),
            Command::Project(f) => ("project", f),
            Command::Simulate(f) => ("simulate", f),
            Command::Decompose(f) => ("decompose", f),
            Command::Synth(f) => ("synth", f),
        }
    }
}

fn append_log(config: &RunConfig, name: &str, started: Instant, status: &str) {
    let stamp = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs());
    let line = format!(
        "{stamp} {name} {status} elapsed={:.3}s\n",
        started.elapsed().as_secs_f64()
    );
    let file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(config.out_dir.join("run.log"));
    if let Ok(mut f) = file {
        let _ = f.write_all(line.as_bytes());
    }
}

fn finish(config: &RunConfig, outputs: &Outputs) -> Result<(), Failure> {
    outputs.write(&config.out_dir)?;
    for name in outputs.names() {
        log::info!("wrote {}", config.out_dir.join(name).display());
    }
    Ok(())
}

fn run(command: &Command) -> Result<(), Failure> {
    let (name, flags) = command.parts();
    let config = flags.resolve()?;
    if let Some(n) = config.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Internal(e.to_string()))?;
    }
    let started = Instant::now();
    let result = match command {
        Command::Fit(_) => commands::fit_cmd(&config).and_then(|o| finish(&config, &o)),
        Command::Project(_) => commands::project_cmd(&config).and_then(|o| finish(&config, &o)),
        Command::Simulate(_) => commands::simulate_cmd(&config).and_then(|o| finish(&config, &o)),
        Command::Synth(_) => commands::synth_cmd(&config).and_then(|o| finish(&config, &o)),
        Command::Decompose(_) => match commands::decompose_cmd(&config)? {
            DecomposeOutcome::Done(o) => finish(&config, &o),
            DecomposeOutcome::NotConverged { outputs, message } => {
                finish(&config, &outputs)?;
                Err(Failure::Convergence(message))
            }
        },
    };
    let status = match &result {
        Ok(()) => "ok".to_string(),
        Err(e) => format!("exit={}", e.exit_code()),
    };
    if config.out_dir.is_dir() {
        append_log(&config, name, started, &status);
    }
    result
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let outcome = catch_unwind(AssertUnwindSafe(|| run(&cli.command)))
        .unwrap_or_else(|_| Err(Failure::Internal("unexpected panic".into())));
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
