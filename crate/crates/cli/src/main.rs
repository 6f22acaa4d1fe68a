mod commands;
mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ped_core::{PedError, Result};

use crate::commands::DiagnoseOptions;
use crate::config::RunConfig;

/// Equilibrium-layer embeddings for exponential-family data.
#[derive(Debug, Parser)]
#[command(name = "ped", version)]
struct Cli {
    /// Overrides the dataset, training or evaluation seed
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; defaults to the available cores
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// JSON run configuration
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Sample a synthetic dataset from the shape latents
    GenData {
        /// Write N seeded datasets into seed0, seed1, ...
        #[arg(long)]
        sweep: Option<usize>,
    },
    /// Fit a model to a dataset
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Continue from a checkpoint up to the configured epoch count
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Infer latents for every sample
    Embed {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Report admissibility, solver behaviour and curvature
    Diagnose {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// List every relu activity pattern for one sample
        #[arg(long)]
        enumerate: bool,
        /// Sample used by --enumerate
        #[arg(long, default_value_t = 0)]
        sample: usize,
        /// Samples probed for Hessian eigenvalues
        #[arg(long, default_value_t = 200)]
        probes: usize,
    },
    /// Regress z1 + z2 from each backbone and tally wins
    EvalDownstream {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Extra frozen features as NAME=PATH (l x N CSV)
        #[arg(long, value_parser = parse_external)]
        external: Vec<(String, PathBuf)>,
    },
}

fn parse_external(s: &str) -> std::result::Result<(String, PathBuf), String> {
    let (name, path) = s.split_once('=').ok_or_else(|| format!("expected NAME=PATH, got {s:?}"))?;
    if name.is_empty() {
        return Err("backbone name is empty".into());
    }
    Ok((name.to_owned(), PathBuf::from(path)))
}

fn exit_code(e: &PedError) -> u8 {
    match e {
        PedError::Validation(_) | PedError::Parse(_) | PedError::Json(_) | PedError::Domain(_) => 2,
        PedError::Io(_) => 4,
        PedError::Internal(_) => 1,
        _ => 3,
    }
}

fn run(cli: &Cli) -> Result<()> {
    if let Some(n) = cli.workers {
        if n == 0 {
            return Err(PedError::Validation("--workers must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| PedError::Internal(e.to_string()))?;
    }
    let cfg = RunConfig::load(cli.config.as_deref())?;
    let out: &Path = &cli.out;
    match &cli.command {
        Command::GenData { sweep } => commands::gen_data(&cfg, out, *sweep, cli.seed),
        Command::Train { data, resume } => commands::train(&cfg, data, out, resume.as_deref(), cli.seed),
        Command::Embed { checkpoint, data } => commands::embed(&cfg, checkpoint, data, out),
        Command::Diagnose {
            checkpoint,
            data,
            enumerate,
            sample,
            probes,
        } => {
            let opts = DiagnoseOptions {
                enumerate: *enumerate,
                sample: *sample,
                probes: *probes,
            };
            commands::diagnose(&cfg, checkpoint, data, Some(out), &opts)
        }
        Command::EvalDownstream {
            data,
            checkpoint,
            external,
        } => commands::eval_downstream(&cfg, data, checkpoint.as_deref(), external, out, cli.seed),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
