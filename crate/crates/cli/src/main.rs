use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use varphylo_cli::{run_evaluate, run_simulate, run_train, RunConfig};

/// Variational inference of ancestral sequences and substitution
/// parameters on star trees. Set VARPHYLO_LOG (error..trace) for logging.
#[derive(Parser)]
#[command(version)]
struct Cli {
    /// Directory for all outputs; overrides `output_dir` in the config.
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Evolve leaf sequences from a random root along known branches.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Fit the variational posterior to an alignment.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Held-out alignment evaluated after every iteration.
        #[arg(long)]
        valid: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score trained estimates against a simulation manifest.
    Evaluate {
        #[arg(long)]
        estimates: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
    },
}

fn load(path: &Path, seed: Option<u64>, output_dir: &Option<PathBuf>) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(d) = output_dir {
        cfg.output_dir = d.clone();
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate { config, seed } => {
            let cfg = load(&config, seed, &cli.output_dir)?;
            let manifest = run_simulate(&cfg)?;
            println!("{}", manifest.display());
        }
        Command::Train { config, input, valid, seed } => {
            let cfg = load(&config, seed, &cli.output_dir)?;
            run_train(&cfg, &input, valid.as_deref())?;
        }
        Command::Evaluate { estimates, manifest } => {
            let dir = cli.output_dir.unwrap_or_else(|| PathBuf::from("."));
            for row in run_evaluate(&estimates, &manifest, &dir)? {
                let cell = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
                println!("{:<12} dist {:.4} corr {} ratio {}", row.group, row.dist, cell(row.corr), cell(row.ratio));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("VARPHYLO_LOG", "info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
