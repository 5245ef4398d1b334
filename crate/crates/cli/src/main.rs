//! `dcsr`: synthesize data, pretrain diagnosis models, train the cold-start
//! generator, and evaluate it in the adaptive-testing simulator.
//!
//! Exit status: 0 success, 1 usage error, 2 invalid configuration,
//! 3 runtime failure.

mod config;
mod stages;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::bail;
use clap::{error::ErrorKind, Parser, Subcommand};

use dcsr_core::catsim::{InitKind, PolicyKind};
use dcsr_core::cdm::CdmKind;

use config::RunConfig;
use stages::SimulateArgs;

#[derive(Debug, Parser)]
#[command(name = "dcsr", version, about = "Cross-domain cold-start initialization for adaptive testing")]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true, default_value = "dcsr.toml")]
    config: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic multi-domain benchmark into the data directory.
    Synth {
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Split the target domain and fit one diagnosis model per domain.
    Pretrain,
    /// Train the cold-start generator on the pretrained models.
    Train,
    /// Run adaptive-testing sessions for the cold examinees.
    Simulate {
        /// Target domain; must match the configuration.
        #[arg(long)]
        target: Option<u32>,
        #[arg(long, default_value = "irt")]
        cdm: CdmKind,
        #[arg(long)]
        init: InitKind,
        #[arg(long)]
        policy: PolicyKind,
        #[arg(long, default_value_t = 5)]
        steps: usize,
        #[arg(long)]
        seed: Option<u64>,
        /// Trained generator; defaults to the one in the artifact directory.
        #[arg(long)]
        artifact: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a grid of models, policies, initializers and budgets.
    Eval {
        /// Grid file (TOML); defaults to the `[grid]` section of the config.
        #[arg(long)]
        grid: Option<PathBuf>,
        /// Report directory; defaults to `paths.report_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

enum Failure {
    Invalid(anyhow::Error),
    Runtime(anyhow::Error),
}

/// Everything a subcommand needs, checked before any file is written.
enum Job {
    Synth,
    Pretrain,
    Train,
    Simulate(SimulateArgs),
    Eval,
}

fn prepare(cli: Cli) -> anyhow::Result<(RunConfig, Job)> {
    let mut cfg = RunConfig::load(&cli.config)?;
    let job = match cli.command {
        Command::Synth { seed } => {
            if let Some(s) = seed {
                cfg.seed = s;
            }
            Job::Synth
        }
        Command::Pretrain => Job::Pretrain,
        Command::Train => Job::Train,
        Command::Simulate {
            target,
            cdm,
            init,
            policy,
            steps,
            seed,
            artifact,
            out,
        } => {
            if let Some(t) = target {
                if t != cfg.domains.target {
                    bail!("--target {t} differs from domains.target = {}", cfg.domains.target);
                }
            }
            if policy == PolicyKind::Fisher && cdm != CdmKind::Irt {
                bail!("--policy fisher requires --cdm irt");
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            Job::Simulate(SimulateArgs {
                cdm,
                init,
                policy,
                steps,
                artifact,
                out,
            })
        }
        Command::Eval { grid, out } => {
            if let Some(path) = grid {
                cfg.grid = stages::load_grid(&path)?;
            }
            if let Some(dir) = out {
                cfg.paths.report_dir = dir;
            }
            Job::Eval
        }
    };
    Ok((cfg, job))
}

fn run(cli: Cli) -> Result<(), Failure> {
    let (cfg, job) = prepare(cli).map_err(Failure::Invalid)?;
    let result = match &job {
        Job::Synth => stages::synth(&cfg),
        Job::Pretrain => stages::pretrain(&cfg),
        Job::Train => stages::train(&cfg),
        Job::Simulate(args) => stages::simulate(&cfg, args),
        Job::Eval => stages::eval(&cfg),
    };
    result.map_err(Failure::Runtime)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(e)) => {
            eprintln!("error: invalid configuration: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(3)
        }
    }
}
