//! `czsl`: data generation, pretraining, meta-training, evaluation and
//! reporting driven by one TOML config.

mod config;
mod error;
mod pipeline;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::ExperimentConfig;
use error::CliError;

#[derive(Parser)]
#[command(name = "czsl", version, about = "Episodic compositional zero-shot learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment config (TOML). Defaults apply to anything left out.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set training.max_episodes=500`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig, CliError> {
        ExperimentConfig::load(self.config.as_deref(), &self.overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic benchmark to split manifests.
    Generate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Overwrite existing files.
        #[arg(long)]
        force: bool,
    },
    /// Pretrain (or reuse) the backbone for every seed.
    Pretrain(ConfigArgs),
    /// Meta-train the model for every seed.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate the configured method on test episodes.
    Evaluate(ConfigArgs),
    /// Pretrain, train and evaluate in one go.
    Run {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Continue from the latest training checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Print a comparison table from result files.
    Report {
        #[arg(required = true)]
        results: Vec<PathBuf>,
    },
    /// Print the fully resolved config.
    Config(ConfigArgs),
}

fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Generate { cfg, force } => {
            for p in pipeline::cmd_generate(&cfg.load()?, force)? {
                println!("wrote {}", p.display());
            }
        }
        Command::Pretrain(cfg) => {
            let cfg = cfg.load()?;
            pipeline::cmd_pretrain(&cfg, &pipeline::load_dataset(&cfg)?)?;
        }
        Command::Train { cfg, resume } => {
            let cfg = cfg.load()?;
            pipeline::cmd_train(&cfg, &pipeline::load_dataset(&cfg)?, resume)?;
        }
        Command::Evaluate(cfg) => {
            let cfg = cfg.load()?;
            let records = pipeline::cmd_evaluate(&cfg, &pipeline::load_dataset(&cfg)?)?;
            print!("{}", report::render_table(&records));
        }
        Command::Run { cfg, resume } => {
            let records = pipeline::cmd_run(&cfg.load()?, resume)?;
            print!("{}", report::render_table(&records));
        }
        Command::Report { results } => print!("{}", report::cmd_report(&results)?),
        Command::Config(cfg) => print!("{}", cfg.load()?.to_toml()),
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("czsl: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
