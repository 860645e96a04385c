//! Batch entry points for training, generation, evaluation and the
//! anti-scam run. `main.rs` only parses arguments and calls [`run`].

pub mod commands;
pub mod config;

use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "edge", version, about = "Exemplar-controlled dialogue generation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Run configuration (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Override a config value, e.g. `--set training.max_epochs=3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<(RunConfig, serde_json::Value)> {
        RunConfig::load(&self.config, &self.overrides)
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Tag utterances with frames.
    ExtractFrames {
        /// Plain text (one utterance per line) or JSONL with a "text" field.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        lexicon: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Also emit pronoun tokens.
        #[arg(long)]
        pronouns: bool,
    },
    /// Train the model and write a checkpoint.
    Train(ConfigArgs),
    /// Generate responses for the test contexts.
    Generate {
        #[command(flatten)]
        config: ConfigArgs,
        /// Dialogue JSONL to respond to; defaults to paths.valid.
        #[arg(long)]
        context_file: Option<PathBuf>,
    },
    /// Score a generations file.
    Evaluate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        run_file: PathBuf,
        /// Report path; defaults to paths.report, then output_dir/report.json.
        #[arg(long)]
        output: Option<PathBuf>,
        /// Recorded in the report counts; inferred from the run when absent.
        #[arg(long)]
        exemplar_set_size: Option<usize>,
    },
    /// Intent-controlled replies to scam emails.
    AntiScam {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        emails: PathBuf,
        #[arg(long)]
        exemplars: PathBuf,
    },
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::ExtractFrames {
            input,
            lexicon,
            output,
            pronouns,
        } => {
            let n = commands::extract_frames(&input, &lexicon, &output, pronouns)?;
            log::info!("tagged {n} utterances into {}", output.display());
        }
        Command::Train(args) => {
            let (config, snapshot) = args.load()?;
            let report = commands::train(&config, snapshot)?;
            log::info!(
                "best epoch {} (val {:.4}) saved to {}",
                report.checkpoint.manifest.epoch,
                report.checkpoint.manifest.val_loss,
                report.checkpoint.dir.display()
            );
        }
        Command::Generate { config, context_file } => {
            let (config, _) = config.load()?;
            commands::generate(&config, context_file.as_deref())?;
        }
        Command::Evaluate {
            config,
            run_file,
            output,
            exemplar_set_size,
        } => {
            let (config, _) = config.load()?;
            let (_, out) = commands::evaluate(&config, &run_file, output.as_deref(), exemplar_set_size)?;
            log::info!("report written to {}", out.display());
        }
        Command::AntiScam {
            config,
            emails,
            exemplars,
        } => {
            let (config, _) = config.load()?;
            commands::anti_scam(&config, &emails, &exemplars)?;
        }
    }
    Ok(())
}
