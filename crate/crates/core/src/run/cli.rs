//! Command-line entry point. Exit codes: 0 success, 2 precondition
//! failure, 3 external-service failure.

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use super::stages::{self, RunContext};
use super::{RunConfig, RunError};

#[derive(Parser)]
#[command(name = "factlab", version, about = "Poison, realign, and evaluate a tiny language model")]
struct Cli {
    /// Run-config TOML; defaults apply for anything unset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory holding runs/<run-id>/.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build datasets (synthetic fact world or relabeled source corpora).
    Curate,
    /// Train the base model on the pretraining corpus.
    Pretrain,
    /// Finetune the pretrained model on false claims.
    Poison,
    /// Run one alignment arm from the poisoned checkpoint.
    Align {
        /// rag | finetune | grad-diff | grad-ascent | kl
        #[arg(long)]
        arm: String,
        /// Use LoRA adapters instead of full-parameter updates.
        #[arg(long)]
        lora: bool,
    },
    /// Evaluate a tagged checkpoint on a named dataset.
    Eval {
        /// baseline | poisoned | rag | finetune[-lora] | grad-diff[-lora] | ...
        #[arg(long)]
        checkpoint: String,
        /// climate-true | climate-false | control-true | control-false
        #[arg(long)]
        dataset: String,
    },
    /// The whole experiment: curate, pretrain, poison, all arms, report.
    Protocol,
    /// Reassemble the markdown summary from existing reports.
    Report,
}

fn build_context(cli: &Cli) -> Result<RunContext, RunError> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(out) = &cli.out {
        config.output_dir = out.clone();
    }
    RunContext::new(config)
}

fn dispatch(cli: &Cli) -> Result<(), RunError> {
    let ctx = build_context(cli)?;
    match &cli.command {
        Command::Curate => {
            let summary = stages::cmd_curate(&ctx)?;
            for (name, n) in &summary.counts {
                println!("{name}: {n} pairs");
            }
            for (path, n) in &summary.rule_paths {
                println!("rule {path}: {n}");
            }
            println!("review queue: {} flagged", summary.review_queue);
            if summary.cached {
                println!("(cached)");
            }
        }
        Command::Pretrain => {
            stages::cmd_pretrain(&ctx)?;
        }
        Command::Poison => {
            stages::cmd_poison(&ctx)?;
        }
        Command::Align { arm, lora } => {
            stages::cmd_align(&ctx, arm, *lora)?;
        }
        Command::Eval { checkpoint, dataset } => {
            stages::cmd_eval(&ctx, checkpoint, dataset)?;
        }
        Command::Protocol => {
            let summary = stages::cmd_protocol(&ctx)?;
            println!(
                "protocol complete: {} arms ok, {} failed; summary at {}",
                summary.arms_completed.len(),
                summary.arms_failed.len(),
                summary.summary_path.display()
            );
            if !summary.arms_failed.is_empty() {
                for (arm, e) in &summary.arms_failed {
                    eprintln!("arm {arm}: {e}");
                }
                return Err(RunError::Config("one or more arms failed".to_string()));
            }
        }
        Command::Report => {
            let path = stages::cmd_report(&ctx)?;
            println!("summary at {}", path.display());
        }
    }
    Ok(())
}

pub fn run_cli() -> i32 {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
