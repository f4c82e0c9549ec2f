use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use mhkd_cli::commands::{cmd_distill, cmd_eval, cmd_report, cmd_train_teacher, RunContext};
use mhkd_cli::config::{ExperimentConfig, PRESETS};

/// Multi-head knowledge distillation experiments on CPU.
#[derive(Parser)]
#[command(name = "mhkd", version, after_help = presets_help())]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the teacher with cross-entropy.
    TrainTeacher {
        /// Config file or built-in preset name.
        #[arg(long)]
        config: String,
        /// Run with this single seed instead of the config's list.
        #[arg(long)]
        seed_override: Option<u64>,
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Distill a trained teacher into students (method, baselines, ablation).
    Distill {
        #[arg(long)]
        config: String,
        #[arg(long)]
        teacher_ckpt: PathBuf,
        #[arg(long)]
        seed_override: Option<u64>,
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Top-1 test accuracy and parameter count of a checkpoint.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// Config whose dataset to evaluate on.
        #[arg(long)]
        config: String,
        /// Checkpoint to report compression against.
        #[arg(long)]
        reference: Option<PathBuf>,
    },
    /// Plot curves and tabulate results of a run directory.
    Report { run_dir: PathBuf },
}

fn presets_help() -> String {
    let names: Vec<&str> = PRESETS.iter().map(|(n, _)| *n).collect();
    format!("Built-in configs: {}", names.join(", "))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::TrainTeacher { config, seed_override, output_dir } => {
            let ctx = RunContext::new(ExperimentConfig::load(&config)?, seed_override, output_dir);
            let data = ctx.cfg.dataset.load()?;
            let t = cmd_train_teacher(&ctx, &data)?;
            println!(
                "teacher: final test accuracy {:.2}% (best {:.2}% at epoch {}), checkpoint {}",
                t.outcome.final_test_acc() * 100.0,
                t.outcome.history[t.outcome.best_epoch].test_acc * 100.0,
                t.outcome.best_epoch,
                t.checkpoint.display()
            );
        }
        Command::Distill { config, teacher_ckpt, seed_override, output_dir } => {
            let ctx = RunContext::new(ExperimentConfig::load(&config)?, seed_override, output_dir);
            let data = ctx.cfg.dataset.load()?;
            let summary = cmd_distill(&ctx, &teacher_ckpt, &data)?;
            print!("{}", summary.to_markdown());
        }
        Command::Eval { ckpt, config, reference } => {
            let cfg = ExperimentConfig::load(&config)?;
            let (_, test) = cfg.dataset.load()?;
            println!("{}", cmd_eval(&ckpt, &test, reference.as_deref(), cfg.runtime.eval_batch_size)?);
        }
        Command::Report { run_dir } => {
            let out = cmd_report(&run_dir)?;
            println!("wrote {} and {} plots", out.markdown.display(), out.svgs.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
