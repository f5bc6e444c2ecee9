use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use l3m::harness::experiment::{collect_summaries, evaluate_checkpoint, generate_data, report_markdown, run_suite, train_reward_model};
use l3m::harness::{load_config, ExperimentConfig};

/// Constrained sequence-policy training with relaxed log-barriers.
#[derive(Parser)]
#[command(name = "l3m", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config file (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Write the task splits and, with a [preferences] section, both preference channels.
    GenData(Common),
    /// Train the [reward_model] section and save `<name>.ckpt`.
    TrainRewardModel(Common),
    /// Train and evaluate; a [suite] writes one directory per variant.
    Train(Common),
    /// Evaluate a policy checkpoint on the test split.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Collect every summary.json below --out into a markdown table.
    Report {
        #[arg(long)]
        out: PathBuf,
    },
}

fn config(c: &Common) -> Result<ExperimentConfig> {
    let cfg = load_config(&c.config).with_context(|| format!("loading {}", c.config.display()))?;
    Ok(match c.seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    })
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(c) => {
            for p in generate_data(&config(&c)?, &c.out)? {
                println!("wrote {}", p.display());
            }
        }
        Command::TrainRewardModel(c) => {
            let s = train_reward_model(&config(&c)?, &c.out)?;
            println!(
                "{} ({:?}): loss {:.4} -> {:.4}, accuracy train {:.3} held-out {:.3}, saved {}",
                s.name,
                s.channel,
                s.initial_loss,
                s.final_loss,
                s.train_accuracy,
                s.held_out_accuracy,
                s.checkpoint.display()
            );
        }
        Command::Train(c) => {
            for s in run_suite(&config(&c)?, &c.out)? {
                let sft = s.sft.as_ref().map(|r| format!(", sft perplexity {:.4}", r.perplexity_mean)).unwrap_or_default();
                println!(
                    "{} [{}]: perplexity {:.4} +- {:.4}, mean length {:.3}{sft}",
                    s.name, s.method, s.eval.perplexity_mean, s.eval.perplexity_std, s.eval.response_length.mean
                );
                for c in &s.eval.constraints {
                    println!("  {} >= {}: value {:.4}, margin {:+.4}{}", c.reward, c.threshold, c.value, c.margin, if c.satisfied { "" } else { " (violated)" });
                }
            }
        }
        Command::Evaluate { common, checkpoint } => {
            let r = evaluate_checkpoint(&config(&common)?, &checkpoint, &common.out)?;
            println!("perplexity {:.4} +- {:.4} over {} pairs, mean length {:.3}", r.perplexity_mean, r.perplexity_std, r.num_pairs, r.response_length.mean);
            for rw in &r.rewards {
                println!("  {}: mean {:.4}, median {:.4}", rw.name, rw.summary.mean, rw.summary.median);
            }
        }
        Command::Report { out } => {
            let table = report_markdown(&collect_summaries(&out)?);
            write_report(&out, &table)?;
            print!("{table}");
        }
    }
    Ok(())
}

fn write_report(dir: &Path, table: &str) -> Result<()> {
    let path = dir.join("report.md");
    std::fs::write(&path, table).with_context(|| format!("writing {}", path.display()))
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<l3m::Error>() {
        Some(l3m::Error::TrainingAborted { .. }) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            // Usage errors count as configuration errors.
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
