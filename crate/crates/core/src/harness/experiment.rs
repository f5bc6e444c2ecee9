//! Experiment runs and their on-disk artifacts.
//!
//! A run directory holds `config.toml` (the resolved configuration),
//! `train_run.jsonl`, `policy.ckpt`, `eval_report.json`, `lengths.csv`,
//! `reward_scatter.csv` and `summary.json`; the supervised reference, when
//! enabled, writes the same files under `sft/`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::data::{generate_preference_data, generate_task_data, write_task_data, Channel, TaskDataset};
use super::eval::{evaluate, lengths_csv, reward_scatter_csv, EvalReport};
use crate::error::{Error, Result};
use crate::policy::{write_atomic, Checkpoint, Policy};
use crate::rewards::{bt_loss_grad, bt_train, pairwise_accuracy, read_preferences, write_preferences, PreferenceTuple, RewardModel};
use crate::trainer::{train, Method, TrainOutput};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub name: String,
    pub method: String,
    pub seed: u64,
    pub total_steps: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub final_mu: Option<f64>,
    /// Final EMA estimates of the constraint costs.
    pub constraint_ema: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub multipliers: Option<Vec<f64>>,
    pub eval: EvalReport,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub sft: Option<EvalReport>,
}

impl RunSummary {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json(path: &Path, v: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(v)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn task_data(cfg: &ExperimentConfig) -> Result<TaskDataset> {
    generate_task_data(&cfg.task).map_err(|e| Error::config("task", e.to_string()))
}

/// Writes `task.tsv` and, with a `[preferences]` section, one preference file per channel.
pub fn generate_data(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<PathBuf>> {
    create_dir(out)?;
    let mut written = Vec::new();
    let task = out.join("task.tsv");
    write_task_data(&task, &task_data(cfg)?)?;
    written.push(task);
    if let Some(spec) = &cfg.preferences {
        let seed = cfg.reward_model.as_ref().map_or(cfg.seed, |r| r.data_seed);
        for (ch, file) in [(Channel::Helpful, "helpful.tsv"), (Channel::Harmless, "harmless.tsv")] {
            let data = generate_preference_data(spec, ch, seed).map_err(|e| Error::config("preferences", e.to_string()))?;
            let p = out.join(file);
            write_preferences(&p, &data)?;
            written.push(p);
        }
    }
    Ok(written)
}

fn write_artifacts(dir: &Path, out: &mut TrainOutput, report: &EvalReport, samples: &super::eval::EvalSamples) -> Result<()> {
    create_dir(dir)?;
    out.run.header.checkpoint = Some("policy.ckpt".into());
    out.run.write(&dir.join("train_run.jsonl"))?;
    Checkpoint::policy(out.policy.clone()).save(&dir.join("policy.ckpt"))?;
    write_json(&dir.join("eval_report.json"), report)?;
    write_atomic(&dir.join("lengths.csv"), lengths_csv(samples).as_bytes())?;
    write_atomic(&dir.join("reward_scatter.csv"), reward_scatter_csv(samples).as_bytes())
}

/// Trains, evaluates on the test split and writes the run directory.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path) -> Result<RunSummary> {
    let r = cfg.resolve()?;
    let data = task_data(cfg)?;
    create_dir(out)?;
    write_atomic(&out.join("config.toml"), cfg.absolutized().to_toml()?.as_bytes())?;

    let mut result = train(&r.trainer, &data.train, &r.constraints, r.init.clone())?;
    let (report, samples) = evaluate(&result.policy, &data.test, &r.rewards, &r.constraints, &r.eval)?;
    write_artifacts(out, &mut result, &report, &samples)?;

    let sft = if cfg.eval.sft_reference && r.trainer.method != Method::Sft {
        let sft_cfg = crate::trainer::TrainerConfig {
            method: Method::Sft,
            ..r.trainer.clone()
        };
        let mut reference = train(&sft_cfg, &data.train, &[], r.init.clone())?;
        let (rep, s) = evaluate(&reference.policy, &data.test, &r.rewards, &r.constraints, &r.eval)?;
        write_artifacts(&out.join("sft"), &mut reference, &rep, &s)?;
        Some(rep)
    } else {
        None
    };

    let summary = RunSummary {
        name: cfg.display_name(),
        method: r.trainer.method.name().into(),
        seed: cfg.seed,
        total_steps: r.trainer.total_steps,
        final_mu: result.final_mu,
        constraint_ema: result.estimators.iter().filter_map(|e| e.value().ok()).collect(),
        multipliers: result.mm.as_ref().map(|m| m.lambda.clone()),
        eval: report,
        sft,
    };
    write_json(&out.join("summary.json"), &summary)?;
    Ok(summary)
}

/// Runs every suite variant into `out/<variant name>`, or the single experiment into `out`.
pub fn run_suite(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<RunSummary>> {
    if cfg.suite.is_none() {
        return Ok(vec![run_experiment(cfg, out)?]);
    }
    cfg.expand_suite()?
        .iter()
        .map(|v| run_experiment(v, &out.join(v.display_name())))
        .collect()
}

/// Re-evaluates a policy checkpoint with the configured rewards and constraints.
pub fn evaluate_checkpoint(cfg: &ExperimentConfig, checkpoint: &Path, out: &Path) -> Result<EvalReport> {
    let r = cfg.resolve()?;
    let data = task_data(cfg)?;
    let policy = Checkpoint::load(checkpoint)?.policy;
    let (report, samples) = evaluate(&policy, &data.test, &r.rewards, &r.constraints, &r.eval)?;
    create_dir(out)?;
    write_json(&out.join("eval_report.json"), &report)?;
    write_atomic(&out.join("lengths.csv"), lengths_csv(&samples).as_bytes())?;
    write_atomic(&out.join("reward_scatter.csv"), reward_scatter_csv(&samples).as_bytes())?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardModelSummary {
    pub name: String,
    pub channel: Channel,
    pub train_pairs: usize,
    pub held_out_pairs: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub train_accuracy: f64,
    pub held_out_accuracy: f64,
    pub checkpoint: PathBuf,
}

/// Supervised policy on the task, the default reward-model initialization.
pub fn sft_policy(cfg: &ExperimentConfig) -> Result<Policy> {
    let r = cfg.resolve()?;
    let sft_cfg = crate::trainer::TrainerConfig {
        method: Method::Sft,
        ..r.trainer
    };
    Ok(train(&sft_cfg, &task_data(cfg)?.train, &[], r.init)?.policy)
}

fn preference_data(cfg: &ExperimentConfig) -> Result<Vec<PreferenceTuple>> {
    let rm = cfg.reward_model.as_ref().expect("checked by caller");
    match &rm.data {
        Some(p) => read_preferences(&cfg.resolve_path(p)),
        None => {
            let spec = cfg
                .preferences
                .as_ref()
                .ok_or_else(|| Error::config("preferences", "required to generate preference data"))?;
            generate_preference_data(spec, rm.channel, rm.data_seed).map_err(|e| Error::config("preferences", e.to_string()))
        }
    }
}

/// Trains the `[reward_model]` section and writes `<name>.ckpt` and `<name>.json` into `out`.
pub fn train_reward_model(cfg: &ExperimentConfig, out: &Path) -> Result<RewardModelSummary> {
    let rm = cfg
        .reward_model
        .as_ref()
        .ok_or_else(|| Error::config("reward_model", "section required"))?;
    let data = preference_data(cfg)?;
    if rm.held_out >= data.len() {
        return Err(Error::config(
            "reward_model.held_out",
            format!("holds out {} of {} tuples", rm.held_out, data.len()),
        ));
    }
    let (fit, held) = data.split_at(data.len() - rm.held_out);
    let scorer = match &rm.init_checkpoint {
        Some(p) => Checkpoint::load(&cfg.resolve_path(p))?.policy,
        None => sft_policy(cfg)?,
    };
    let init = RewardModel::new(scorer);
    let (initial_loss, _) = bt_loss_grad(&init, fit)?;
    let (model, _) = bt_train(&init, fit, &rm.train)?;
    let (final_loss, _) = bt_loss_grad(&model, fit)?;
    create_dir(out)?;
    let ckpt = out.join(format!("{}.ckpt", rm.name));
    model.to_checkpoint(&rm.name).save(&ckpt)?;
    let summary = RewardModelSummary {
        name: rm.name.clone(),
        channel: rm.channel,
        train_pairs: fit.len(),
        held_out_pairs: held.len(),
        initial_loss,
        final_loss,
        train_accuracy: pairwise_accuracy(&model, fit)?,
        held_out_accuracy: if held.is_empty() { f64::NAN } else { pairwise_accuracy(&model, held)? },
        checkpoint: ckpt,
    };
    write_json(&out.join(format!("{}.json", rm.name)), &summary)?;
    Ok(summary)
}

/// Every `summary.json` below `root`, sorted by path.
pub fn collect_summaries(root: &Path) -> Result<Vec<(PathBuf, RunSummary)>> {
    let mut found = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
            let path = entry.map_err(|e| Error::io(&dir, e))?.path();
            if path.is_dir() {
                stack.push(path);
            } else if path.file_name().is_some_and(|n| n == "summary.json") {
                found.push(path);
            }
        }
    }
    found.sort();
    found.into_iter().map(|p| Ok((p.clone(), RunSummary::read(&p)?))).collect()
}

/// Markdown table with one row per run.
pub fn report_markdown(runs: &[(PathBuf, RunSummary)]) -> String {
    let mut out = String::from("| run | method | seed | test ppl | sft ppl | mean length | constraints |\n");
    out.push_str("|---|---|---|---|---|---|---|\n");
    for (path, s) in runs {
        let dir = path.parent().map_or_else(String::new, |p| p.display().to_string());
        let sft = s.sft.as_ref().map_or("-".to_string(), |r| format!("{:.4}", r.perplexity_mean));
        let cons = s
            .eval
            .constraints
            .iter()
            .map(|c| format!("{} >= {}: {:+.3}{}", c.reward, c.threshold, c.margin, if c.satisfied { "" } else { " (violated)" }))
            .collect::<Vec<_>>()
            .join("; ");
        out.push_str(&format!(
            "| {} ({dir}) | {} | {} | {:.4} | {sft} | {:.3} | {} |\n",
            s.name, s.method, s.seed, s.eval.perplexity_mean, s.eval.response_length.mean, cons
        ));
    }
    out
}
