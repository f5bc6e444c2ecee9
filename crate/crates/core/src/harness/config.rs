//! Experiment configuration files.
//!
//! A TOML document with the sections `task`, `policy`, `rewards`, `constraints`,
//! `trainer` and `eval`, plus optional `preferences`, `reward_model` and `suite`.
//! The full schema is documented in the repository README. Relative paths are
//! resolved against the directory holding the file.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::data::{Channel, PreferenceSpec, TaskSpec};
use super::eval::EvalConfig;
use crate::barrier::BarrierSchedule;
use crate::constraints::{ConstraintKind, ConstraintSpec};
use crate::error::{Error, Result};
use crate::policy::{Architecture, Checkpoint, GenerationConfig, Policy, Token};
use crate::rewards::{BtTrainConfig, RewardFn, RewardModel};
use crate::trainer::{AdamConfig, LrSchedule, Method, TrainerConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RewardSection {
    Length,
    NegLength,
    TokenFrequency { target: Token },
    /// A reward-model checkpoint written by `train-reward-model`.
    Learned { checkpoint: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintSection {
    pub reward: String,
    #[serde(default = "default_constraint_kind")]
    pub kind: String,
    pub threshold: f64,
    #[serde(default)]
    pub epsilon: Option<f64>,
}

fn default_constraint_kind() -> String {
    "expectation".into()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodKind {
    Sft,
    L3m,
    Mm,
    WeightedSum,
}

impl MethodKind {
    pub fn name(self) -> &'static str {
        match self {
            MethodKind::Sft => "sft",
            MethodKind::L3m => "l3m",
            MethodKind::Mm => "mm",
            MethodKind::WeightedSum => "weighted_sum",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrScheduleKind {
    Constant,
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainerSection {
    pub method: MethodKind,
    pub total_steps: usize,
    pub max_len: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "one")]
    pub clip_norm: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub prompt_batch_size: Option<usize>,
    #[serde(default = "default_samples")]
    pub samples_per_prompt: usize,
    #[serde(default = "default_top_p")]
    pub top_p: f64,
    #[serde(default = "default_smoothing")]
    pub smoothing: f64,
    #[serde(default)]
    pub baseline: bool,
    #[serde(default = "half")]
    pub heads_probability: f64,
    #[serde(default)]
    pub shared_optimizer: bool,
    #[serde(default = "default_lr_schedule")]
    pub lr_schedule: LrScheduleKind,
    #[serde(default)]
    pub lr_final_fraction: f64,
    #[serde(default)]
    pub adam: AdamConfig,
    /// Optional starting checkpoint; fresh initialization otherwise.
    #[serde(default)]
    pub init_checkpoint: Option<PathBuf>,
    // Barrier method.
    #[serde(default)]
    pub mu_initial: Option<f64>,
    #[serde(default)]
    pub mu_floor: Option<f64>,
    // Min-max method.
    #[serde(default)]
    pub mm_multiplier_lr: Option<f64>,
    #[serde(default)]
    pub mm_initial_multiplier: Option<f64>,
    // Weighted sum.
    #[serde(default)]
    pub alpha_weights: Option<Vec<f64>>,
}

fn default_lr() -> f64 {
    0.05
}
fn one() -> f64 {
    1.0
}
fn half() -> f64 {
    0.5
}
fn default_batch() -> usize {
    16
}
fn default_samples() -> usize {
    4
}
fn default_top_p() -> f64 {
    0.9
}
fn default_smoothing() -> f64 {
    0.1
}
fn default_lr_schedule() -> LrScheduleKind {
    LrScheduleKind::Constant
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    #[serde(default = "default_top_p")]
    pub top_p: f64,
    /// Defaults to `trainer.max_len`.
    #[serde(default)]
    pub max_len: Option<usize>,
    #[serde(default = "default_samples")]
    pub samples_per_prompt: usize,
    #[serde(default)]
    pub seed: u64,
    /// Also train and evaluate the unconstrained supervised reference.
    #[serde(default = "yes")]
    pub sft_reference: bool,
}

fn yes() -> bool {
    true
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            top_p: default_top_p(),
            max_len: None,
            samples_per_prompt: default_samples(),
            seed: 0,
            sft_reference: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardModelSection {
    pub name: String,
    pub channel: Channel,
    /// Seed of the generated preference tuples.
    #[serde(default)]
    pub data_seed: u64,
    /// Tuples held out for the accuracy measurement, taken from the end.
    #[serde(default = "default_held_out")]
    pub held_out: usize,
    /// Preference file to use instead of generated tuples.
    #[serde(default)]
    pub data: Option<PathBuf>,
    /// Scorer initialization; a supervised run on the task otherwise.
    #[serde(default)]
    pub init_checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub train: BtTrainConfig,
}

fn default_held_out() -> usize {
    200
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Variant {
    pub name: String,
    /// Replaces the constraint thresholds, in order.
    #[serde(default)]
    pub thresholds: Option<Vec<f64>>,
    /// Keys merged into the `trainer` section.
    #[serde(default)]
    pub trainer: Option<toml::Table>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteSection {
    pub variants: Vec<Variant>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default)]
    pub seed: u64,
    pub task: TaskSpec,
    #[serde(default)]
    pub policy: Architecture,
    #[serde(default)]
    pub rewards: BTreeMap<String, RewardSection>,
    #[serde(default)]
    pub constraints: Vec<ConstraintSection>,
    pub trainer: TrainerSection,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub preferences: Option<PreferenceSpec>,
    #[serde(default)]
    pub reward_model: Option<RewardModelSection>,
    #[serde(default)]
    pub suite: Option<SuiteSection>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

pub fn parse_config(text: &str, base_dir: &Path) -> Result<ExperimentConfig> {
    let table: toml::Table = toml::from_str(text).map_err(|e| Error::config("<document>", e.message().to_string()))?;
    from_table(table, base_dir)
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let base = if base.as_os_str().is_empty() { PathBuf::from(".") } else { base };
    parse_config(&text, &base)
}

fn from_table(table: toml::Table, base_dir: &Path) -> Result<ExperimentConfig> {
    let mut cfg: ExperimentConfig = serde_path_to_error::deserialize(table).map_err(|e| {
        let path = e.path().to_string();
        Error::config(path, e.into_inner().to_string())
    })?;
    cfg.base_dir = base_dir.to_path_buf();
    cfg.validate()?;
    Ok(cfg)
}

/// Everything a run needs, with names and paths resolved.
#[derive(Debug, Clone)]
pub struct ResolvedExperiment {
    pub rewards: Vec<RewardFn>,
    pub constraints: Vec<ConstraintSpec>,
    pub trainer: TrainerConfig,
    pub eval: EvalConfig,
    pub init: Policy,
}

impl ExperimentConfig {
    pub fn display_name(&self) -> String {
        self.name.clone().unwrap_or_else(|| "experiment".into())
    }

    pub fn resolve_path(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    fn validate(&self) -> Result<()> {
        self.task
            .validate()
            .map_err(|e| Error::config("task", e.to_string()))?;
        let t = &self.trainer;
        let forbid = |present: bool, field: &str, method: &str| {
            if present {
                Err(Error::config(format!("trainer.{field}"), format!("only valid for method = \"{method}\"")))
            } else {
                Ok(())
            }
        };
        let is = |m: MethodKind| t.method == m;
        forbid(!is(MethodKind::L3m) && t.mu_initial.is_some(), "mu_initial", "l3m")?;
        forbid(!is(MethodKind::L3m) && t.mu_floor.is_some(), "mu_floor", "l3m")?;
        forbid(!is(MethodKind::Mm) && t.mm_multiplier_lr.is_some(), "mm_multiplier_lr", "mm")?;
        forbid(!is(MethodKind::Mm) && t.mm_initial_multiplier.is_some(), "mm_initial_multiplier", "mm")?;
        forbid(!is(MethodKind::WeightedSum) && t.alpha_weights.is_some(), "alpha_weights", "weighted_sum")?;
        if is(MethodKind::Mm) && t.mm_multiplier_lr.is_none() {
            return Err(Error::config("trainer.mm_multiplier_lr", "required for method = \"mm\""));
        }
        if is(MethodKind::WeightedSum) && t.alpha_weights.is_none() {
            return Err(Error::config("trainer.alpha_weights", "required for method = \"weighted_sum\""));
        }
        if self.task.max_response_len() > t.max_len {
            return Err(Error::config(
                "trainer.max_len",
                format!("gold responses reach {} tokens", self.task.max_response_len()),
            ));
        }
        if self.policy_vocab_mismatch() {
            return Err(Error::config("task.vocab", "vocabulary differs from the preference spec"));
        }
        for (i, c) in self.constraints.iter().enumerate() {
            if !self.has_reward(&c.reward) {
                return Err(Error::config(format!("constraints[{i}].reward"), format!("unknown reward `{}`", c.reward)));
            }
            self.constraint_kind(i)?;
        }
        if let Some(s) = &self.suite {
            for (i, v) in s.variants.iter().enumerate() {
                if let Some(th) = &v.thresholds {
                    if th.len() != self.constraints.len() {
                        return Err(Error::config(
                            format!("suite.variants[{i}].thresholds"),
                            format!("{} thresholds for {} constraints", th.len(), self.constraints.len()),
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    fn policy_vocab_mismatch(&self) -> bool {
        self.preferences.as_ref().is_some_and(|p| p.vocab != self.task.vocab)
    }

    fn has_reward(&self, name: &str) -> bool {
        self.rewards.contains_key(name) || name == "length" || name == "neg_length"
    }

    fn constraint_kind(&self, i: usize) -> Result<ConstraintKind> {
        let c = &self.constraints[i];
        let path = |f: &str| format!("constraints[{i}].{f}");
        let kind = match c.kind.as_str() {
            "expectation" => ConstraintKind::Expectation,
            "chance" => ConstraintKind::Chance {
                epsilon: c.epsilon.ok_or_else(|| Error::config(path("epsilon"), "required for chance constraints"))?,
            },
            "uniform_diagnostic" => ConstraintKind::UniformDiagnostic,
            k => {
                return Err(Error::config(
                    path("kind"),
                    format!("unknown kind `{k}`, expected expectation, chance or uniform_diagnostic"),
                ))
            }
        };
        if c.epsilon.is_some() && !matches!(kind, ConstraintKind::Chance { .. }) {
            return Err(Error::config(path("epsilon"), "only valid for chance constraints"));
        }
        Ok(kind)
    }

    /// Builds a reward by name, loading learned models from their checkpoints.
    pub fn reward(&self, name: &str) -> Result<RewardFn> {
        let section = match self.rewards.get(name) {
            Some(s) => s.clone(),
            None if name == "length" => RewardSection::Length,
            None if name == "neg_length" => RewardSection::NegLength,
            None => return Err(Error::config(format!("rewards.{name}"), "unknown reward")),
        };
        Ok(match section {
            RewardSection::Length => RewardFn::new(name, crate::rewards::RewardKind::Length),
            RewardSection::NegLength => RewardFn::new(name, crate::rewards::RewardKind::NegLength),
            RewardSection::TokenFrequency { target } => RewardFn::token_frequency(name, target),
            RewardSection::Learned { checkpoint } => {
                let path = self.resolve_path(&checkpoint);
                let (_, model) = RewardModel::from_checkpoint(Checkpoint::load(&path)?)
                    .map_err(|e| Error::config(format!("rewards.{name}.checkpoint"), e.to_string()))?;
                if model.scorer.vocab().size() != self.task.vocab {
                    return Err(Error::config(format!("rewards.{name}.checkpoint"), "vocabulary differs from the task"));
                }
                RewardFn::learned(name, model)
            }
        })
    }

    pub fn resolve(&self) -> Result<ResolvedExperiment> {
        let mut rewards = Vec::new();
        for name in self.rewards.keys() {
            rewards.push(self.reward(name)?);
        }
        let mut constraints = Vec::with_capacity(self.constraints.len());
        for (i, c) in self.constraints.iter().enumerate() {
            let r = match rewards.iter().find(|r| r.name == c.reward) {
                Some(r) => r.clone(),
                None => {
                    let r = self.reward(&c.reward)?;
                    rewards.push(r.clone());
                    r
                }
            };
            let spec = ConstraintSpec::new(r, c.threshold, self.constraint_kind(i)?)
                .map_err(|e| Error::config(format!("constraints[{i}]"), e.to_string()))?;
            constraints.push(spec);
        }
        let t = &self.trainer;
        let method = match t.method {
            MethodKind::Sft => Method::Sft,
            MethodKind::L3m => Method::L3m {
                schedule: BarrierSchedule::new(t.mu_initial.unwrap_or(1.0), t.mu_floor.unwrap_or(1e-6), t.total_steps)
                    .map_err(|e| Error::config("trainer.mu_floor", e.to_string()))?,
            },
            MethodKind::Mm => Method::Mm {
                multiplier_lr: t.mm_multiplier_lr.expect("validated"),
                initial_multiplier: t.mm_initial_multiplier.unwrap_or(0.0),
            },
            MethodKind::WeightedSum => Method::WeightedSum {
                alphas: t.alpha_weights.clone().expect("validated"),
            },
        };
        let trainer = TrainerConfig {
            method,
            learning_rate: t.learning_rate,
            clip_norm: t.clip_norm,
            batch_size: t.batch_size,
            prompt_batch_size: t.prompt_batch_size.unwrap_or(t.batch_size),
            samples_per_prompt: t.samples_per_prompt,
            total_steps: t.total_steps,
            seed: self.seed,
            generation: GenerationConfig {
                top_p: t.top_p,
                max_len: t.max_len,
                rng_seed: 0,
            },
            smoothing: t.smoothing,
            baseline: t.baseline,
            adam: t.adam,
            lr_schedule: match t.lr_schedule {
                LrScheduleKind::Constant => LrSchedule::Constant,
                LrScheduleKind::Cosine => LrSchedule::Cosine {
                    final_fraction: t.lr_final_fraction,
                },
            },
            heads_probability: t.heads_probability,
            shared_optimizer: t.shared_optimizer,
        };
        trainer.validate()?;
        let eval = EvalConfig {
            top_p: self.eval.top_p,
            max_len: self.eval.max_len.unwrap_or(t.max_len),
            samples_per_prompt: self.eval.samples_per_prompt,
            seed: self.eval.seed,
        };
        GenerationConfig::new(eval.top_p, eval.max_len, eval.seed).map_err(|e| Error::config("eval", e.to_string()))?;
        let init = match &t.init_checkpoint {
            Some(p) => {
                let ckpt = Checkpoint::load(&self.resolve_path(p))?;
                if ckpt.policy.vocab().size() != self.task.vocab {
                    return Err(Error::config("trainer.init_checkpoint", "vocabulary differs from the task"));
                }
                ckpt.policy
            }
            None => Policy::init(
                crate::policy::Vocab::new(self.task.vocab).map_err(|e| Error::config("task.vocab", e.to_string()))?,
                self.policy,
                self.seed,
            )
            .map_err(|e| Error::config("policy", e.to_string()))?,
        };
        Ok(ResolvedExperiment {
            rewards,
            constraints,
            trainer,
            eval,
            init,
        })
    }

    /// Configuration with every relative path made absolute, for snapshots.
    pub fn absolutized(&self) -> Self {
        let mut c = self.clone();
        for r in c.rewards.values_mut() {
            if let RewardSection::Learned { checkpoint } = r {
                *checkpoint = self.resolve_path(checkpoint);
            }
        }
        if let Some(p) = &mut c.trainer.init_checkpoint {
            *p = self.resolve_path(p);
        }
        if let Some(rm) = &mut c.reward_model {
            rm.data = rm.data.as_ref().map(|p| self.resolve_path(p));
            rm.init_checkpoint = rm.init_checkpoint.as_ref().map(|p| self.resolve_path(p));
        }
        c
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config("<snapshot>", e.to_string()))
    }

    /// One configuration per suite variant, or the configuration itself without a suite.
    pub fn expand_suite(&self) -> Result<Vec<ExperimentConfig>> {
        let Some(suite) = &self.suite else {
            return Ok(vec![self.clone()]);
        };
        let base = toml::Table::try_from(self).map_err(|e| Error::config("<suite>", e.to_string()))?;
        let mut out = Vec::with_capacity(suite.variants.len());
        for (i, v) in suite.variants.iter().enumerate() {
            let mut t = base.clone();
            t.remove("suite");
            t.insert("name".into(), toml::Value::String(v.name.clone()));
            if let Some(th) = &v.thresholds {
                if let Some(toml::Value::Array(cs)) = t.get_mut("constraints") {
                    for (c, b) in cs.iter_mut().zip(th) {
                        if let toml::Value::Table(ct) = c {
                            ct.insert("threshold".into(), toml::Value::Float(*b));
                        }
                    }
                }
            }
            if let Some(over) = &v.trainer {
                if let Some(toml::Value::Table(tt)) = t.get_mut("trainer") {
                    for (k, val) in over {
                        tt.insert(k.clone(), val.clone());
                    }
                }
            }
            let cfg = from_table(t, &self.base_dir).map_err(|e| match e {
                Error::Config { path, message } => Error::config(format!("suite.variants[{i}] -> {path}"), message),
                e => e,
            })?;
            out.push(cfg);
        }
        Ok(out)
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }
}
