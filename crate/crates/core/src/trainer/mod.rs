//! Training loops: supervised fine-tuning, the barrier method, the min-max
//! Lagrangian baseline and weighted-sum reward maximization.
//!
//! The barrier and min-max methods alternate between a task step and a constraint
//! step by flipping a coin each iteration. Each kind of step clips its own gradient
//! and, by default, owns its own Adam moments.

pub mod gradients;
pub mod optimizer;

use std::f64::consts::PI;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::barrier::{implied_multiplier, BarrierSchedule};
use crate::constraints::{ConstraintEstimator, ConstraintSpec};
use crate::error::{Error, Result};
use crate::policy::{GenerationConfig, Policy, Token};
use crate::rewards::RewardFn;

pub use gradients::{
    barrier_weighted_sum, constraint_gradient, exact_constraint_gradient, exact_policy_gradient, l3m_grad, l3m_grad_exact,
    policy_gradient_estimate, sample_batch, score_function_grad, surrogate_objective_exact, weighted_sum_grad,
    weighted_sum_grad_exact, PolicyGradient, SampleBatch,
};
pub use optimizer::{clip_by_norm, l2_norm, AdamConfig, OptimizerState};

/// `(prompt, response)` training pair.
pub type Pair = (Vec<Token>, Vec<Token>);

#[derive(Debug, Clone, PartialEq)]
pub enum Method {
    Sft,
    L3m { schedule: BarrierSchedule },
    Mm { multiplier_lr: f64, initial_multiplier: f64 },
    /// Maximizes `sum_i alpha_i r_i` over the rewards of the trainable constraints.
    WeightedSum { alphas: Vec<f64> },
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Sft => "sft",
            Method::L3m { .. } => "l3m",
            Method::Mm { .. } => "mm",
            Method::WeightedSum { .. } => "weighted_sum",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LrSchedule {
    Constant,
    /// Cosine decay from the base rate to `final_fraction` of it.
    Cosine { final_fraction: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainerConfig {
    pub method: Method,
    pub learning_rate: f64,
    pub clip_norm: f64,
    /// Task pairs per task step.
    pub batch_size: usize,
    /// Prompts per sampling step.
    pub prompt_batch_size: usize,
    pub samples_per_prompt: usize,
    pub total_steps: usize,
    pub seed: u64,
    /// Sampling settings for training-time responses; `rng_seed` is unused.
    pub generation: GenerationConfig,
    pub smoothing: f64,
    /// Subtract the batch-mean cost in the score-function estimator.
    pub baseline: bool,
    pub adam: AdamConfig,
    pub lr_schedule: LrSchedule,
    /// Probability that the coin selects the task step.
    pub heads_probability: f64,
    /// One Adam state for both step kinds instead of one each.
    pub shared_optimizer: bool,
}

impl TrainerConfig {
    pub fn new(method: Method, total_steps: usize, max_len: usize) -> Self {
        Self {
            method,
            learning_rate: 0.05,
            clip_norm: 1.0,
            batch_size: 16,
            prompt_batch_size: 16,
            samples_per_prompt: 4,
            total_steps,
            seed: 0,
            generation: GenerationConfig {
                top_p: 0.9,
                max_len,
                rng_seed: 0,
            },
            smoothing: 0.1,
            baseline: false,
            adam: AdamConfig::default(),
            lr_schedule: LrSchedule::Constant,
            heads_probability: 0.5,
            shared_optimizer: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64, name: &str| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::config(format!("trainer.{name}"), format!("must be positive, got {v}")))
            }
        };
        positive(self.learning_rate, "learning_rate")?;
        positive(self.clip_norm, "clip_norm")?;
        for (v, name) in [
            (self.batch_size, "batch_size"),
            (self.prompt_batch_size, "prompt_batch_size"),
            (self.samples_per_prompt, "samples_per_prompt"),
            (self.total_steps, "total_steps"),
        ] {
            if v == 0 {
                return Err(Error::config(format!("trainer.{name}"), "must be positive"));
            }
        }
        self.generation
            .validate()
            .map_err(|e| Error::config("trainer.generation", e.to_string()))?;
        if !(self.smoothing > 0.0 && self.smoothing <= 1.0) {
            return Err(Error::config("trainer.smoothing", "must lie in (0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.heads_probability) {
            return Err(Error::config("trainer.heads_probability", "must lie in [0, 1]"));
        }
        if let LrSchedule::Cosine { final_fraction } = self.lr_schedule {
            if !(0.0..=1.0).contains(&final_fraction) {
                return Err(Error::config("trainer.lr_schedule.final_fraction", "must lie in [0, 1]"));
            }
        }
        match &self.method {
            Method::Sft => {}
            Method::L3m { schedule } => {
                if schedule.total_steps() != self.total_steps {
                    return Err(Error::config(
                        "trainer.total_steps",
                        "barrier schedule length differs from the number of steps",
                    ));
                }
            }
            Method::Mm {
                multiplier_lr,
                initial_multiplier,
            } => {
                positive(*multiplier_lr, "mm_multiplier_lr")?;
                if !(*initial_multiplier >= 0.0) {
                    return Err(Error::config("trainer.mm_initial_multiplier", "must be non-negative"));
                }
            }
            Method::WeightedSum { alphas } => {
                if alphas.iter().any(|a| !(a.is_finite() && *a >= 0.0)) {
                    return Err(Error::config("trainer.alpha_weights", "weights must be non-negative"));
                }
            }
        }
        Ok(())
    }

    fn learning_rate_at(&self, step: usize) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.learning_rate,
            LrSchedule::Cosine { final_fraction } => {
                let progress = (step - 1) as f64 / self.total_steps.max(2).saturating_sub(1) as f64;
                let w = 0.5 * (1.0 + (PI * progress.min(1.0)).cos());
                self.learning_rate * (final_fraction + (1.0 - final_fraction) * w)
            }
        }
    }
}

/// Learned Lagrange multipliers of the min-max baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MMState {
    pub lambda: Vec<f64>,
}

impl MMState {
    pub fn new(k: usize, initial: f64) -> Self {
        Self { lambda: vec![initial.max(0.0); k] }
    }

    /// Projected ascent `lambda_i <- max(0, lambda_i + lr * C_i)`.
    pub fn ascend(&mut self, c: &[f64], lr: f64) {
        for (l, ci) in self.lambda.iter_mut().zip(c) {
            *l = (*l + lr * ci).max(0.0);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepKind {
    Task,
    Constraint,
    Reward,
}

/// Metrics of one optimizer step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub kind: StepKind,
    pub learning_rate: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mu: Option<f64>,
    /// Mean perplexity of the task batch, on task steps.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub task_loss: Option<f64>,
    /// EMA estimates of `C_i`, once initialized.
    pub constraint_ema: Vec<f64>,
    /// Implied multipliers for the barrier method, learned ones for min-max.
    pub multipliers: Vec<f64>,
    /// Batch-mean rewards of the sampled responses, on sampling steps.
    pub mean_rewards: Vec<f64>,
    pub grad_norm: f64,
    pub grad_norm_clipped: f64,
}

/// Header line of a serialized run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunHeader {
    pub method: String,
    pub total_steps: usize,
    pub seed: u64,
    pub constraints: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub checkpoint: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRun {
    pub header: RunHeader,
    pub records: Vec<StepRecord>,
}

impl TrainRun {
    /// Header on the first line, then one record per line.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = serde_json::to_string(&self.header)?;
        out.push('\n');
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(reader: impl BufRead, path: &Path) -> Result<Self> {
        let fail = |line: usize, e: &dyn std::fmt::Display| Error::Format {
            path: path.to_path_buf(),
            message: format!("line {line}: {e}"),
        };
        let mut lines = reader.lines().enumerate();
        let header = match lines.next() {
            Some((_, l)) => {
                let l = l.map_err(|e| Error::io(path, e))?;
                serde_json::from_str(&l).map_err(|e| fail(1, &e))?
            }
            None => return Err(fail(1, &"empty run file")),
        };
        let mut records = Vec::new();
        for (i, l) in lines {
            let l = l.map_err(|e| Error::io(path, e))?;
            if l.trim().is_empty() {
                continue;
            }
            records.push(serde_json::from_str(&l).map_err(|e| fail(i + 1, &e))?);
        }
        Ok(Self { header, records })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        crate::policy::write_atomic(path, self.to_jsonl()?.as_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_jsonl(std::io::BufReader::new(f), path)
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(self.to_jsonl()?.as_bytes())
            .map_err(|e| Error::io("<writer>", e))
    }
}

/// Everything a finished run produces.
#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub run: TrainRun,
    pub policy: Policy,
    pub estimators: Vec<ConstraintEstimator>,
    pub mm: Option<MMState>,
    /// Barrier strength after the last step, for the barrier method.
    pub final_mu: Option<f64>,
}

/// Cycles through shuffled epochs of the training pairs.
struct DataStream {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
}

impl DataStream {
    fn new(rng: ChaCha8Rng, n: usize) -> Self {
        Self {
            rng,
            order: (0..n).collect(),
            cursor: n,
        }
    }

    fn next_indices(&mut self, count: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(count);
        while out.len() < count {
            if self.cursor == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}

const COIN_STREAM: u64 = 0;
const SAMPLE_STREAM: u64 = 1;
const DATA_STREAM: u64 = 2;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn abort(step: usize, reason: impl Into<String>) -> Error {
    Error::TrainingAborted {
        step,
        reason: reason.into(),
    }
}

fn check_finite(step: usize, what: &str, xs: &[f64]) -> Result<()> {
    if xs.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(abort(step, format!("non-finite {what}")))
    }
}

/// Step-by-step driver; [`train`] runs it to completion.
pub struct Trainer<'a> {
    cfg: TrainerConfig,
    data: &'a [Pair],
    constraints: Vec<ConstraintSpec>,
    policy: Policy,
    task_opt: OptimizerState,
    constraint_opt: OptimizerState,
    estimators: Vec<ConstraintEstimator>,
    mm: Option<MMState>,
    coin: ChaCha8Rng,
    sampler: ChaCha8Rng,
    stream: DataStream,
    step: usize,
    mu: Option<f64>,
    records: Vec<StepRecord>,
}

impl<'a> Trainer<'a> {
    /// Only trainable constraints take part; diagnostics are left to evaluation.
    pub fn new(cfg: TrainerConfig, data: &'a [Pair], constraints: &[ConstraintSpec], init: Policy) -> Result<Self> {
        cfg.validate()?;
        if data.is_empty() {
            return Err(Error::domain("empty training data"));
        }
        for (x, y) in data {
            init.vocab().check(x)?;
            init.vocab().check(y)?;
        }
        let constraints: Vec<ConstraintSpec> = constraints.iter().filter(|c| c.is_trainable()).cloned().collect();
        for c in &constraints {
            c.reward.check()?;
        }
        let k = constraints.len();
        match &cfg.method {
            Method::L3m { .. } | Method::Mm { .. } if k == 0 => {
                return Err(Error::config("constraints", "this method needs at least one trainable constraint"));
            }
            Method::WeightedSum { alphas } if alphas.len() != k => {
                return Err(Error::config(
                    "trainer.alpha_weights",
                    format!("{} weights for {k} rewards", alphas.len()),
                ));
            }
            _ => {}
        }
        let estimators = vec![ConstraintEstimator::new(cfg.smoothing)?; k];
        let mm = match cfg.method {
            Method::Mm { initial_multiplier, .. } => Some(MMState::new(k, initial_multiplier)),
            _ => None,
        };
        let n = init.num_params();
        Ok(Self {
            task_opt: OptimizerState::new(n, cfg.adam),
            constraint_opt: OptimizerState::new(n, cfg.adam),
            coin: stream(cfg.seed, COIN_STREAM),
            sampler: stream(cfg.seed, SAMPLE_STREAM),
            stream: DataStream::new(stream(cfg.seed, DATA_STREAM), data.len()),
            mu: match &cfg.method {
                Method::L3m { schedule } => Some(schedule.mu_initial()),
                _ => None,
            },
            cfg,
            data,
            constraints,
            policy: init,
            estimators,
            mm,
            step: 0,
            records: Vec::new(),
        })
    }

    pub fn policy(&self) -> &Policy {
        &self.policy
    }

    pub fn records(&self) -> &[StepRecord] {
        &self.records
    }

    pub fn estimators(&self) -> &[ConstraintEstimator] {
        &self.estimators
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.cfg.total_steps
    }

    fn apply(&mut self, kind: StepKind, mut grad: Vec<f64>, lr: f64) -> (f64, f64) {
        let pre = clip_by_norm(&mut grad, self.cfg.clip_norm);
        let post = l2_norm(&grad);
        // A step carrying no signal is skipped so stale moments cannot move the policy.
        if pre > 0.0 {
            let opt = if kind == StepKind::Task || self.cfg.shared_optimizer {
                &mut self.task_opt
            } else {
                &mut self.constraint_opt
            };
            opt.update(self.policy.params_mut(), &grad, lr);
        }
        (pre, post)
    }

    fn task_step(&mut self) -> Result<(Vec<f64>, f64)> {
        let idx = self.stream.next_indices(self.cfg.batch_size);
        let batch: Vec<&Pair> = idx.iter().map(|&i| &self.data[i]).collect();
        let batch: Vec<(&[Token], &[Token])> = batch.iter().map(|(x, y)| (x.as_slice(), y.as_slice())).collect();
        let (grad, loss) = self.policy.sft_grad(&batch)?;
        Ok((grad, loss))
    }

    fn prompt_batch(&mut self) -> Vec<&'a [Token]> {
        let data = self.data;
        self.stream
            .next_indices(self.cfg.prompt_batch_size)
            .into_iter()
            .map(|i| data[i].0.as_slice())
            .collect()
    }

    /// Samples responses and returns per-constraint gradients with their batch statistics.
    fn constraint_gradients(&mut self) -> Result<Vec<PolicyGradient>> {
        let prompts = self.prompt_batch();
        let batch = sample_batch(&self.policy, &prompts, self.cfg.samples_per_prompt, &self.cfg.generation, &mut self.sampler)?;
        self.constraints
            .iter()
            .map(|s| constraint_gradient(&self.policy, s, &prompts, &batch, self.cfg.baseline))
            .collect()
    }

    fn ema_values(&self) -> Vec<f64> {
        self.estimators
            .iter()
            .filter(|e| e.initialized)
            .map(|e| e.ema_value)
            .collect()
    }

    /// Runs one iteration and returns its record.
    pub fn step(&mut self) -> Result<&StepRecord> {
        if self.is_done() {
            return Err(Error::state("training already finished"));
        }
        let t = self.step + 1;
        let lr = self.cfg.learning_rate_at(t);
        if let Method::L3m { schedule } = &self.cfg.method {
            self.mu = Some(schedule.mu_at_step(t)?);
        }
        let kind = match self.cfg.method {
            Method::Sft => StepKind::Task,
            Method::WeightedSum { .. } => StepKind::Reward,
            Method::L3m { .. } | Method::Mm { .. } => {
                if self.coin.random::<f64>() < self.cfg.heads_probability {
                    StepKind::Task
                } else {
                    StepKind::Constraint
                }
            }
        };
        let k = self.constraints.len();
        let mut task_loss = None;
        let mut mean_rewards = Vec::new();
        let grad = match kind {
            StepKind::Task => {
                let (grad, loss) = self.task_step()?;
                check_finite(t, "task loss", &[loss])?;
                task_loss = Some(loss);
                grad
            }
            StepKind::Constraint => {
                let pgs = self.constraint_gradients()?;
                for (e, pg) in self.estimators.iter_mut().zip(&pgs) {
                    check_finite(t, "constraint cost", &[pg.mean_cost])?;
                    e.ema_update(pg.mean_cost)?;
                }
                mean_rewards = pgs.iter().map(|p| p.mean_reward).collect();
                let grads: Vec<Vec<f64>> = pgs.into_iter().map(|p| p.grad).collect();
                let c = self.ema_values();
                match &self.cfg.method {
                    Method::L3m { .. } => barrier_weighted_sum(&grads, &c, self.mu.expect("barrier strength"))?,
                    Method::Mm { multiplier_lr, .. } => {
                        let mm = self.mm.as_mut().expect("multiplier state");
                        let mut g = vec![0.0; self.policy.num_params()];
                        for (l, gi) in mm.lambda.iter().zip(&grads) {
                            if *l != 0.0 {
                                for (a, b) in g.iter_mut().zip(gi) {
                                    *a += l * b;
                                }
                            }
                        }
                        mm.ascend(&c, *multiplier_lr);
                        g
                    }
                    _ => unreachable!("constraint steps only occur for alternating methods"),
                }
            }
            StepKind::Reward => {
                let Method::WeightedSum { alphas } = &self.cfg.method else {
                    unreachable!("reward steps only occur for weighted-sum training")
                };
                let alphas = alphas.clone();
                let prompts = self.prompt_batch();
                let batch = sample_batch(&self.policy, &prompts, self.cfg.samples_per_prompt, &self.cfg.generation, &mut self.sampler)?;
                let rewards: Vec<RewardFn> = self.constraints.iter().map(|c| c.reward.clone()).collect();
                let (combined, means) = gradients::weighted_rewards(&rewards, &alphas, &prompts, &batch)?;
                check_finite(t, "reward", &combined)?;
                mean_rewards = means;
                let mut weights: Vec<f64> = combined.iter().map(|r| -r).collect();
                if self.cfg.baseline {
                    gradients::center(&mut weights);
                }
                score_function_grad(&self.policy, &prompts, &batch, &weights)
            }
        };
        check_finite(t, "gradient", &grad)?;
        let (pre, post) = self.apply(kind, grad, lr);
        check_finite(t, "parameters", self.policy.params())?;
        let constraint_ema = self.ema_values();
        let multipliers = match (&self.cfg.method, &self.mm) {
            (Method::L3m { .. }, _) => {
                let mu = self.mu.expect("barrier strength");
                constraint_ema.iter().map(|&c| implied_multiplier(c, mu, k)).collect()
            }
            (Method::Mm { .. }, Some(mm)) => mm.lambda.clone(),
            _ => Vec::new(),
        };
        check_finite(t, "multipliers", &multipliers)?;
        self.records.push(StepRecord {
            step: t,
            kind,
            learning_rate: lr,
            mu: self.mu,
            task_loss,
            constraint_ema,
            multipliers,
            mean_rewards,
            grad_norm: pre,
            grad_norm_clipped: post,
        });
        self.step = t;
        Ok(self.records.last().expect("just pushed"))
    }

    pub fn finish(self) -> TrainOutput {
        TrainOutput {
            run: TrainRun {
                header: RunHeader {
                    method: self.cfg.method.name().to_string(),
                    total_steps: self.cfg.total_steps,
                    seed: self.cfg.seed,
                    constraints: self.constraints.iter().map(|c| c.reward.name.clone()).collect(),
                    checkpoint: None,
                },
                records: self.records,
            },
            policy: self.policy,
            estimators: self.estimators,
            mm: self.mm,
            final_mu: self.mu,
        }
    }
}

/// Runs the configured method for `total_steps` iterations from `init`.
pub fn train(cfg: &TrainerConfig, data: &[Pair], constraints: &[ConstraintSpec], init: Policy) -> Result<TrainOutput> {
    let mut trainer = Trainer::new(cfg.clone(), data, constraints, init)?;
    while !trainer.is_done() {
        trainer.step()?;
    }
    Ok(trainer.finish())
}
