//! Preference rewards: rule-based scorers and learned Bradley-Terry models.

mod preference;

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{Checkpoint, CheckpointKind, Policy, Token};
use crate::trainer::optimizer::{clip_by_norm, AdamConfig, OptimizerState};

pub use preference::{read_preferences, write_preferences, PreferenceTuple};

/// What a reward measures.
#[derive(Debug, Clone, PartialEq)]
pub enum RewardKind {
    Length,
    NegLength,
    /// Fraction of response tokens equal to `target`.
    TokenFrequency { target: Token },
    /// Negative perplexity under a learned scorer.
    LearnedBt(Arc<RewardModel>),
}

/// A named reward `r(y | x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardFn {
    pub name: String,
    pub kind: RewardKind,
}

impl RewardFn {
    pub fn new(name: impl Into<String>, kind: RewardKind) -> Self {
        Self {
            name: name.into(),
            kind,
        }
    }

    pub fn length() -> Self {
        Self::new("length", RewardKind::Length)
    }

    pub fn neg_length() -> Self {
        Self::new("neg_length", RewardKind::NegLength)
    }

    pub fn token_frequency(name: impl Into<String>, target: Token) -> Self {
        Self::new(name, RewardKind::TokenFrequency { target })
    }

    pub fn learned(name: impl Into<String>, model: RewardModel) -> Self {
        Self::new(name, RewardKind::LearnedBt(Arc::new(model)))
    }

    /// Fails for an untrained learned model or a response the reward is undefined on.
    pub fn check(&self) -> Result<()> {
        if let RewardKind::LearnedBt(m) = &self.kind {
            if !m.trained {
                return Err(Error::state(format!("reward model `{}` has not been trained", self.name)));
            }
        }
        Ok(())
    }

    pub fn reward(&self, prompt: &[Token], response: &[Token]) -> Result<f64> {
        self.check()?;
        match &self.kind {
            RewardKind::Length => Ok(response.len() as f64),
            RewardKind::NegLength => Ok(-(response.len() as f64)),
            RewardKind::TokenFrequency { target } => {
                if response.is_empty() {
                    return Err(Error::domain("token frequency of an empty response"));
                }
                let hits = response.iter().filter(|&&t| t == *target).count();
                Ok(hits as f64 / response.len() as f64)
            }
            RewardKind::LearnedBt(m) => m.score(prompt, response),
        }
    }
}

/// A policy-shaped scorer whose reward is the length-normalized log-likelihood.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardModel {
    pub scorer: Policy,
    pub trained: bool,
}

impl RewardModel {
    /// Untrained model starting from `scorer`, typically a task-pretrained policy.
    pub fn new(scorer: Policy) -> Self {
        Self {
            scorer,
            trained: false,
        }
    }

    /// `-perplexity(y | x)` under the scorer, regardless of the trained flag.
    pub fn score(&self, prompt: &[Token], response: &[Token]) -> Result<f64> {
        Ok(-self.scorer.perplexity(prompt, response)?)
    }

    pub fn to_checkpoint(&self, name: &str) -> Checkpoint {
        Checkpoint {
            kind: CheckpointKind::RewardModel {
                name: name.to_string(),
                trained: self.trained,
            },
            policy: self.scorer.clone(),
        }
    }

    /// Returns the model and the reward name stored with it.
    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<(String, Self)> {
        match ckpt.kind {
            CheckpointKind::RewardModel { name, trained } => Ok((
                name,
                Self {
                    scorer: ckpt.policy,
                    trained,
                },
            )),
            CheckpointKind::Policy => Err(Error::domain("checkpoint holds a policy, not a reward model")),
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `sigma(r(y+ | x) - r(y- | x))`.
pub fn bt_probability(m: &RewardModel, t: &PreferenceTuple) -> Result<f64> {
    Ok(sigmoid(m.score(&t.x, &t.y_plus)? - m.score(&t.x, &t.y_minus)?))
}

/// Batch-mean negative log-likelihood and its gradient with respect to the scorer parameters.
pub fn bt_loss_grad(m: &RewardModel, batch: &[PreferenceTuple]) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::domain("empty preference batch"));
    }
    let n = batch.len() as f64;
    let mut grad = vec![0.0; m.scorer.num_params()];
    let mut scratch = vec![0.0; m.scorer.num_params()];
    let mut loss = 0.0;
    for t in batch {
        let d = m.score(&t.x, &t.y_plus)? - m.score(&t.x, &t.y_minus)?;
        // -log sigma(d) computed stably; its derivative in d is -sigma(-d).
        loss += if d >= 0.0 { (-d).exp().ln_1p() } else { -d + d.exp().ln_1p() };
        let w = -sigmoid(-d) / n;
        scratch.fill(0.0);
        let lp = t.y_plus.len() as f64;
        let lm = t.y_minus.len() as f64;
        m.scorer.accumulate_grad_log_prob(&t.x, &t.y_plus, w / lp, &mut scratch)?;
        m.scorer.accumulate_grad_log_prob(&t.x, &t.y_minus, -w / lm, &mut scratch)?;
        for (g, s) in grad.iter_mut().zip(&scratch) {
            *g += s;
        }
    }
    Ok((loss / n, grad))
}

/// Settings for reward-model training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BtTrainConfig {
    pub steps: usize,
    #[serde(default = "default_bt_batch")]
    pub batch_size: usize,
    #[serde(default = "default_bt_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_clip")]
    pub clip_norm: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub adam: AdamConfig,
}

fn default_bt_batch() -> usize {
    32
}
fn default_bt_lr() -> f64 {
    0.05
}
fn default_clip() -> f64 {
    1.0
}

impl Default for BtTrainConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            batch_size: default_bt_batch(),
            learning_rate: default_bt_lr(),
            clip_norm: default_clip(),
            seed: 0,
            adam: AdamConfig::default(),
        }
    }
}

/// Minimizes the Bradley-Terry loss with clipped Adam steps on shuffled batches.
/// Returns the trained model and the per-step batch loss.
pub fn bt_train(model: &RewardModel, data: &[PreferenceTuple], cfg: &BtTrainConfig) -> Result<(RewardModel, Vec<f64>)> {
    if data.is_empty() {
        return Err(Error::domain("empty preference dataset"));
    }
    if cfg.batch_size == 0 || !(cfg.learning_rate > 0.0) || !(cfg.clip_norm > 0.0) {
        return Err(Error::domain("batch_size, learning_rate and clip_norm must be positive"));
    }
    for t in data {
        t.validate(model.scorer.vocab())?;
    }
    if cfg.steps == 0 {
        return Ok((model.clone(), Vec::new()));
    }
    let mut m = model.clone();
    let mut opt = OptimizerState::new(m.scorer.num_params(), cfg.adam);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = order.len();
    let mut history = Vec::with_capacity(cfg.steps);
    let mut batch = Vec::with_capacity(cfg.batch_size);
    for step in 0..cfg.steps {
        batch.clear();
        while batch.len() < cfg.batch_size.min(data.len()) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(data[order[cursor]].clone());
            cursor += 1;
        }
        let (loss, mut grad) = bt_loss_grad(&m, &batch)?;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::TrainingAborted {
                step,
                reason: "non-finite reward-model loss".into(),
            });
        }
        clip_by_norm(&mut grad, cfg.clip_norm);
        opt.update(m.scorer.params_mut(), &grad, cfg.learning_rate);
        history.push(loss);
    }
    m.trained = true;
    Ok((m, history))
}

/// Fraction of tuples where the preferred response scores strictly higher.
pub fn pairwise_accuracy(m: &RewardModel, data: &[PreferenceTuple]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::domain("empty preference dataset"));
    }
    let mut hits = 0usize;
    for t in data {
        if m.score(&t.x, &t.y_plus)? > m.score(&t.x, &t.y_minus)? {
            hits += 1;
        }
    }
    Ok(hits as f64 / data.len() as f64)
}
