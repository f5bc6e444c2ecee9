//! Score-function gradients of expected costs and rewards, and the barrier-weighted
//! combination used by the constrained objective.
//!
//! For a cost `c(y | x)` the estimator is the sample mean of `c * d log pi(y | x) / |y|`
//! over responses drawn from the policy. The exact variants replace the sample
//! mean with a sum over the enumerated response distribution (`top_p = 1`,
//! truncated responses included as outcomes).

use rand::Rng;

use crate::barrier::{barrier_grad, barrier_value, BarrierParams};
use crate::constraints::{offset_cost, ConstraintEstimator, ConstraintSpec};
use crate::error::{Error, Result};
use crate::policy::{enumerate_response_distribution, GenerationConfig, Policy, Token};
use crate::rewards::RewardFn;

/// Responses drawn for a batch of prompts, `samples_per_prompt` per prompt, prompt-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleBatch {
    pub prompt_index: Vec<usize>,
    pub responses: Vec<Vec<Token>>,
}

impl SampleBatch {
    pub fn len(&self) -> usize {
        self.responses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.responses.is_empty()
    }
}

pub fn sample_batch<P: AsRef<[Token]>, R: Rng + ?Sized>(
    policy: &Policy,
    prompts: &[P],
    samples_per_prompt: usize,
    gen: &GenerationConfig,
    rng: &mut R,
) -> Result<SampleBatch> {
    if prompts.is_empty() || samples_per_prompt == 0 {
        return Err(Error::domain("policy gradient needs at least one sample"));
    }
    gen.validate()?;
    let mut out = SampleBatch {
        prompt_index: Vec::with_capacity(prompts.len() * samples_per_prompt),
        responses: Vec::with_capacity(prompts.len() * samples_per_prompt),
    };
    for (i, x) in prompts.iter().enumerate() {
        policy.vocab().check(x.as_ref())?;
        for _ in 0..samples_per_prompt {
            out.prompt_index.push(i);
            out.responses.push(policy.sample_unchecked(x.as_ref(), gen, rng));
        }
    }
    Ok(out)
}

/// `mean_j w_j * d log pi(y_j | x_j) / |y_j|`.
pub fn score_function_grad<P: AsRef<[Token]>>(policy: &Policy, prompts: &[P], batch: &SampleBatch, weights: &[f64]) -> Vec<f64> {
    assert_eq!(weights.len(), batch.len());
    let n = batch.len() as f64;
    let mut grad = vec![0.0; policy.num_params()];
    for ((&i, y), &w) in batch.prompt_index.iter().zip(&batch.responses).zip(weights) {
        if w != 0.0 {
            let scale = w / (n * y.len() as f64);
            policy.accumulate_grad_log_prob_unchecked(prompts[i].as_ref(), y, scale, &mut grad);
        }
    }
    grad
}

/// Monte Carlo estimate of `d C / d theta` together with the batch statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyGradient {
    pub grad: Vec<f64>,
    pub mean_cost: f64,
    pub mean_reward: f64,
}

/// Offset costs and rewards of every sampled response.
pub fn batch_costs<P: AsRef<[Token]>>(spec: &ConstraintSpec, prompts: &[P], batch: &SampleBatch) -> Result<(Vec<f64>, Vec<f64>)> {
    spec.reward.check()?;
    let mut costs = Vec::with_capacity(batch.len());
    let mut rewards = Vec::with_capacity(batch.len());
    for (&i, y) in batch.prompt_index.iter().zip(&batch.responses) {
        let r = spec.reward.reward(prompts[i].as_ref(), y)?;
        costs.push(spec.cost_of_reward(r)?);
        rewards.push(r);
    }
    Ok((costs, rewards))
}

/// Subtracts the batch mean so the weights sum to zero.
pub(crate) fn center(weights: &mut [f64]) {
    let m = weights.iter().sum::<f64>() / weights.len() as f64;
    for w in weights.iter_mut() {
        *w -= m;
    }
}

/// Score-function gradient of the offset cost from an already drawn batch.
pub fn constraint_gradient<P: AsRef<[Token]>>(
    policy: &Policy,
    spec: &ConstraintSpec,
    prompts: &[P],
    batch: &SampleBatch,
    baseline: bool,
) -> Result<PolicyGradient> {
    if batch.is_empty() {
        return Err(Error::domain("policy gradient needs at least one sample"));
    }
    let (mut costs, rewards) = batch_costs(spec, prompts, batch)?;
    let mean_cost = costs.iter().sum::<f64>() / costs.len() as f64;
    let mean_reward = rewards.iter().sum::<f64>() / rewards.len() as f64;
    if baseline {
        center(&mut costs);
    }
    Ok(PolicyGradient {
        grad: score_function_grad(policy, prompts, batch, &costs),
        mean_cost,
        mean_reward,
    })
}

/// Samples `samples_per_prompt` responses per prompt and estimates `d C / d theta`.
pub fn policy_gradient_estimate<P: AsRef<[Token]>, R: Rng + ?Sized>(
    policy: &Policy,
    spec: &ConstraintSpec,
    prompts: &[P],
    samples_per_prompt: usize,
    gen: &GenerationConfig,
    rng: &mut R,
) -> Result<PolicyGradient> {
    spec.require_trainable()?;
    let batch = sample_batch(policy, prompts, samples_per_prompt, gen, rng)?;
    constraint_gradient(policy, spec, prompts, &batch, false)
}

/// Exact `E[c] ` and `E[c * d log pi]` (divided by `|y|` when `length_normalize`) averaged over prompts.
pub fn exact_policy_gradient<P, F>(policy: &Policy, prompts: &[P], max_len: usize, length_normalize: bool, mut cost: F) -> Result<(Vec<f64>, f64)>
where
    P: AsRef<[Token]>,
    F: FnMut(&[Token], &[Token]) -> Result<f64>,
{
    if prompts.is_empty() {
        return Err(Error::domain("no prompts"));
    }
    let n = prompts.len() as f64;
    let mut grad = vec![0.0; policy.num_params()];
    let mut value = 0.0;
    for x in prompts {
        let x = x.as_ref();
        let dist = enumerate_response_distribution(policy, x, max_len)?;
        for (y, p) in dist.outcomes() {
            let c = cost(x, y)?;
            value += p * c / n;
            let norm = if length_normalize { y.len() as f64 } else { 1.0 };
            let w = p * c / (n * norm);
            if w != 0.0 {
                policy.accumulate_grad_log_prob_unchecked(x, y, w, &mut grad);
            }
        }
    }
    Ok((grad, value))
}

/// Exact gradient of `C(theta)` for one constraint.
pub fn exact_constraint_gradient<P: AsRef<[Token]>>(
    policy: &Policy,
    spec: &ConstraintSpec,
    prompts: &[P],
    max_len: usize,
    length_normalize: bool,
) -> Result<(Vec<f64>, f64)> {
    spec.require_trainable()?;
    spec.reward.check()?;
    exact_policy_gradient(policy, prompts, max_len, length_normalize, |x, y| offset_cost(spec, x, y))
}

/// `(1/k) sum_i barrier_grad(C_i) * dC_i`, i.e. `(mu/k) sum_i dC_i / max(-C_i, mu^2)`.
pub fn barrier_weighted_sum(grads: &[Vec<f64>], c: &[f64], mu: f64) -> Result<Vec<f64>> {
    if grads.len() != c.len() {
        return Err(Error::domain("one constraint value per gradient required"));
    }
    let p = BarrierParams::coupled(mu)?;
    let Some(dim) = grads.first().map(Vec::len) else {
        return Err(Error::domain("no constraints"));
    };
    let k = grads.len() as f64;
    let mut out = vec![0.0; dim];
    for (g, &ci) in grads.iter().zip(c) {
        let w = barrier_grad(ci, p) / k;
        for (o, gi) in out.iter_mut().zip(g) {
            *o += w * gi;
        }
    }
    Ok(out)
}

fn add_into(a: &mut [f64], b: &[f64]) {
    for (x, y) in a.iter_mut().zip(b) {
        *x += y;
    }
}

/// Task gradient plus the barrier-weighted constraint gradients, with the EMA estimates
/// in the barrier denominators. The estimators are read, not updated.
#[allow(clippy::too_many_arguments)]
pub fn l3m_grad<P, X, Y, R>(
    policy: &Policy,
    constraints: &[ConstraintSpec],
    estimators: &[ConstraintEstimator],
    mu: f64,
    task_batch: &[(X, Y)],
    prompts: &[P],
    samples_per_prompt: usize,
    gen: &GenerationConfig,
    rng: &mut R,
) -> Result<Vec<f64>>
where
    P: AsRef<[Token]>,
    X: AsRef<[Token]>,
    Y: AsRef<[Token]>,
    R: Rng + ?Sized,
{
    if constraints.len() != estimators.len() {
        return Err(Error::domain("one estimator per constraint required"));
    }
    let c = estimators.iter().map(|e| e.value()).collect::<Result<Vec<_>>>()?;
    let (mut grad, _) = policy.sft_grad(task_batch)?;
    if constraints.is_empty() {
        return Ok(grad);
    }
    let batch = sample_batch(policy, prompts, samples_per_prompt, gen, rng)?;
    let grads = constraints
        .iter()
        .map(|s| constraint_gradient(policy, s, prompts, &batch, false).map(|g| g.grad))
        .collect::<Result<Vec<_>>>()?;
    add_into(&mut grad, &barrier_weighted_sum(&grads, &c, mu)?);
    Ok(grad)
}

/// Exact surrogate `L(theta) + (1/k) sum_i B(C_i(theta))` with enumerated constraint values.
pub fn surrogate_objective_exact<P, X, Y>(
    policy: &Policy,
    constraints: &[ConstraintSpec],
    mu: f64,
    task_batch: &[(X, Y)],
    prompts: &[P],
    max_len: usize,
) -> Result<f64>
where
    P: AsRef<[Token]>,
    X: AsRef<[Token]>,
    Y: AsRef<[Token]>,
{
    let p = BarrierParams::coupled(mu)?;
    let mut g = policy.mean_perplexity(task_batch)?;
    let k = constraints.len() as f64;
    for s in constraints {
        let c = crate::constraints::exact_constraint_value(s, policy, prompts, max_len)?;
        g += barrier_value(c, p) / k;
    }
    Ok(g)
}

/// `l3m_grad` with exact constraint values and exact, unnormalized constraint gradients:
/// the analytic gradient of [`surrogate_objective_exact`].
pub fn l3m_grad_exact<P, X, Y>(
    policy: &Policy,
    constraints: &[ConstraintSpec],
    mu: f64,
    task_batch: &[(X, Y)],
    prompts: &[P],
    max_len: usize,
) -> Result<Vec<f64>>
where
    P: AsRef<[Token]>,
    X: AsRef<[Token]>,
    Y: AsRef<[Token]>,
{
    let (mut grad, _) = policy.sft_grad(task_batch)?;
    if constraints.is_empty() {
        return Ok(grad);
    }
    let mut grads = Vec::with_capacity(constraints.len());
    let mut values = Vec::with_capacity(constraints.len());
    for s in constraints {
        let (g, c) = exact_constraint_gradient(policy, s, prompts, max_len, false)?;
        grads.push(g);
        values.push(c);
    }
    add_into(&mut grad, &barrier_weighted_sum(&grads, &values, mu)?);
    Ok(grad)
}

fn check_alphas(rewards: &[RewardFn], alphas: &[f64]) -> Result<()> {
    if rewards.len() != alphas.len() {
        return Err(Error::domain(format!(
            "{} weights for {} rewards",
            alphas.len(),
            rewards.len()
        )));
    }
    if alphas.iter().any(|a| !(a.is_finite() && *a >= 0.0)) {
        return Err(Error::domain("reward weights must be non-negative"));
    }
    for r in rewards {
        r.check()?;
    }
    Ok(())
}

/// Per-sample combined rewards `sum_i alpha_i r_i(y | x)` and each reward's batch mean.
pub fn weighted_rewards<P: AsRef<[Token]>>(
    rewards: &[RewardFn],
    alphas: &[f64],
    prompts: &[P],
    batch: &SampleBatch,
) -> Result<(Vec<f64>, Vec<f64>)> {
    check_alphas(rewards, alphas)?;
    let mut combined = vec![0.0; batch.len()];
    let mut means = vec![0.0; rewards.len()];
    for (j, (&i, y)) in batch.prompt_index.iter().zip(&batch.responses).enumerate() {
        for (k, (r, a)) in rewards.iter().zip(alphas).enumerate() {
            let v = r.reward(prompts[i].as_ref(), y)?;
            combined[j] += a * v;
            means[k] += v / batch.len() as f64;
        }
    }
    Ok((combined, means))
}

/// Descent direction for `-E[sum_i alpha_i r_i]`.
pub fn weighted_sum_grad<P: AsRef<[Token]>, R: Rng + ?Sized>(
    policy: &Policy,
    rewards: &[RewardFn],
    alphas: &[f64],
    prompts: &[P],
    samples_per_prompt: usize,
    gen: &GenerationConfig,
    rng: &mut R,
) -> Result<Vec<f64>> {
    check_alphas(rewards, alphas)?;
    let batch = sample_batch(policy, prompts, samples_per_prompt, gen, rng)?;
    let (combined, _) = weighted_rewards(rewards, alphas, prompts, &batch)?;
    let neg: Vec<f64> = combined.iter().map(|r| -r).collect();
    Ok(score_function_grad(policy, prompts, &batch, &neg))
}

/// Exact counterpart of [`weighted_sum_grad`].
pub fn weighted_sum_grad_exact<P: AsRef<[Token]>>(
    policy: &Policy,
    rewards: &[RewardFn],
    alphas: &[f64],
    prompts: &[P],
    max_len: usize,
    length_normalize: bool,
) -> Result<Vec<f64>> {
    check_alphas(rewards, alphas)?;
    exact_policy_gradient(policy, prompts, max_len, length_normalize, |x, y| {
        let mut total = 0.0;
        for (r, a) in rewards.iter().zip(alphas) {
            total += a * r.reward(x, y)?;
        }
        Ok(-total)
    })
    .map(|(g, _)| g)
}
