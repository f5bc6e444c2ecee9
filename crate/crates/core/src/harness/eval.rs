use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::constraints::{ConstraintKind, ConstraintSpec};
use crate::error::{Error, Result};
use crate::policy::{GenerationConfig, Policy, Token};
use crate::rewards::RewardFn;
use crate::stats::{mean, std_dev, Summary};
use crate::trainer::Pair;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default = "default_top_p")]
    pub top_p: f64,
    pub max_len: usize,
    #[serde(default = "default_samples")]
    pub samples_per_prompt: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_top_p() -> f64 {
    0.9
}
fn default_samples() -> usize {
    4
}

impl EvalConfig {
    pub fn new(max_len: usize) -> Self {
        Self {
            top_p: default_top_p(),
            max_len,
            samples_per_prompt: default_samples(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardReport {
    pub name: String,
    #[serde(flatten)]
    pub summary: Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintReport {
    pub reward: String,
    pub kind: ConstraintKind,
    pub threshold: f64,
    /// Mean reward for expectation constraints, success rate for chance constraints,
    /// minimum reward for uniform ones.
    pub value: f64,
    /// `value` minus its requirement; non-negative iff satisfied.
    pub margin: f64,
    pub satisfied: bool,
    /// Fraction of samples with reward below the threshold.
    pub violation_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub num_pairs: usize,
    pub perplexity_mean: f64,
    pub perplexity_std: f64,
    pub sample_count: usize,
    pub response_length: Summary,
    pub rewards: Vec<RewardReport>,
    pub constraints: Vec<ConstraintReport>,
}

impl EvalReport {
    pub fn reward(&self, name: &str) -> Option<&RewardReport> {
        self.rewards.iter().find(|r| r.name == name)
    }
}

/// Sampled responses behind a report, for plot data.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSamples {
    pub prompt_index: Vec<usize>,
    pub responses: Vec<Vec<Token>>,
    pub reward_names: Vec<String>,
    /// `rewards[j][i]` is reward `i` of response `j`.
    pub rewards: Vec<Vec<f64>>,
}

/// Gold-pair perplexity plus reward and constraint statistics of sampled responses.
///
/// Constraint rewards that are not in `rewards` are scored as well.
pub fn evaluate(policy: &Policy, test: &[Pair], rewards: &[RewardFn], constraints: &[ConstraintSpec], cfg: &EvalConfig) -> Result<(EvalReport, EvalSamples)> {
    if test.is_empty() {
        return Err(Error::domain("empty test split"));
    }
    if cfg.samples_per_prompt == 0 {
        return Err(Error::domain("samples_per_prompt must be positive"));
    }
    let gen = GenerationConfig::new(cfg.top_p, cfg.max_len, cfg.seed)?;
    let ppl = test
        .iter()
        .map(|(x, y)| policy.perplexity(x, y))
        .collect::<Result<Vec<_>>>()?;

    let mut scored: Vec<RewardFn> = rewards.to_vec();
    for c in constraints {
        if !scored.iter().any(|r| r.name == c.reward.name) {
            scored.push(c.reward.clone());
        }
    }
    for r in &scored {
        r.check()?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut samples = EvalSamples {
        prompt_index: Vec::new(),
        responses: Vec::new(),
        reward_names: scored.iter().map(|r| r.name.clone()).collect(),
        rewards: Vec::new(),
    };
    for (i, (x, _)) in test.iter().enumerate() {
        for _ in 0..cfg.samples_per_prompt {
            let y = policy.sample(x, &gen, &mut rng)?;
            let r = scored.iter().map(|f| f.reward(x, &y)).collect::<Result<Vec<_>>>()?;
            samples.prompt_index.push(i);
            samples.responses.push(y);
            samples.rewards.push(r);
        }
    }

    let column = |i: usize| samples.rewards.iter().map(|r| r[i]).collect::<Vec<f64>>();
    let reward_reports = scored
        .iter()
        .enumerate()
        .map(|(i, r)| {
            Ok(RewardReport {
                name: r.name.clone(),
                summary: Summary::from_samples(&column(i))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut constraint_reports = Vec::with_capacity(constraints.len());
    for c in constraints {
        let idx = scored.iter().position(|r| r.name == c.reward.name).expect("scored above");
        let vals = column(idx);
        let violation_rate = vals.iter().filter(|&&v| v < c.b).count() as f64 / vals.len() as f64;
        let (value, margin) = match c.kind {
            ConstraintKind::Expectation => {
                let m = mean(&vals);
                (m, m - c.b)
            }
            ConstraintKind::Chance { epsilon } => {
                let success = 1.0 - violation_rate;
                (success, success - (1.0 - epsilon))
            }
            ConstraintKind::UniformDiagnostic => {
                let min = vals.iter().copied().fold(f64::INFINITY, f64::min);
                (min, min - c.b)
            }
        };
        constraint_reports.push(ConstraintReport {
            reward: c.reward.name.clone(),
            kind: c.kind,
            threshold: c.b,
            value,
            margin,
            satisfied: margin >= 0.0,
            violation_rate,
        });
    }

    let lengths: Vec<f64> = samples.responses.iter().map(|y| y.len() as f64).collect();
    let report = EvalReport {
        num_pairs: test.len(),
        perplexity_mean: mean(&ppl),
        perplexity_std: std_dev(&ppl),
        sample_count: samples.responses.len(),
        response_length: Summary::from_samples(&lengths)?,
        rewards: reward_reports,
        constraints: constraint_reports,
    };
    Ok((report, samples))
}

/// `sample,prompt,length` rows.
pub fn lengths_csv(samples: &EvalSamples) -> String {
    let mut out = String::from("sample,prompt,length\n");
    for (j, (i, y)) in samples.prompt_index.iter().zip(&samples.responses).enumerate() {
        out.push_str(&format!("{j},{i},{}\n", y.len()));
    }
    out
}

/// `sample,prompt,<reward>...` rows, one column per scored reward.
pub fn reward_scatter_csv(samples: &EvalSamples) -> String {
    let mut out = String::from("sample,prompt");
    for n in &samples.reward_names {
        out.push(',');
        out.push_str(n);
    }
    out.push('\n');
    for (j, (i, r)) in samples.prompt_index.iter().zip(&samples.rewards).enumerate() {
        out.push_str(&format!("{j},{i}"));
        for v in r {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{Architecture, Vocab};

    fn pairs() -> Vec<Pair> {
        vec![
            (vec![3, 4], vec![3, 4, 1]),
            (vec![2], vec![2, 1]),
            (vec![2, 2, 4], vec![2, 2, 4, 1]),
        ]
    }

    #[test]
    fn uniform_policy_perplexity_is_log_vocab() {
        let p = Policy::tabular(Vocab::new(16).unwrap(), 2).unwrap();
        let (r, _) = evaluate(&p, &pairs(), &[RewardFn::length()], &[], &EvalConfig::new(8)).unwrap();
        assert!((r.perplexity_mean - 16f64.ln()).abs() < 1e-9);
        assert!(r.perplexity_std < 1e-12);
        assert_eq!(r.sample_count, 12);
    }

    #[test]
    fn deterministic_policy_has_zero_reward_spread() {
        let v = 6;
        let mut p = Policy::tabular(Vocab::new(v).unwrap(), 2).unwrap();
        // Always emit token 4 after the marker, then EOS after 4.
        for row in 0..v {
            let target = if row == 4 { 1 } else { 4 };
            p.params_mut()[row * v + target] = 1000.0;
        }
        let spec = ConstraintSpec::expectation(RewardFn::length(), 3.0).unwrap();
        let (r, s) = evaluate(&p, &pairs(), &[], &[spec], &EvalConfig::new(8)).unwrap();
        let len = r.reward("length").unwrap();
        assert_eq!(len.summary.std, 0.0);
        assert_eq!(len.summary.mean, 2.0);
        assert!(s.responses.iter().all(|y| y == &vec![4, 1]));
        assert_eq!(r.constraints[0].margin, -1.0);
        assert!(!r.constraints[0].satisfied);
        assert_eq!(r.constraints[0].violation_rate, 1.0);
    }

    #[test]
    fn quantiles_match_a_sort_based_recomputation() {
        let p = Policy::init(Vocab::new(8).unwrap(), Architecture::Mlp { embed_dim: 4, hidden_dim: 8 }, 3).unwrap();
        let cfg = EvalConfig {
            samples_per_prompt: 33,
            ..EvalConfig::new(10)
        };
        let (r, s) = evaluate(&p, &pairs(), &[RewardFn::length()], &[], &cfg).unwrap();
        let mut lens: Vec<f64> = s.responses.iter().map(|y| y.len() as f64).collect();
        lens.sort_by(f64::total_cmp);
        let n = lens.len();
        // Linear interpolation between closest ranks, recomputed by hand.
        let q = |p: f64| {
            let h = p * (n - 1) as f64;
            let lo = h.floor() as usize;
            lens[lo] + (h - lo as f64) * (lens[(lo + 1).min(n - 1)] - lens[lo])
        };
        let l = &r.reward("length").unwrap().summary;
        assert_eq!((l.min, l.max), (lens[0], lens[n - 1]));
        for (got, p) in [(l.q25, 0.25), (l.median, 0.5), (l.q75, 0.75)] {
            assert!((got - q(p)).abs() < 1e-12);
        }
        assert_eq!(r.response_length, *l);
    }

    #[test]
    fn chance_and_uniform_margins() {
        let p = Policy::tabular(Vocab::new(5).unwrap(), 2).unwrap();
        let chance = ConstraintSpec::new(RewardFn::length(), 2.0, ConstraintKind::Chance { epsilon: 0.5 }).unwrap();
        let uniform = ConstraintSpec::new(RewardFn::length(), 1.0, ConstraintKind::UniformDiagnostic).unwrap();
        let (r, s) = evaluate(&p, &pairs(), &[], &[chance, uniform], &EvalConfig::new(6)).unwrap();
        let ok = s.responses.iter().filter(|y| y.len() >= 2).count() as f64 / s.responses.len() as f64;
        assert!((r.constraints[0].value - ok).abs() < 1e-12);
        assert!((r.constraints[0].margin - (ok - 0.5)).abs() < 1e-12);
        assert_eq!(r.constraints[1].value, 1.0);
        assert!(r.constraints[1].satisfied);
        assert!(evaluate(&p, &[], &[], &[], &EvalConfig::new(6)).is_err());
    }

    #[test]
    fn csv_headers() {
        let p = Policy::tabular(Vocab::new(5).unwrap(), 2).unwrap();
        let (_, s) = evaluate(&p, &pairs(), &[RewardFn::length(), RewardFn::neg_length()], &[], &EvalConfig::new(6)).unwrap();
        assert!(lengths_csv(&s).starts_with("sample,prompt,length\n0,0,"));
        let scatter = reward_scatter_csv(&s);
        assert!(scatter.starts_with("sample,prompt,length,neg_length\n"));
        assert_eq!(scatter.lines().count(), 1 + s.responses.len());
    }
}
