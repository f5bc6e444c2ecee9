//! Constraint definitions, offset costs and the EMA estimate of `C_i(theta)`.
//!
//! Sign convention: `C_i = E[c_i] <= 0` means the constraint holds, where the
//! offset cost is `c_i = b_i - r_i(y | x)` for expectation constraints.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{enumerate_response_distribution, Policy, Token};
use crate::rewards::RewardFn;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ConstraintKind {
    /// `E[r] >= b`.
    Expectation,
    /// `Pr[r >= b] >= 1 - epsilon`.
    Chance { epsilon: f64 },
    /// `r >= b` on every sample; reported, never optimized.
    UniformDiagnostic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintSpec {
    pub reward: RewardFn,
    pub b: f64,
    pub kind: ConstraintKind,
}

impl ConstraintSpec {
    pub fn new(reward: RewardFn, b: f64, kind: ConstraintKind) -> Result<Self> {
        if !b.is_finite() {
            return Err(Error::domain("constraint threshold must be finite"));
        }
        if let ConstraintKind::Chance { epsilon } = kind {
            if !(epsilon > 0.0 && epsilon < 1.0) {
                return Err(Error::domain(format!("chance epsilon must lie in (0, 1), got {epsilon}")));
            }
        }
        Ok(Self { reward, b, kind })
    }

    pub fn expectation(reward: RewardFn, b: f64) -> Result<Self> {
        Self::new(reward, b, ConstraintKind::Expectation)
    }

    pub fn is_trainable(&self) -> bool {
        !matches!(self.kind, ConstraintKind::UniformDiagnostic)
    }

    pub fn require_trainable(&self) -> Result<()> {
        if self.is_trainable() {
            Ok(())
        } else {
            Err(Error::Refused(format!(
                "uniform constraint on `{}` is a diagnostic and has no trainable cost",
                self.reward.name
            )))
        }
    }

    /// Turns a reward value into the offset cost.
    pub fn cost_of_reward(&self, r: f64) -> Result<f64> {
        match self.kind {
            ConstraintKind::Expectation => Ok(self.b - r),
            ConstraintKind::Chance { epsilon } => Ok((1.0 - epsilon) - if r >= self.b { 1.0 } else { 0.0 }),
            ConstraintKind::UniformDiagnostic => self.require_trainable().map(|()| 0.0),
        }
    }
}

pub fn offset_cost(spec: &ConstraintSpec, prompt: &[Token], response: &[Token]) -> Result<f64> {
    spec.require_trainable()?;
    spec.cost_of_reward(spec.reward.reward(prompt, response)?)
}

/// Exponential moving average of the batch-mean offset cost.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConstraintEstimator {
    pub ema_value: f64,
    pub smoothing: f64,
    pub initialized: bool,
}

impl Default for ConstraintEstimator {
    fn default() -> Self {
        Self {
            ema_value: 0.0,
            smoothing: 0.1,
            initialized: false,
        }
    }
}

impl ConstraintEstimator {
    pub fn new(smoothing: f64) -> Result<Self> {
        if !(smoothing > 0.0 && smoothing <= 1.0) {
            return Err(Error::domain(format!("smoothing must lie in (0, 1], got {smoothing}")));
        }
        Ok(Self {
            smoothing,
            ..Self::default()
        })
    }

    /// The first update adopts the batch mean; later ones blend it in.
    pub fn ema_update(&mut self, batch_mean_cost: f64) -> Result<f64> {
        if !batch_mean_cost.is_finite() {
            return Err(Error::domain(format!("non-finite batch cost {batch_mean_cost}")));
        }
        if self.initialized {
            self.ema_value = self.smoothing * batch_mean_cost + (1.0 - self.smoothing) * self.ema_value;
        } else {
            self.ema_value = batch_mean_cost;
            self.initialized = true;
        }
        Ok(self.ema_value)
    }

    pub fn value(&self) -> Result<f64> {
        if self.initialized {
            Ok(self.ema_value)
        } else {
            Err(Error::state("constraint estimator has not seen a batch yet"))
        }
    }
}

/// Fraction of samples with `r(y | x) < b`.
pub fn uniform_violation_rate<P, R>(spec: &ConstraintSpec, samples: &[(P, R)]) -> Result<f64>
where
    P: AsRef<[Token]>,
    R: AsRef<[Token]>,
{
    if samples.is_empty() {
        return Err(Error::domain("no samples"));
    }
    let mut violations = 0usize;
    for (x, y) in samples {
        if spec.reward.reward(x.as_ref(), y.as_ref())? < spec.b {
            violations += 1;
        }
    }
    Ok(violations as f64 / samples.len() as f64)
}

/// Exact `C(theta)` under untruncated sampling, averaged over prompts.
pub fn exact_constraint_value<P: AsRef<[Token]>>(spec: &ConstraintSpec, policy: &Policy, prompts: &[P], max_len: usize) -> Result<f64> {
    if prompts.is_empty() {
        return Err(Error::domain("no prompts"));
    }
    spec.require_trainable()?;
    spec.reward.check()?;
    let mut total = 0.0;
    for x in prompts {
        let x = x.as_ref();
        let dist = enumerate_response_distribution(policy, x, max_len)?;
        let mut c = 0.0;
        for (y, p) in dist.outcomes() {
            c += p * offset_cost(spec, x, y)?;
        }
        total += c;
    }
    Ok(total / prompts.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{Architecture, GenerationConfig, Vocab};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_policy(v: usize, seed: u64) -> Policy {
        let mut p = Policy::tabular(Vocab::new(v).unwrap(), 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for x in p.params_mut() {
            *x = rng.random_range(-1.5..1.5);
        }
        p
    }

    #[test]
    fn offset_cost_examples() {
        let spec = ConstraintSpec::expectation(RewardFn::length(), 100.0).unwrap();
        let y = vec![2; 81];
        assert_eq!(offset_cost(&spec, &[], &y).unwrap(), 19.0);
        let chance = ConstraintSpec::new(RewardFn::length(), 5.0, ConstraintKind::Chance { epsilon: 0.1 }).unwrap();
        assert!((offset_cost(&chance, &[], &[2; 5]).unwrap() + 0.1).abs() < 1e-15);
        assert!((offset_cost(&chance, &[], &[2; 4]).unwrap() - 0.9).abs() < 1e-15);
        let uniform = ConstraintSpec::new(RewardFn::length(), 5.0, ConstraintKind::UniformDiagnostic).unwrap();
        assert!(matches!(offset_cost(&uniform, &[], &[2]), Err(Error::Refused(_))));
        assert!(ConstraintSpec::new(RewardFn::length(), 5.0, ConstraintKind::Chance { epsilon: 1.0 }).is_err());
    }

    #[test]
    fn ema_examples() {
        let mut e = ConstraintEstimator::default();
        assert!(e.value().is_err());
        assert_eq!(e.ema_update(0.7).unwrap(), 0.7);
        let mut e = ConstraintEstimator::default();
        e.ema_update(1.0).unwrap();
        assert!((e.ema_update(0.0).unwrap() - 0.9).abs() < 1e-15);
        assert!(e.ema_update(f64::NAN).is_err());
        let mut e = ConstraintEstimator::default();
        e.ema_update(5.0).unwrap();
        for _ in 0..200 {
            e.ema_update(-2.0).unwrap();
        }
        // 7 * 0.9^200 is about 5e-9.
        assert!((e.ema_value + 2.0).abs() < 1e-6);
    }

    #[test]
    fn uniform_violation_counts() {
        let spec = ConstraintSpec::new(RewardFn::length(), 3.0, ConstraintKind::UniformDiagnostic).unwrap();
        let lens = [1, 2, 5, 3, 4, 3, 2, 9, 3, 3];
        let samples: Vec<(Vec<Token>, Vec<Token>)> = lens.iter().map(|&l| (vec![], vec![2; l])).collect();
        assert!((uniform_violation_rate(&spec, &samples).unwrap() - 0.3).abs() < 1e-15);
        assert_eq!(uniform_violation_rate(&spec, &samples[2..4]).unwrap(), 0.0);
        assert_eq!(uniform_violation_rate(&spec, &samples[..2]).unwrap(), 1.0);
        let empty: &[(Vec<Token>, Vec<Token>)] = &[];
        assert!(uniform_violation_rate(&spec, empty).is_err());
    }

    #[test]
    fn exact_value_on_deterministic_and_uniform_policies() {
        let v = 3;
        // Logits strongly favour EOS, then a fixed content token, for every context.
        let mut det = Policy::tabular(Vocab::new(v).unwrap(), 2).unwrap();
        for row in 0..v {
            det.params_mut()[row * v + 1] = 1000.0;
        }
        let spec = ConstraintSpec::expectation(RewardFn::length(), 4.0).unwrap();
        assert_eq!(exact_constraint_value(&spec, &det, &[vec![2]], 3).unwrap(), 3.0);

        // Uniform over {BOS, EOS, 2}: EOS first w.p. 1/3, else two tokens.
        let uniform = Policy::tabular(Vocab::new(v).unwrap(), 2).unwrap();
        let mean_len = 1.0 / 3.0 + 2.0 * 2.0 / 3.0;
        let c = exact_constraint_value(&spec, &uniform, &[Vec::<Token>::new()], 2).unwrap();
        assert!((c - (4.0 - mean_len)).abs() < 1e-12);
    }

    #[test]
    fn monte_carlo_agrees_with_exact_value() {
        let p = random_policy(3, 4);
        let spec = ConstraintSpec::expectation(RewardFn::length(), 2.0).unwrap();
        let prompt = vec![2];
        let exact = exact_constraint_value(&spec, &p, &[prompt.clone()], 4).unwrap();
        let cfg = GenerationConfig::new(1.0, 4, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = 100_000;
        let costs: Vec<f64> = (0..n)
            .map(|_| offset_cost(&spec, &prompt, &p.sample(&prompt, &cfg, &mut rng).unwrap()).unwrap())
            .collect();
        let mean = crate::stats::mean(&costs);
        let se = crate::stats::std_dev(&costs) / (n as f64).sqrt();
        assert!((mean - exact).abs() <= 3.0 * se, "{mean} vs {exact} (se {se})");
    }

    #[test]
    fn chance_transform_matches_probability_of_success() {
        for seed in 0..40 {
            let p = random_policy(4, seed);
            let prompt = vec![3];
            let b = 1.0 + (seed % 3) as f64;
            let eps = 0.05 + 0.1 * (seed % 8) as f64;
            let spec = ConstraintSpec::new(RewardFn::length(), b, ConstraintKind::Chance { epsilon: eps }).unwrap();
            let c = exact_constraint_value(&spec, &p, &[prompt.clone()], 3).unwrap();
            let dist = enumerate_response_distribution(&p, &prompt, 3).unwrap();
            let success = dist.expectation(|y| if y.len() as f64 >= b { 1.0 } else { 0.0 });
            assert!((c - ((1.0 - eps) - success)).abs() < 1e-12);
            assert_eq!(c <= 0.0, success >= 1.0 - eps);
        }
    }

    #[test]
    fn uniform_constraint_has_no_exact_value() {
        let p = random_policy(3, 0);
        let spec = ConstraintSpec::new(RewardFn::length(), 1.0, ConstraintKind::UniformDiagnostic).unwrap();
        assert!(matches!(exact_constraint_value(&spec, &p, &[vec![2]], 2), Err(Error::Refused(_))));
        let large = Policy::init(Vocab::new(16).unwrap(), Architecture::default(), 0).unwrap();
        let spec = ConstraintSpec::expectation(RewardFn::length(), 1.0).unwrap();
        assert!(matches!(exact_constraint_value(&spec, &large, &[vec![2]], 6), Err(Error::Refused(_))));
    }

    proptest! {
        #[test]
        fn ema_stays_within_input_range(
            first in -5.0f64..5.0,
            rest in proptest::collection::vec(-5.0f64..5.0, 0..100),
            smoothing in 0.01f64..1.0,
        ) {
            let mut e = ConstraintEstimator::new(smoothing).unwrap();
            let (mut lo, mut hi) = (first, first);
            e.ema_update(first).unwrap();
            for x in rest {
                lo = lo.min(x);
                hi = hi.max(x);
                let v = e.ema_update(x).unwrap();
                prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
            }
        }

        #[test]
        fn sign_convention_agrees(lens in proptest::collection::vec(1usize..20, 1..50), b in 0.0f64..20.0) {
            let spec = ConstraintSpec::expectation(RewardFn::length(), b).unwrap();
            let costs: Vec<f64> = lens.iter().map(|&l| offset_cost(&spec, &[], &vec![2; l]).unwrap()).collect();
            let rewards: Vec<f64> = lens.iter().map(|&l| l as f64).collect();
            let c = crate::stats::mean(&costs);
            let r = crate::stats::mean(&rewards);
            prop_assert!((c - (b - r)).abs() < 1e-9);
            // Both sides computed independently; compare away from the tie.
            if (r - b).abs() > 1e-9 {
                prop_assert_eq!(c <= 0.0, r >= b);
            }
        }
    }
}
