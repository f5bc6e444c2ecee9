use super::{Policy, Token, Vocab};
use crate::error::{Error, Result};

/// Largest `vocab_size^max_len` that exact enumeration accepts.
pub const ENUMERATION_LIMIT: u128 = 1_000_000;

/// Exact distribution of untruncated sampling (`top_p = 1`) up to `max_len` tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct ResponseDistribution {
    /// Responses ending in EOS, with their probabilities.
    pub terminated: Vec<(Vec<Token>, f64)>,
    /// Responses cut off at `max_len` without EOS, with their probabilities.
    pub truncated: Vec<(Vec<Token>, f64)>,
}

impl ResponseDistribution {
    pub fn terminated_mass(&self) -> f64 {
        self.terminated.iter().map(|(_, p)| p).sum()
    }

    pub fn truncated_mass(&self) -> f64 {
        self.truncated.iter().map(|(_, p)| p).sum()
    }

    /// Every outcome of the sampler, terminated first.
    pub fn outcomes(&self) -> impl Iterator<Item = (&[Token], f64)> {
        self.terminated
            .iter()
            .chain(&self.truncated)
            .map(|(y, p)| (y.as_slice(), *p))
    }

    /// Exact expectation of `f` over the sampler's outcomes.
    pub fn expectation(&self, mut f: impl FnMut(&[Token]) -> f64) -> f64 {
        self.outcomes().map(|(y, p)| p * f(y)).sum()
    }
}

fn check_enumerable(vocab_size: usize, max_len: usize) -> Result<()> {
    let total = (vocab_size as u128).checked_pow(max_len as u32);
    match total {
        Some(n) if n <= ENUMERATION_LIMIT => Ok(()),
        _ => Err(Error::Refused(format!(
            "enumerating {vocab_size}^{max_len} responses exceeds the limit of {ENUMERATION_LIMIT}"
        ))),
    }
}

/// Lists every response of at most `max_len` tokens with its exact probability.
pub fn enumerate_response_distribution(policy: &Policy, prompt: &[Token], max_len: usize) -> Result<ResponseDistribution> {
    if max_len == 0 {
        return Err(Error::domain("max_len must be positive"));
    }
    check_enumerable(policy.vocab().size(), max_len)?;
    policy.vocab().check(prompt)?;
    let mut out = ResponseDistribution {
        terminated: Vec::new(),
        truncated: Vec::new(),
    };
    let mut prefix = Vec::with_capacity(max_len);
    walk(policy, prompt, max_len, &mut prefix, 1.0, &mut out);
    Ok(out)
}

fn walk(policy: &Policy, prompt: &[Token], max_len: usize, prefix: &mut Vec<Token>, mass: f64, out: &mut ResponseDistribution) {
    let mut probs = vec![0.0; policy.vocab().size()];
    policy.next_token_distribution_unchecked(prompt, prefix, &mut probs);
    for (tok, &p) in probs.iter().enumerate() {
        let tok = tok as Token;
        prefix.push(tok);
        if tok == Vocab::EOS {
            out.terminated.push((prefix.clone(), mass * p));
        } else if prefix.len() == max_len {
            out.truncated.push((prefix.clone(), mass * p));
        } else {
            walk(policy, prompt, max_len, prefix, mass * p, out);
        }
        prefix.pop();
    }
}
