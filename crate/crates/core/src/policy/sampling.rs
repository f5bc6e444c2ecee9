use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Policy, Token, Vocab};
use crate::error::{Error, Result};

/// Settings for response generation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationConfig {
    #[serde(default = "default_top_p")]
    pub top_p: f64,
    pub max_len: usize,
    #[serde(default)]
    pub rng_seed: u64,
}

fn default_top_p() -> f64 {
    0.9
}

impl GenerationConfig {
    pub fn new(top_p: f64, max_len: usize, rng_seed: u64) -> Result<Self> {
        let cfg = Self {
            top_p,
            max_len,
            rng_seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::domain(format!("top_p must lie in (0, 1], got {}", self.top_p)));
        }
        if self.max_len == 0 {
            return Err(Error::domain("max_len must be positive"));
        }
        Ok(())
    }
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            top_p: default_top_p(),
            max_len: 32,
            rng_seed: 0,
        }
    }
}

/// Smallest set of most probable tokens whose mass reaches `top_p`, renormalized.
///
/// Tokens are ranked by probability with ties broken by token id; the token that
/// crosses the threshold is kept. Returns `(token, probability)` pairs in rank order.
pub fn nucleus(probs: &[f64], top_p: f64) -> Vec<(Token, f64)> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    if top_p >= 1.0 {
        return order.into_iter().map(|i| (i as Token, probs[i])).collect();
    }
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let mut kept = Vec::new();
    let mut mass = 0.0;
    for i in order {
        kept.push((i as Token, probs[i]));
        mass += probs[i];
        if mass >= top_p {
            break;
        }
    }
    for (_, p) in kept.iter_mut() {
        *p /= mass;
    }
    kept
}

fn draw<R: Rng + ?Sized>(choices: &[(Token, f64)], rng: &mut R) -> Token {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for &(t, p) in choices {
        acc += p;
        if u < acc {
            return t;
        }
    }
    // Rounding left `u` above the accumulated mass; take the last token with mass.
    choices
        .iter()
        .rev()
        .find(|(_, p)| *p > 0.0)
        .map(|&(t, _)| t)
        .unwrap_or(choices[0].0)
}

impl Policy {
    /// Draws a response by nucleus sampling. Stops after emitting EOS or at `max_len`
    /// tokens, in which case the response carries no EOS.
    pub fn sample<R: Rng + ?Sized>(&self, prompt: &[Token], cfg: &GenerationConfig, rng: &mut R) -> Result<Vec<Token>> {
        cfg.validate()?;
        self.vocab.check(prompt)?;
        Ok(self.sample_unchecked(prompt, cfg, rng))
    }

    pub(crate) fn sample_unchecked<R: Rng + ?Sized>(&self, prompt: &[Token], cfg: &GenerationConfig, rng: &mut R) -> Vec<Token> {
        let mut response = Vec::with_capacity(cfg.max_len);
        let mut probs = vec![0.0; self.vocab.size()];
        while response.len() < cfg.max_len {
            self.next_token_distribution_unchecked(prompt, &response, &mut probs);
            let tok = draw(&nucleus(&probs, cfg.top_p), rng);
            response.push(tok);
            if tok == Vocab::EOS {
                break;
            }
        }
        response
    }
}
