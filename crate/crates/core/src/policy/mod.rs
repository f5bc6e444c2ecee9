//! Small autoregressive softmax policies over toy vocabularies.
//!
//! A policy scores a response `y` given a prompt `x` as
//! `log pi(y | x) = sum_i log pi(y_i | x, y_<i)`. Every response step sees the
//! prompt followed by a begin-of-sequence marker and the response prefix, i.e.
//! the stream `x ++ [BOS] ++ y_<i`. The end-of-sequence token is part of the
//! response and counts toward its length.
//!
//! Two parameterizations share one flat parameter vector:
//!
//! * [`Architecture::Tabular`]: an n-gram logits table indexed by the last
//!   `order - 1` tokens of the stream (left-padded with BOS).
//! * [`Architecture::Mlp`]: a one-hidden-layer tanh network over the embeddings of
//!   the previous token and of the prompt token aligned with the current response
//!   position (BOS once the prompt is exhausted).

mod checkpoint;
mod enumerate;
mod sampling;

pub use checkpoint::{Checkpoint, CheckpointKind};
pub(crate) use checkpoint::write_atomic;
pub use enumerate::{enumerate_response_distribution, ResponseDistribution, ENUMERATION_LIMIT};
pub use sampling::{nucleus, GenerationConfig};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Token id. Ids `0` and `1` are reserved for [`Vocab::BOS`] and [`Vocab::EOS`].
pub type Token = u32;

/// Vocabulary of `size` symbols including the two reserved ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "usize", into = "usize")]
pub struct Vocab {
    size: usize,
}

impl Vocab {
    pub const BOS: Token = 0;
    pub const EOS: Token = 1;

    pub fn new(size: usize) -> Result<Self> {
        if size < 3 {
            return Err(Error::domain(format!(
                "vocabulary needs at least 3 symbols (bos, eos and one content token), got {size}"
            )));
        }
        if size > u32::MAX as usize {
            return Err(Error::domain("vocabulary too large"));
        }
        Ok(Self { size })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    /// Ids of the non-reserved tokens.
    pub fn content_tokens(&self) -> impl Iterator<Item = Token> {
        2..self.size as Token
    }

    pub fn check(&self, tokens: &[Token]) -> Result<()> {
        match tokens.iter().find(|&&t| t as usize >= self.size) {
            Some(t) => Err(Error::domain(format!(
                "token {t} outside vocabulary of size {}",
                self.size
            ))),
            None => Ok(()),
        }
    }
}

impl TryFrom<usize> for Vocab {
    type Error = Error;
    fn try_from(size: usize) -> Result<Self> {
        Vocab::new(size)
    }
}

impl From<Vocab> for usize {
    fn from(v: Vocab) -> usize {
        v.size
    }
}

/// Parameterization of a [`Policy`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Architecture {
    Tabular { order: usize },
    Mlp { embed_dim: usize, hidden_dim: usize },
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture::Tabular { order: 2 }
    }
}

impl Architecture {
    fn validate(&self, vocab: Vocab) -> Result<()> {
        match *self {
            Architecture::Tabular { order } => {
                if !(1..=3).contains(&order) {
                    return Err(Error::domain(format!("n-gram order must be 1, 2 or 3, got {order}")));
                }
                if vocab.size().checked_pow(order as u32).is_none_or(|n| n > 1 << 24) {
                    return Err(Error::domain("n-gram table too large"));
                }
            }
            Architecture::Mlp {
                embed_dim,
                hidden_dim,
            } => {
                if embed_dim == 0 || hidden_dim == 0 {
                    return Err(Error::domain("mlp dimensions must be positive"));
                }
            }
        }
        Ok(())
    }

    fn num_params(&self, vocab: Vocab) -> usize {
        let v = vocab.size();
        match *self {
            Architecture::Tabular { order } => v.pow(order as u32),
            Architecture::Mlp {
                embed_dim: d,
                hidden_dim: h,
            } => v * d + h * 2 * d + h + v * h + v,
        }
    }
}

/// Offsets of the MLP blocks inside the flat parameter vector.
#[derive(Debug, Clone, Copy)]
struct MlpLayout {
    d: usize,
    h: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

impl MlpLayout {
    fn new(v: usize, d: usize, h: usize) -> Self {
        let w1 = v * d;
        let b1 = w1 + h * 2 * d;
        let w2 = b1 + h;
        let b2 = w2 + v * h;
        Self { d, h, w1, b1, w2, b2 }
    }
}

/// Hidden activations of one MLP step, kept for backpropagation.
struct MlpCache {
    prev: usize,
    aligned: usize,
    input: Vec<f64>,
    hidden: Vec<f64>,
}

/// An autoregressive policy `pi_theta`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    vocab: Vocab,
    arch: Architecture,
    params: Vec<f64>,
}

impl Policy {
    /// Policy with the given parameters; the length must match the architecture.
    pub fn from_params(vocab: Vocab, arch: Architecture, params: Vec<f64>) -> Result<Self> {
        arch.validate(vocab)?;
        let n = arch.num_params(vocab);
        if params.len() != n {
            return Err(Error::domain(format!(
                "expected {n} parameters for {arch:?}, got {}",
                params.len()
            )));
        }
        Ok(Self { vocab, arch, params })
    }

    /// Zero logits, i.e. the uniform distribution at every step.
    pub fn tabular(vocab: Vocab, order: usize) -> Result<Self> {
        let arch = Architecture::Tabular { order };
        arch.validate(vocab)?;
        Self::from_params(vocab, arch, vec![0.0; arch.num_params(vocab)])
    }

    /// Gaussian initialization with standard deviation 0.02.
    pub fn mlp(vocab: Vocab, embed_dim: usize, hidden_dim: usize, seed: u64) -> Result<Self> {
        let arch = Architecture::Mlp {
            embed_dim,
            hidden_dim,
        };
        arch.validate(vocab)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 0.02).expect("valid std");
        let params = (0..arch.num_params(vocab))
            .map(|_| normal.sample(&mut rng))
            .collect();
        Self::from_params(vocab, arch, params)
    }

    /// Freshly initialized policy for an architecture.
    pub fn init(vocab: Vocab, arch: Architecture, seed: u64) -> Result<Self> {
        match arch {
            Architecture::Tabular { order } => Self::tabular(vocab, order),
            Architecture::Mlp {
                embed_dim,
                hidden_dim,
            } => Self::mlp(vocab, embed_dim, hidden_dim, seed),
        }
    }

    pub fn vocab(&self) -> Vocab {
        self.vocab
    }

    pub fn architecture(&self) -> Architecture {
        self.arch
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn mlp_layout(&self) -> Option<MlpLayout> {
        match self.arch {
            Architecture::Mlp {
                embed_dim,
                hidden_dim,
            } => Some(MlpLayout::new(self.vocab.size(), embed_dim, hidden_dim)),
            Architecture::Tabular { .. } => None,
        }
    }

    /// Row of the n-gram table used for response position `pos`.
    fn tabular_row(&self, order: usize, prompt: &[Token], prefix: &[Token]) -> usize {
        let v = self.vocab.size();
        let mut row = 0usize;
        // Most recent token is the least significant digit.
        for back in 0..order - 1 {
            let tok = stream_token_back(prompt, prefix, back);
            row += tok as usize * v.pow(back as u32);
        }
        row
    }

    fn mlp_forward(&self, l: MlpLayout, prompt: &[Token], pos: usize, prev: Token, logits: &mut [f64]) -> MlpCache {
        let p = &self.params;
        let aligned = prompt.get(pos).copied().unwrap_or(Vocab::BOS) as usize;
        let prev = prev as usize;
        let mut input = Vec::with_capacity(2 * l.d);
        input.extend_from_slice(&p[prev * l.d..(prev + 1) * l.d]);
        input.extend_from_slice(&p[aligned * l.d..(aligned + 1) * l.d]);
        let mut hidden = vec![0.0; l.h];
        for (j, hj) in hidden.iter_mut().enumerate() {
            let row = &p[l.w1 + j * 2 * l.d..l.w1 + (j + 1) * 2 * l.d];
            let a: f64 = row.iter().zip(&input).map(|(w, x)| w * x).sum::<f64>() + p[l.b1 + j];
            *hj = a.tanh();
        }
        for (k, out) in logits.iter_mut().enumerate() {
            let row = &p[l.w2 + k * l.h..l.w2 + (k + 1) * l.h];
            *out = row.iter().zip(&hidden).map(|(w, x)| w * x).sum::<f64>() + p[l.b2 + k];
        }
        MlpCache {
            prev,
            aligned,
            input,
            hidden,
        }
    }

    fn mlp_backward(&self, l: MlpLayout, cache: &MlpCache, dlogits: &[f64], grad: &mut [f64]) {
        let p = &self.params;
        let mut dhidden = vec![0.0; l.h];
        for (k, &g) in dlogits.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let base = l.w2 + k * l.h;
            for j in 0..l.h {
                grad[base + j] += g * cache.hidden[j];
                dhidden[j] += g * p[base + j];
            }
            grad[l.b2 + k] += g;
        }
        let mut dinput = vec![0.0; 2 * l.d];
        for j in 0..l.h {
            let da = dhidden[j] * (1.0 - cache.hidden[j] * cache.hidden[j]);
            if da == 0.0 {
                continue;
            }
            let base = l.w1 + j * 2 * l.d;
            for i in 0..2 * l.d {
                grad[base + i] += da * cache.input[i];
                dinput[i] += da * p[base + i];
            }
            grad[l.b1 + j] += da;
        }
        for i in 0..l.d {
            grad[cache.prev * l.d + i] += dinput[i];
            grad[cache.aligned * l.d + i] += dinput[l.d + i];
        }
    }

    /// Next-token logits after `prompt` and response prefix `prefix`.
    fn logits_into(&self, prompt: &[Token], prefix: &[Token], logits: &mut [f64]) -> Option<MlpCache> {
        let v = self.vocab.size();
        match self.arch {
            Architecture::Tabular { order } => {
                let row = self.tabular_row(order, prompt, prefix);
                logits.copy_from_slice(&self.params[row * v..(row + 1) * v]);
                None
            }
            Architecture::Mlp { .. } => {
                let l = self.mlp_layout().expect("mlp layout");
                let prev = prefix.last().copied().unwrap_or(Vocab::BOS);
                Some(self.mlp_forward(l, prompt, prefix.len(), prev, logits))
            }
        }
    }

    /// Next-token distribution `pi(. | x, prefix)`.
    pub fn next_token_distribution(&self, prompt: &[Token], prefix: &[Token]) -> Result<Vec<f64>> {
        self.vocab.check(prompt)?;
        self.vocab.check(prefix)?;
        let mut probs = vec![0.0; self.vocab.size()];
        self.logits_into(prompt, prefix, &mut probs);
        softmax_in_place(&mut probs);
        Ok(probs)
    }

    pub(crate) fn next_token_distribution_unchecked(&self, prompt: &[Token], prefix: &[Token], probs: &mut [f64]) {
        self.logits_into(prompt, prefix, probs);
        softmax_in_place(probs);
    }

    fn check_pair(&self, prompt: &[Token], response: &[Token]) -> Result<()> {
        self.vocab.check(prompt)?;
        self.vocab.check(response)?;
        if let Some(pos) = response.iter().position(|&t| t == Vocab::EOS) {
            if pos + 1 != response.len() {
                return Err(Error::domain("end-of-sequence token before the end of the response"));
            }
        }
        Ok(())
    }

    /// `sum_i log pi(y_i | x, y_<i)`, including the end-of-sequence token.
    pub fn log_prob(&self, prompt: &[Token], response: &[Token]) -> Result<f64> {
        self.check_pair(prompt, response)?;
        Ok(self.log_prob_unchecked(prompt, response))
    }

    pub(crate) fn log_prob_unchecked(&self, prompt: &[Token], response: &[Token]) -> f64 {
        let mut logits = vec![0.0; self.vocab.size()];
        let mut total = 0.0;
        for i in 0..response.len() {
            self.logits_into(prompt, &response[..i], &mut logits);
            total += log_softmax_at(&logits, response[i] as usize);
        }
        total
    }

    /// Length-normalized negative log-likelihood of the response given the prompt.
    pub fn perplexity(&self, prompt: &[Token], response: &[Token]) -> Result<f64> {
        if response.is_empty() {
            return Err(Error::domain("perplexity of an empty response"));
        }
        Ok(-self.log_prob(prompt, response)? / response.len() as f64)
    }

    /// Adds `scale * d/dtheta log pi(y | x)` into `grad` and returns `log pi(y | x)`.
    pub fn accumulate_grad_log_prob(
        &self,
        prompt: &[Token],
        response: &[Token],
        scale: f64,
        grad: &mut [f64],
    ) -> Result<f64> {
        self.check_pair(prompt, response)?;
        if grad.len() != self.params.len() {
            return Err(Error::domain("gradient buffer has the wrong length"));
        }
        Ok(self.accumulate_grad_log_prob_unchecked(prompt, response, scale, grad))
    }

    pub(crate) fn accumulate_grad_log_prob_unchecked(
        &self,
        prompt: &[Token],
        response: &[Token],
        scale: f64,
        grad: &mut [f64],
    ) -> f64 {
        let v = self.vocab.size();
        let mut buf = vec![0.0; v];
        let mut total = 0.0;
        for i in 0..response.len() {
            let target = response[i] as usize;
            let cache = self.logits_into(prompt, &response[..i], &mut buf);
            total += log_softmax_at(&buf, target);
            softmax_in_place(&mut buf);
            // d log softmax_target / d logits = onehot(target) - softmax
            for (k, b) in buf.iter_mut().enumerate() {
                let onehot = if k == target { 1.0 } else { 0.0 };
                *b = scale * (onehot - *b);
            }
            match self.arch {
                Architecture::Tabular { order } => {
                    let row = self.tabular_row(order, prompt, &response[..i]);
                    for (g, d) in grad[row * v..(row + 1) * v].iter_mut().zip(&buf) {
                        *g += d;
                    }
                }
                Architecture::Mlp { .. } => {
                    let layout = self.mlp_layout().expect("mlp layout");
                    self.mlp_backward(layout, cache.as_ref().expect("mlp cache"), &buf, grad);
                }
            }
        }
        total
    }

    /// `d/dtheta log pi(y | x)`, divided by `|y|` when `length_normalize` is set.
    pub fn grad_log_prob(&self, prompt: &[Token], response: &[Token], length_normalize: bool) -> Result<Vec<f64>> {
        let scale = if length_normalize && !response.is_empty() {
            1.0 / response.len() as f64
        } else {
            1.0
        };
        let mut grad = vec![0.0; self.params.len()];
        self.accumulate_grad_log_prob(prompt, response, scale, &mut grad)?;
        Ok(grad)
    }

    /// Mean perplexity over a batch of (prompt, response) pairs.
    pub fn mean_perplexity<P, R>(&self, batch: &[(P, R)]) -> Result<f64>
    where
        P: AsRef<[Token]>,
        R: AsRef<[Token]>,
    {
        if batch.is_empty() {
            return Err(Error::domain("empty batch"));
        }
        let mut total = 0.0;
        for (x, y) in batch {
            total += self.perplexity(x.as_ref(), y.as_ref())?;
        }
        Ok(total / batch.len() as f64)
    }

    /// Gradient of the batch-mean perplexity. Returns the gradient and the mean perplexity.
    pub fn sft_grad<P, R>(&self, batch: &[(P, R)]) -> Result<(Vec<f64>, f64)>
    where
        P: AsRef<[Token]>,
        R: AsRef<[Token]>,
    {
        if batch.is_empty() {
            return Err(Error::domain("empty batch"));
        }
        let n = batch.len() as f64;
        let mut grad = vec![0.0; self.params.len()];
        let mut loss = 0.0;
        for (x, y) in batch {
            let (x, y) = (x.as_ref(), y.as_ref());
            if y.is_empty() {
                return Err(Error::domain("perplexity of an empty response"));
            }
            let len = y.len() as f64;
            let lp = self.accumulate_grad_log_prob(x, y, -1.0 / (len * n), &mut grad)?;
            loss -= lp / len;
        }
        Ok((grad, loss / n))
    }
}

/// Token `back` positions before the next response token in `x ++ [BOS] ++ prefix`,
/// with BOS padding before the start of the stream.
fn stream_token_back(prompt: &[Token], prefix: &[Token], back: usize) -> Token {
    if back < prefix.len() {
        prefix[prefix.len() - 1 - back]
    } else if back == prefix.len() {
        Vocab::BOS
    } else {
        let into_prompt = back - prefix.len() - 1;
        if into_prompt < prompt.len() {
            prompt[prompt.len() - 1 - into_prompt]
        } else {
            Vocab::BOS
        }
    }
}

pub(crate) fn softmax_in_place(xs: &mut [f64]) {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in xs.iter_mut() {
        *x /= sum;
    }
}

fn log_softmax_at(logits: &[f64], idx: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|&l| (l - max).exp()).sum::<f64>().ln() + max;
    logits[idx] - lse
}
