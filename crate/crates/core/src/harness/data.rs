//! Synthetic task datasets and two-channel preference data.
//!
//! Task files hold one pair per line: `split`, `prompt`, `response`, tab-separated,
//! with token lists encoded as space-separated decimal ids.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{Token, Vocab};
use crate::rewards::PreferenceTuple;
use crate::trainer::Pair;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// Response repeats the prompt.
    Copy,
    /// Response is the prompt reversed.
    Reverse,
    /// Prompt lists key-value pairs then a query key; response is the queried value.
    KeyedLookup,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub kind: TaskKind,
    #[serde(default = "default_vocab")]
    pub vocab: usize,
    /// Body length range; for keyed lookup, the number of key-value pairs.
    pub min_body: usize,
    pub max_body: usize,
    pub train: usize,
    pub validation: usize,
    pub test: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_vocab() -> usize {
    16
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        let vocab = Vocab::new(self.vocab)?;
        let content = vocab.content_tokens().count();
        if self.min_body == 0 || self.max_body < self.min_body {
            return Err(Error::domain(format!(
                "body length range [{}, {}] is empty or starts at zero",
                self.min_body, self.max_body
            )));
        }
        if self.kind == TaskKind::KeyedLookup && self.max_body > content {
            return Err(Error::domain(format!(
                "keyed lookup with {} keys needs at least that many content tokens, vocab has {content}",
                self.max_body
            )));
        }
        if self.train == 0 || self.test == 0 {
            return Err(Error::domain("train and test splits must be non-empty"));
        }
        Ok(())
    }

    /// Longest response the task produces, EOS included.
    pub fn max_response_len(&self) -> usize {
        match self.kind {
            TaskKind::Copy | TaskKind::Reverse => self.max_body + 1,
            TaskKind::KeyedLookup => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskDataset {
    pub kind: TaskKind,
    pub seed: u64,
    pub train: Vec<Pair>,
    pub validation: Vec<Pair>,
    pub test: Vec<Pair>,
}

/// The task rule: the gold response for a prompt, EOS included.
pub fn task_response(kind: TaskKind, prompt: &[Token]) -> Result<Vec<Token>> {
    let mut y = match kind {
        TaskKind::Copy => prompt.to_vec(),
        TaskKind::Reverse => prompt.iter().rev().copied().collect(),
        TaskKind::KeyedLookup => {
            if prompt.len() < 3 || prompt.len().is_multiple_of(2) {
                return Err(Error::domain("keyed-lookup prompt must be pairs followed by a query"));
            }
            let q = prompt[prompt.len() - 1];
            let v = prompt[..prompt.len() - 1]
                .chunks(2)
                .find(|kv| kv[0] == q)
                .map(|kv| kv[1])
                .ok_or_else(|| Error::domain("query key does not occur in the prompt"))?;
            vec![v]
        }
    };
    y.push(Vocab::EOS);
    Ok(y)
}

fn random_prompt(spec: &TaskSpec, content: &[Token], rng: &mut ChaCha8Rng) -> Vec<Token> {
    let n = rng.random_range(spec.min_body..=spec.max_body);
    match spec.kind {
        TaskKind::Copy | TaskKind::Reverse => (0..n).map(|_| *content.choose(rng).expect("content")).collect(),
        TaskKind::KeyedLookup => {
            let keys: Vec<Token> = content.choose_multiple(rng, n).copied().collect();
            let mut prompt = Vec::with_capacity(2 * n + 1);
            for &k in &keys {
                prompt.push(k);
                prompt.push(*content.choose(rng).expect("content"));
            }
            prompt.push(*keys.choose(rng).expect("keys"));
            prompt
        }
    }
}

/// Deterministic dataset with pairwise-distinct prompts across all splits.
pub fn generate_task_data(spec: &TaskSpec) -> Result<TaskDataset> {
    spec.validate()?;
    let vocab = Vocab::new(spec.vocab)?;
    let content: Vec<Token> = vocab.content_tokens().collect();
    let total = spec.train + spec.validation + spec.test;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut seen = HashSet::with_capacity(total);
    let mut prompts = Vec::with_capacity(total);
    let mut attempts = 0usize;
    while prompts.len() < total {
        attempts += 1;
        if attempts > 100 * total + 1000 {
            return Err(Error::domain(format!(
                "could not draw {total} distinct prompts; widen the body range or vocabulary"
            )));
        }
        let p = random_prompt(spec, &content, &mut rng);
        if seen.insert(p.clone()) {
            prompts.push(p);
        }
    }
    let mut pairs = prompts
        .into_iter()
        .map(|x| task_response(spec.kind, &x).map(|y| (x, y)))
        .collect::<Result<Vec<_>>>()?;
    let test = pairs.split_off(spec.train + spec.validation);
    let validation = pairs.split_off(spec.train);
    Ok(TaskDataset {
        kind: spec.kind,
        seed: spec.seed,
        train: pairs,
        validation,
        test,
    })
}

fn encode(tokens: &[Token]) -> String {
    tokens.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(" ")
}

pub fn write_task_data(path: &Path, data: &TaskDataset) -> Result<()> {
    let mut out = String::new();
    for (split, pairs) in [("train", &data.train), ("validation", &data.validation), ("test", &data.test)] {
        for (x, y) in pairs {
            out.push_str(&format!("{split}\t{}\t{}\n", encode(x), encode(y)));
        }
    }
    crate::policy::write_atomic(path, out.as_bytes())
}

/// Reads a task file; every response is checked against the task rule.
pub fn read_task_data(path: &Path, kind: TaskKind) -> Result<TaskDataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut data = TaskDataset {
        kind,
        seed: 0,
        train: Vec::new(),
        validation: Vec::new(),
        test: Vec::new(),
    };
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fail = |m: String| Error::Format {
            path: path.to_path_buf(),
            message: format!("line {}: {m}", i + 1),
        };
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 3 {
            return Err(fail(format!("expected 3 tab-separated fields, found {}", f.len())));
        }
        let parse = |s: &str| -> Result<Vec<Token>> {
            s.split_whitespace()
                .map(|t| t.parse().map_err(|_| fail(format!("invalid token `{t}`"))))
                .collect()
        };
        let (x, y) = (parse(f[1])?, parse(f[2])?);
        if task_response(kind, &x).ok().as_ref() != Some(&y) {
            return Err(fail("response does not follow the task rule".into()));
        }
        match f[0] {
            "train" => data.train.push((x, y)),
            "validation" => data.validation.push((x, y)),
            "test" => data.test.push((x, y)),
            s => return Err(fail(format!("unknown split `{s}`"))),
        }
    }
    Ok(data)
}

/// Which side of a rich/poor pair a channel prefers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channel {
    /// Prefers the response with more of the marked tokens.
    Helpful,
    /// Prefers the response with fewer of them.
    Harmless,
}

/// Pairs of equal-length responses that differ only in marked tokens: the rich
/// member carries `1..=max_extra` more copies of both `token_a` and `token_b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreferenceSpec {
    #[serde(default = "default_vocab")]
    pub vocab: usize,
    pub token_a: Token,
    pub token_b: Token,
    pub min_body: usize,
    pub max_body: usize,
    #[serde(default = "default_max_extra")]
    pub max_extra: usize,
    pub count: usize,
}

fn default_max_extra() -> usize {
    2
}

impl PreferenceSpec {
    pub fn validate(&self) -> Result<()> {
        let vocab = Vocab::new(self.vocab)?;
        vocab.check(&[self.token_a, self.token_b])?;
        let is_content = |t: Token| t != Vocab::BOS && t != Vocab::EOS;
        if !is_content(self.token_a) || !is_content(self.token_b) || self.token_a == self.token_b {
            return Err(Error::domain("marked tokens must be two distinct content tokens"));
        }
        if vocab.content_tokens().count() < 3 {
            return Err(Error::domain("need a content token besides the two marked ones"));
        }
        if self.max_extra == 0 || self.min_body < 2 * self.max_extra || self.max_body < self.min_body {
            return Err(Error::domain("body range must fit max_extra copies of both marked tokens"));
        }
        if self.count == 0 {
            return Err(Error::domain("count must be positive"));
        }
        Ok(())
    }
}

/// `(prompt, rich, poor)`.
pub type ContrastPair = (Vec<Token>, Vec<Token>, Vec<Token>);

/// Rich/poor response pairs with their prompts, before labelling.
pub fn generate_contrast_pairs(spec: &PreferenceSpec, seed: u64) -> Result<Vec<ContrastPair>> {
    spec.validate()?;
    let vocab = Vocab::new(spec.vocab)?;
    let plain: Vec<Token> = vocab
        .content_tokens()
        .filter(|&t| t != spec.token_a && t != spec.token_b)
        .collect();
    let content: Vec<Token> = vocab.content_tokens().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(spec.count);
    for _ in 0..spec.count {
        let n = rng.random_range(spec.min_body..=spec.max_body);
        let prompt: Vec<Token> = (0..n).map(|_| *content.choose(&mut rng).expect("content")).collect();
        let mut poor: Vec<Token> = (0..n).map(|_| *plain.choose(&mut rng).expect("plain")).collect();
        let mut rich = poor.clone();
        let da = rng.random_range(1..=spec.max_extra);
        let db = rng.random_range(1..=spec.max_extra);
        let positions: Vec<usize> = (0..n).collect::<Vec<_>>().choose_multiple(&mut rng, da + db).copied().collect();
        for (j, &pos) in positions.iter().enumerate() {
            rich[pos] = if j < da { spec.token_a } else { spec.token_b };
        }
        rich.push(Vocab::EOS);
        poor.push(Vocab::EOS);
        out.push((prompt, rich, poor));
    }
    Ok(out)
}

/// Labels contrast pairs for one channel. The two channels disagree on every pair.
pub fn generate_preference_data(spec: &PreferenceSpec, channel: Channel, seed: u64) -> Result<Vec<PreferenceTuple>> {
    generate_contrast_pairs(spec, seed)?
        .into_iter()
        .map(|(x, rich, poor)| match channel {
            Channel::Helpful => PreferenceTuple::new(x, rich, poor),
            Channel::Harmless => PreferenceTuple::new(x, poor, rich),
        })
        .collect()
}
