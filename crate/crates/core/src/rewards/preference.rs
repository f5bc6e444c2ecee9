//! Preference tuples and their text encoding.
//!
//! One tuple per line: three tab-separated fields `prompt`, `preferred`, `rejected`,
//! each a space-separated list of decimal token ids. The prompt field may be empty.
//! Blank lines and lines starting with `#` are skipped.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::policy::{Token, Vocab};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PreferenceTuple {
    pub x: Vec<Token>,
    pub y_plus: Vec<Token>,
    pub y_minus: Vec<Token>,
}

impl PreferenceTuple {
    pub fn new(x: Vec<Token>, y_plus: Vec<Token>, y_minus: Vec<Token>) -> Result<Self> {
        if y_plus == y_minus {
            return Err(Error::domain("preferred and rejected responses are identical"));
        }
        if y_plus.is_empty() || y_minus.is_empty() {
            return Err(Error::domain("preference responses must be non-empty"));
        }
        Ok(Self { x, y_plus, y_minus })
    }

    /// The same comparison with the labels exchanged.
    pub fn swapped(&self) -> Self {
        Self {
            x: self.x.clone(),
            y_plus: self.y_minus.clone(),
            y_minus: self.y_plus.clone(),
        }
    }

    pub fn validate(&self, vocab: Vocab) -> Result<()> {
        if self.y_plus == self.y_minus {
            return Err(Error::domain("preferred and rejected responses are identical"));
        }
        vocab.check(&self.x)?;
        vocab.check(&self.y_plus)?;
        vocab.check(&self.y_minus)
    }
}

fn encode(tokens: &[Token]) -> String {
    tokens.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(" ")
}

fn decode(field: &str) -> Option<Vec<Token>> {
    field.split_whitespace().map(|s| s.parse().ok()).collect()
}

pub fn write_preferences(path: &Path, data: &[PreferenceTuple]) -> Result<()> {
    let mut out = String::new();
    for t in data {
        out.push_str(&encode(&t.x));
        out.push('\t');
        out.push_str(&encode(&t.y_plus));
        out.push('\t');
        out.push_str(&encode(&t.y_minus));
        out.push('\n');
    }
    crate::policy::write_atomic(path, out.as_bytes())
}

pub fn read_preferences(path: &Path) -> Result<Vec<PreferenceTuple>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fail = |message: String| Error::Format {
            path: path.to_path_buf(),
            message: format!("line {}: {message}", i + 1),
        };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(fail(format!("expected 3 tab-separated fields, found {}", fields.len())));
        }
        let parse = |f: &str| decode(f).ok_or_else(|| fail(format!("invalid token list `{f}`")));
        let t = PreferenceTuple::new(parse(fields[0])?, parse(fields[1])?, parse(fields[2])?).map_err(|e| fail(e.to_string()))?;
        out.push(t);
    }
    Ok(out)
}
