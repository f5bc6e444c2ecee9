//! Versioned binary checkpoint container.
//!
//! ```text
//! magic       8 bytes   "L3MCKPT\0"
//! version     u32       1
//! kind        u8        0 = policy, 1 = reward model
//! trained     u8        reward models only, 0 or 1
//! name_len    u32       followed by name_len bytes of UTF-8 (reward name, may be empty)
//! vocab       u32
//! arch        u8        0 = tabular, 1 = mlp
//! arch_a      u32       tabular: order       mlp: embed_dim
//! arch_b      u32       tabular: 0           mlp: hidden_dim
//! n_params    u64
//! params      n_params x f64 bit patterns
//! ```
//!
//! All integers and floats are little-endian. Parameters are stored as raw bit
//! patterns, so a save/load round trip is bit-exact.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{Architecture, Policy, Vocab};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"L3MCKPT\0";
const VERSION: u32 = 1;

/// What a checkpoint holds.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CheckpointKind {
    Policy,
    RewardModel { name: String, trained: bool },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    pub policy: Policy,
}

impl Checkpoint {
    pub fn policy(policy: Policy) -> Self {
        Self {
            kind: CheckpointKind::Policy,
            policy,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + 8 * self.policy.num_params());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let (kind, trained, name) = match &self.kind {
            CheckpointKind::Policy => (0u8, 0u8, ""),
            CheckpointKind::RewardModel { name, trained } => (1u8, *trained as u8, name.as_str()),
        };
        out.push(kind);
        out.push(trained);
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(self.policy.vocab().size() as u32).to_le_bytes());
        let (tag, a, b) = match self.policy.architecture() {
            Architecture::Tabular { order } => (0u8, order as u32, 0u32),
            Architecture::Mlp {
                embed_dim,
                hidden_dim,
            } => (1u8, embed_dim as u32, hidden_dim as u32),
        };
        out.push(tag);
        out.extend_from_slice(&a.to_le_bytes());
        out.extend_from_slice(&b.to_le_bytes());
        out.extend_from_slice(&(self.policy.num_params() as u64).to_le_bytes());
        for p in self.policy.params() {
            out.extend_from_slice(&p.to_bits().to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let fail = |message: &str| Error::Format {
            path: path.to_path_buf(),
            message: message.to_string(),
        };
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8).ok_or_else(|| fail("truncated header"))? != MAGIC {
            return Err(fail("not a checkpoint file"));
        }
        let version = r.u32().ok_or_else(|| fail("truncated header"))?;
        if version != VERSION {
            return Err(fail(&format!("unsupported checkpoint version {version}")));
        }
        let kind = r.u8().ok_or_else(|| fail("truncated header"))?;
        let trained = r.u8().ok_or_else(|| fail("truncated header"))?;
        let name_len = r.u32().ok_or_else(|| fail("truncated header"))? as usize;
        let name = r.take(name_len).ok_or_else(|| fail("truncated name"))?;
        let name = std::str::from_utf8(name).map_err(|_| fail("name is not utf-8"))?.to_string();
        let kind = match kind {
            0 => CheckpointKind::Policy,
            1 => CheckpointKind::RewardModel {
                name,
                trained: trained != 0,
            },
            k => return Err(fail(&format!("unknown checkpoint kind {k}"))),
        };
        let vocab = r.u32().ok_or_else(|| fail("truncated header"))? as usize;
        let tag = r.u8().ok_or_else(|| fail("truncated header"))?;
        let a = r.u32().ok_or_else(|| fail("truncated header"))? as usize;
        let b = r.u32().ok_or_else(|| fail("truncated header"))? as usize;
        let arch = match tag {
            0 => Architecture::Tabular { order: a },
            1 => Architecture::Mlp {
                embed_dim: a,
                hidden_dim: b,
            },
            t => return Err(fail(&format!("unknown architecture tag {t}"))),
        };
        let n = r.u64().ok_or_else(|| fail("truncated header"))? as usize;
        if r.remaining() != n.saturating_mul(8) {
            return Err(fail("parameter block length does not match the header"));
        }
        let params = (0..n)
            .map(|_| f64::from_bits(r.u64().expect("length checked")))
            .collect();
        let vocab = Vocab::new(vocab).map_err(|e| fail(&e.to_string()))?;
        let policy = Policy::from_params(vocab, arch, params).map_err(|e| fail(&e.to_string()))?;
        Ok(Self { kind, policy })
    }

    /// Writes to a sibling temporary file and renames it over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::domain(format!("not a file path: {}", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", file_name.to_string_lossy()));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let out = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(out)
    }

    fn u8(&mut self) -> Option<u8> {
        self.take(1).map(|b| b[0])
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            params in proptest::collection::vec(any::<f64>(), 16),
            reward in any::<bool>(),
            trained in any::<bool>(),
        ) {
            let policy = Policy::from_params(Vocab::new(4).unwrap(), Architecture::Tabular { order: 2 }, params).unwrap();
            let kind = if reward {
                CheckpointKind::RewardModel { name: "helpful".into(), trained }
            } else {
                CheckpointKind::Policy
            };
            let ckpt = Checkpoint { kind, policy };
            let back = Checkpoint::from_bytes(&ckpt.to_bytes(), Path::new("mem")).unwrap();
            prop_assert_eq!(&back.kind, &ckpt.kind);
            let bits = |c: &Checkpoint| c.policy.params().iter().map(|p| p.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(&back), bits(&ckpt));
        }
    }

    #[test]
    fn file_round_trip_mlp() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("policy.ckpt");
        let policy = Policy::mlp(Vocab::new(16).unwrap(), 8, 32, 1).unwrap();
        Checkpoint::policy(policy.clone()).save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.policy, policy);
        assert_eq!(back.kind, CheckpointKind::Policy);
    }

    #[test]
    fn rejects_corrupt_files() {
        let policy = Policy::tabular(Vocab::new(4).unwrap(), 2).unwrap();
        let bytes = Checkpoint::policy(policy).to_bytes();
        let p = Path::new("x");
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3], p).is_err());
        assert!(Checkpoint::from_bytes(b"garbage", p).is_err());
        let mut wrong_version = bytes.clone();
        wrong_version[8] = 9;
        assert!(matches!(Checkpoint::from_bytes(&wrong_version, p), Err(Error::Format { .. })));
    }
}
