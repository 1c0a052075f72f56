use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which forward implementation backs the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Backend {
    /// A small decoder-only transformer with causal attention and a KV cache.
    #[serde(rename = "tiny-transformer")]
    TinyTransformer,
    /// A token-local test model whose gated sublayers are exact identities
    /// on their domain's vocabulary band, so the optimal skip mask is known.
    #[serde(rename = "planted")]
    Planted,
}

/// Construction-time description of a model. Identical spec + seed builds
/// bit-identical weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub backend: Backend,
    pub num_blocks: usize,
    pub hidden_dim: usize,
    pub vocab_size: usize,
    pub seed: u64,
    /// Planted backend only: domain id -> sublayer indices that act as
    /// identities for that domain's vocabulary band.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub planted_gates: Option<BTreeMap<usize, BTreeSet<usize>>>,
}

impl ModelSpec {
    /// Total sublayer count: one attention + one MLP sublayer per block.
    pub fn num_sublayers(&self) -> usize {
        2 * self.num_blocks
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_blocks == 0 {
            return Err(Error::InvalidSpec("num_blocks must be >= 1".into()));
        }
        if self.hidden_dim == 0 {
            return Err(Error::InvalidSpec("hidden_dim must be >= 1".into()));
        }
        if self.vocab_size < 8 {
            return Err(Error::InvalidSpec("vocab_size must be >= 8".into()));
        }
        match (self.backend, &self.planted_gates) {
            (Backend::Planted, None) => {
                return Err(Error::InvalidSpec(
                    "planted backend requires planted_gates".into(),
                ));
            }
            (Backend::Planted, Some(gates)) => {
                if gates.is_empty() {
                    return Err(Error::InvalidSpec("planted_gates must not be empty".into()));
                }
                let num_domains = gates.len();
                for (&domain, sublayers) in gates {
                    if domain >= num_domains {
                        return Err(Error::InvalidSpec(format!(
                            "planted_gates domains must be 0..{num_domains}, got {domain}"
                        )));
                    }
                    for &i in sublayers {
                        if i >= self.num_sublayers() {
                            return Err(Error::InvalidSpec(format!(
                                "gate for domain {domain} references sublayer {i}, model has {}",
                                self.num_sublayers()
                            )));
                        }
                    }
                }
                DomainLayout::new(self.vocab_size, num_domains)?;
            }
            (Backend::TinyTransformer, Some(_)) => {
                return Err(Error::InvalidSpec(
                    "planted_gates is only valid for the planted backend".into(),
                ));
            }
            (Backend::TinyTransformer, None) => {}
        }
        Ok(())
    }

    /// Stable hex fingerprint of the spec, stored in registries so serving a
    /// registry against a different model is detected.
    pub fn fingerprint(&self) -> String {
        let canonical = serde_json::to_string(self).expect("spec serializes");
        // FNV-1a, 64-bit. Not cryptographic; it only has to flag mismatches.
        let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
        for byte in canonical.as_bytes() {
            hash ^= u64::from(*byte);
            hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
        }
        format!("{hash:016x}")
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(s)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }
}

/// Default planted spec: 8 blocks (16 sublayers), one attention + one MLP
/// gate per domain, so every domain's optimal mask has the same cost profile.
pub fn default_planted_spec(num_domains: usize, seed: u64) -> Result<ModelSpec> {
    let num_blocks = 8;
    if num_domains == 0 || num_domains > num_blocks {
        return Err(Error::InvalidSpec(format!(
            "default planted spec supports 1..={num_blocks} domains, got {num_domains}"
        )));
    }
    let gates = (0..num_domains)
        .map(|d| (d, BTreeSet::from([2 * d, 2 * d + 1])))
        .collect();
    let spec = ModelSpec {
        backend: Backend::Planted,
        num_blocks,
        hidden_dim: 32,
        vocab_size: 256,
        seed,
        planted_gates: Some(gates),
    };
    spec.validate()?;
    Ok(spec)
}

/// Default tiny-transformer spec: sub-second forwards, 2^16 mask space.
pub fn default_tiny_spec(seed: u64) -> ModelSpec {
    ModelSpec {
        backend: Backend::TinyTransformer,
        num_blocks: 8,
        hidden_dim: 64,
        vocab_size: 256,
        seed,
        planted_gates: None,
    }
}

/// Token id 0 is reserved as end-of-sequence in both backends.
pub const EOS_TOKEN: u32 = 0;

/// Classification of a token id within a domain layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Band {
    Eos,
    Shared,
    Domain(usize),
    Unassigned,
}

/// Partition of the vocabulary into disjoint per-domain bands plus a small
/// shared band. Token 0 is EOS; the shared band follows it; each domain gets
/// an equal contiguous slice of the remainder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainLayout {
    pub vocab_size: usize,
    pub num_domains: usize,
    pub shared_len: usize,
    pub domain_len: usize,
}

impl DomainLayout {
    pub fn new(vocab_size: usize, num_domains: usize) -> Result<Self> {
        if num_domains == 0 {
            return Err(Error::InvalidSpec("need at least one domain".into()));
        }
        let shared_len = (vocab_size / 16).max(4);
        let usable = vocab_size.saturating_sub(1 + shared_len);
        let domain_len = usable / num_domains;
        if domain_len < 4 {
            return Err(Error::InvalidSpec(format!(
                "vocab_size {vocab_size} too small for {num_domains} domains"
            )));
        }
        Ok(Self {
            vocab_size,
            num_domains,
            shared_len,
            domain_len,
        })
    }

    pub fn shared_range(&self) -> std::ops::Range<u32> {
        1..(1 + self.shared_len) as u32
    }

    pub fn domain_range(&self, domain: usize) -> std::ops::Range<u32> {
        let start = 1 + self.shared_len + domain * self.domain_len;
        start as u32..(start + self.domain_len) as u32
    }

    pub fn band_of(&self, token: u32) -> Band {
        if token == EOS_TOKEN {
            return Band::Eos;
        }
        if self.shared_range().contains(&token) {
            return Band::Shared;
        }
        let first = 1 + self.shared_len;
        let idx = token as usize;
        if idx >= first && idx < first + self.num_domains * self.domain_len {
            Band::Domain((idx - first) / self.domain_len)
        } else {
            Band::Unassigned
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sublayer_count_is_twice_blocks() {
        let spec = default_tiny_spec(7);
        assert_eq!(spec.num_blocks, 8);
        assert_eq!(spec.num_sublayers(), 16);
        let four = ModelSpec {
            num_blocks: 4,
            ..default_tiny_spec(7)
        };
        assert_eq!(four.num_sublayers(), 8);
    }

    #[test]
    fn rejects_bad_specs() {
        let mut spec = default_tiny_spec(1);
        spec.num_blocks = 0;
        assert!(spec.validate().is_err());

        let mut planted = default_planted_spec(3, 1).unwrap();
        planted
            .planted_gates
            .as_mut()
            .unwrap()
            .get_mut(&0)
            .unwrap()
            .insert(99);
        assert!(matches!(planted.validate(), Err(Error::InvalidSpec(_))));
    }

    #[test]
    fn fingerprint_tracks_content() {
        let a = default_tiny_spec(1);
        let b = default_tiny_spec(1);
        let c = default_tiny_spec(2);
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_ne!(a.fingerprint(), c.fingerprint());
    }

    #[test]
    fn layout_bands_are_disjoint() {
        let layout = DomainLayout::new(256, 5).unwrap();
        for d in 0..5 {
            let r = layout.domain_range(d);
            assert!(!r.is_empty());
            for t in r {
                assert_eq!(layout.band_of(t), Band::Domain(d));
            }
        }
        for t in layout.shared_range() {
            assert_eq!(layout.band_of(t), Band::Shared);
        }
        assert_eq!(layout.band_of(EOS_TOKEN), Band::Eos);
    }

    #[test]
    fn spec_json_round_trip() {
        let spec = default_planted_spec(5, 42).unwrap();
        let json = spec.to_json().unwrap();
        assert_eq!(ModelSpec::from_json(&json).unwrap(), spec);
    }
}
