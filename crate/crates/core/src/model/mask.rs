use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Binary skip mask over a model's sublayers.
///
/// Index convention: bit `2*b` is the attention sublayer of block `b`, bit
/// `2*b + 1` is its MLP sublayer. A set bit means the sublayer is skipped
/// while drafting.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SkipMask {
    bits: Vec<bool>,
}

impl SkipMask {
    /// Mask that skips nothing (the full model).
    pub fn zeros(num_sublayers: usize) -> Self {
        Self {
            bits: vec![false; num_sublayers],
        }
    }

    /// Mask that skips every sublayer.
    pub fn ones(num_sublayers: usize) -> Self {
        Self {
            bits: vec![true; num_sublayers],
        }
    }

    pub fn from_bits(bits: Vec<bool>) -> Self {
        Self { bits }
    }

    /// Mask with exactly the given sublayer indices set.
    pub fn from_indices(num_sublayers: usize, skipped: &[usize]) -> Result<Self> {
        let mut bits = vec![false; num_sublayers];
        for &i in skipped {
            if i >= num_sublayers {
                return Err(Error::InvalidParam(format!(
                    "sublayer index {i} out of range (have {num_sublayers})"
                )));
            }
            bits[i] = true;
        }
        Ok(Self { bits })
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn is_skipped(&self, sublayer: usize) -> bool {
        self.bits[sublayer]
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn set(&mut self, sublayer: usize, skip: bool) {
        self.bits[sublayer] = skip;
    }

    pub fn popcount(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Overall skipped ratio s = popcount / L.
    pub fn skip_ratio(&self) -> f64 {
        self.popcount() as f64 / self.bits.len() as f64
    }

    /// Fraction of attention sublayers (even indices) that are skipped.
    pub fn attn_skip_ratio(&self) -> f64 {
        let n = self.bits.len() / 2;
        let skipped = self.bits.iter().step_by(2).filter(|&&b| b).count();
        skipped as f64 / n as f64
    }

    /// Fraction of MLP sublayers (odd indices) that are skipped.
    pub fn mlp_skip_ratio(&self) -> f64 {
        let n = self.bits.len() / 2;
        let skipped = self.bits.iter().skip(1).step_by(2).filter(|&&b| b).count();
        skipped as f64 / n as f64
    }

    /// Bitstring form used in registry files, bit 0 first: "0101…".
    pub fn to_bitstring(&self) -> String {
        self.bits
            .iter()
            .map(|&b| if b { '1' } else { '0' })
            .collect()
    }

    pub fn from_bitstring(s: &str) -> Result<Self> {
        let mut bits = Vec::with_capacity(s.len());
        for c in s.chars() {
            match c {
                '0' => bits.push(false),
                '1' => bits.push(true),
                other => {
                    return Err(Error::InvalidParam(format!(
                        "invalid mask bit {other:?} in {s:?}"
                    )))
                }
            }
        }
        Ok(Self { bits })
    }
}

impl std::fmt::Display for SkipMask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.to_bitstring())
    }
}
