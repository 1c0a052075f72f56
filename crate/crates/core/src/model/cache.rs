use crate::error::{Error, Result};
use crate::model::mask::SkipMask;

/// Per-block key/value history for the transformer backend. Blocks whose
/// attention sublayer is skipped never attend, so they keep no history.
#[derive(Debug, Clone, Default)]
pub struct BlockCache {
    pub keys: Vec<Vec<f32>>,
    pub values: Vec<Vec<f32>>,
}

/// Incremental decoding state. A cache is bound to the skip mask it was
/// filled under: reusing it with a different mask would silently mix
/// activations from two different computation graphs, so that is an error.
#[derive(Debug, Clone)]
pub struct KVCache {
    mask: SkipMask,
    len: usize,
    blocks: Vec<BlockCache>,
}

impl KVCache {
    pub fn new(mask: SkipMask, num_blocks: usize) -> Self {
        Self {
            mask,
            len: 0,
            blocks: vec![BlockCache::default(); num_blocks],
        }
    }

    /// Number of positions already processed.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn mask(&self) -> &SkipMask {
        &self.mask
    }

    pub fn check_mask(&self, mask: &SkipMask) -> Result<()> {
        if &self.mask != mask {
            return Err(Error::CacheMismatch(format!(
                "cache built under mask {} used with mask {}",
                self.mask, mask
            )));
        }
        Ok(())
    }

    pub fn block(&self, i: usize) -> &BlockCache {
        &self.blocks[i]
    }

    /// Append one position's key/value to a block. The planted backend and
    /// skipped attention sublayers never call this.
    pub fn push(&mut self, block: usize, key: Vec<f32>, value: Vec<f32>) {
        let b = &mut self.blocks[block];
        b.keys.push(key);
        b.values.push(value);
    }

    /// Mark one more position as processed. Called once per position, after
    /// all blocks have pushed (or skipped) their K/V for it.
    pub fn advance(&mut self) {
        self.len += 1;
    }

    /// Drop state past the first `keep` positions. Used to roll back draft
    /// tokens the verifier rejected.
    pub fn truncate(&mut self, keep: usize) {
        self.len = self.len.min(keep);
        for b in &mut self.blocks {
            b.keys.truncate(self.len);
            b.values.truncate(self.len);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_mismatch_is_detected() {
        let cache = KVCache::new(SkipMask::zeros(4), 2);
        assert!(cache.check_mask(&SkipMask::zeros(4)).is_ok());
        assert!(cache
            .check_mask(&SkipMask::from_indices(4, &[1]).unwrap())
            .is_err());
    }

    #[test]
    fn truncate_rolls_back_pushed_state() {
        let mut cache = KVCache::new(SkipMask::zeros(2), 1);
        for i in 0..5 {
            cache.push(0, vec![i as f32], vec![i as f32]);
            cache.advance();
        }
        assert_eq!(cache.len(), 5);
        cache.truncate(3);
        assert_eq!(cache.len(), 3);
        assert_eq!(cache.block(0).keys.len(), 3);
        cache.truncate(10);
        assert_eq!(cache.len(), 3);
    }
}
