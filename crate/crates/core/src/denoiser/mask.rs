use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::num::Rng;

/// Which residual blocks execute in a forward pass. Dropped blocks act as the
/// identity on the hidden state. At least one block is always kept.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BlockMask {
    keep: Vec<bool>,
}

impl BlockMask {
    pub fn new(keep: Vec<bool>) -> Result<Self> {
        if keep.is_empty() || !keep.iter().any(|k| *k) {
            return Err(Error::InvalidArgument("a block mask must keep at least one block".into()));
        }
        Ok(Self { keep })
    }

    pub fn all_keep(blocks: usize) -> Self {
        Self {
            keep: vec![true; blocks],
        }
    }

    /// Mask keeping everything except the listed block indices.
    pub fn dropping(blocks: usize, dropped: &[usize]) -> Result<Self> {
        let mut keep = vec![true; blocks];
        for &j in dropped {
            if j >= blocks {
                return Err(Error::InvalidArgument(format!("block {j} out of range 0..{blocks}")));
            }
            keep[j] = false;
        }
        Self::new(keep)
    }

    pub fn len(&self) -> usize {
        self.keep.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keep.is_empty()
    }

    pub fn keeps(&self, block: usize) -> bool {
        self.keep[block]
    }

    pub fn keep_bits(&self) -> &[bool] {
        &self.keep
    }

    pub fn dropped_count(&self) -> usize {
        self.keep.iter().filter(|k| !**k).count()
    }

    pub fn dropped(&self) -> Vec<usize> {
        (0..self.keep.len()).filter(|&j| !self.keep[j]).collect()
    }

    /// Compact text form, e.g. `110111` (1 = kept).
    pub fn bit_string(&self) -> String {
        self.keep.iter().map(|k| if *k { '1' } else { '0' }).collect()
    }
}

/// Number of blocks dropped for a ratio: `round(blocks · ratio)`, at least 1
/// and at most `blocks − 1`.
pub fn drop_count_for(blocks: usize, drop_ratio: f64) -> usize {
    let k = (blocks as f64 * drop_ratio).round() as usize;
    k.max(1).min(blocks.saturating_sub(1))
}

/// Drops exactly `count` distinct, uniformly chosen blocks (partial Fisher–Yates).
pub fn mask_with_drop_count(blocks: usize, count: usize, rng: &mut Rng) -> Result<BlockMask> {
    if count >= blocks {
        return Err(Error::InvalidArgument(format!(
            "cannot drop {count} of {blocks} blocks"
        )));
    }
    let mut idx: Vec<usize> = (0..blocks).collect();
    for i in 0..count {
        let j = i + rng.below((blocks - i) as u64) as usize;
        idx.swap(i, j);
    }
    BlockMask::dropping(blocks, &idx[..count])
}

pub fn generate_stochastic_mask(blocks: usize, drop_ratio: f64, rng: &mut Rng) -> Result<BlockMask> {
    if !(0.0..1.0).contains(&drop_ratio) {
        return Err(Error::InvalidArgument(format!(
            "drop_ratio {drop_ratio} outside [0, 1)"
        )));
    }
    mask_with_drop_count(blocks, drop_count_for(blocks, drop_ratio), rng)
}

/// All `C(blocks, count)` masks, dropped sets in lexicographic order.
pub fn enumerate_all_masks(blocks: usize, count: usize) -> Result<Vec<BlockMask>> {
    if count >= blocks {
        return Err(Error::InvalidArgument(format!(
            "cannot drop {count} of {blocks} blocks"
        )));
    }
    let mut out = Vec::new();
    let mut combo: Vec<usize> = (0..count).collect();
    loop {
        out.push(BlockMask::dropping(blocks, &combo)?);
        // Advance to the next combination.
        let mut i = count;
        loop {
            if i == 0 {
                return Ok(out);
            }
            i -= 1;
            if combo[i] < blocks - count + i {
                combo[i] += 1;
                for j in i + 1..count {
                    combo[j] = combo[j - 1] + 1;
                }
                break;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn binomial(n: usize, k: usize) -> usize {
        (0..k).fold(1, |acc, i| acc * (n - i) / (i + 1))
    }

    #[test]
    fn drop_counts() {
        assert_eq!(drop_count_for(24, 0.10), 2);
        assert_eq!(drop_count_for(6, 0.10), 1);
        assert_eq!(drop_count_for(6, 0.0), 1);
        assert_eq!(drop_count_for(6, 0.5), 3);
        assert_eq!(drop_count_for(6, 0.99), 5);
        let mut rng = Rng::new(0);
        let m = generate_stochastic_mask(24, 0.10, &mut rng).unwrap();
        assert_eq!(m.dropped_count(), 2);
        // Forcing 3 of 24 directly.
        assert_eq!(mask_with_drop_count(24, 3, &mut rng).unwrap().dropped_count(), 3);
        assert!(generate_stochastic_mask(6, 1.0, &mut rng).is_err());
    }

    #[test]
    fn drop_frequencies_are_uniform() {
        let mut rng = Rng::new(42);
        let mut counts = [0usize; 6];
        let n = 60_000;
        for _ in 0..n {
            let m = generate_stochastic_mask(6, 0.1, &mut rng).unwrap();
            assert_eq!(m.dropped_count(), 1);
            counts[m.dropped()[0]] += 1;
        }
        for c in counts {
            assert!((c as f64 / n as f64 - 1.0 / 6.0).abs() < 0.01, "{counts:?}");
        }
    }

    #[test]
    fn enumeration_counts_and_uniqueness() {
        for b in 1..=7 {
            for k in 0..b {
                let all = enumerate_all_masks(b, k).unwrap();
                assert_eq!(all.len(), binomial(b, k), "b={b} k={k}");
                let set: HashSet<_> = all.iter().cloned().collect();
                assert_eq!(set.len(), all.len());
                assert!(all.iter().all(|m| m.dropped_count() == k && m.len() == b));
            }
        }
    }

    #[test]
    fn mask_invariants() {
        assert!(BlockMask::new(vec![false, false]).is_err());
        let m = BlockMask::dropping(6, &[2, 4]).unwrap();
        assert_eq!(m.dropped_count(), 2);
        assert_eq!(m.bit_string(), "110101");
        assert!(BlockMask::dropping(6, &[6]).is_err());
    }
}
