//! Synthetic token corpus: repeating patterns with seeded noise.
//!
//! Sequences follow a fixed cyclic pattern derived from the seed, with a
//! small fraction of positions replaced by uniform noise tokens. The
//! structure is learnable by a small model in a few dozen steps while still
//! exercising the full vocabulary.

use crate::tensor::SeededRng;

#[derive(Debug, Clone)]
pub struct DatagenConfig {
    pub vocab_size: usize,
    pub seq_len: usize,
    /// Length of the underlying repeating pattern.
    pub pattern_len: usize,
    /// Probability that a position is replaced by a random token.
    pub noise: f64,
}

impl DatagenConfig {
    pub fn for_model(vocab_size: usize, seq_len: usize) -> DatagenConfig {
        DatagenConfig {
            vocab_size,
            seq_len,
            pattern_len: 8.min(vocab_size),
            noise: 0.05,
        }
    }
}

/// One sequence, fully determined by (seed, index).
pub fn sequence(cfg: &DatagenConfig, seed: u64, index: u64) -> Vec<usize> {
    let mut pattern_rng = SeededRng::new(seed ^ 0x5eed_da7a);
    let pattern: Vec<usize> = (0..cfg.pattern_len)
        .map(|_| pattern_rng.below(cfg.vocab_size as u64) as usize)
        .collect();
    let mut rng = SeededRng::new(seed).fork(index.wrapping_add(1));
    let phase = rng.below(cfg.pattern_len as u64) as usize;
    (0..cfg.seq_len)
        .map(|i| {
            if rng.next_f64() < cfg.noise {
                rng.below(cfg.vocab_size as u64) as usize
            } else {
                pattern[(phase + i) % cfg.pattern_len]
            }
        })
        .collect()
}

/// A batch of `n` sequences for a training step: element `i` is
/// `sequence(seed, step * n + i)`, so any worker can regenerate any shard.
pub fn batch(cfg: &DatagenConfig, seed: u64, step: u64, n: usize) -> Vec<Vec<usize>> {
    (0..n as u64)
        .map(|i| sequence(cfg, seed, step * n as u64 + i))
        .collect()
}
