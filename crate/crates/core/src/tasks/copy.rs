//! The copy task.
//!
//! Tokens `0..I` are data symbols, `I` is blank and `I+1` is start-recall.
//! A block with memory `m` reads `m` data symbols, start-recall and `m−1`
//! blanks, and must output `m` blanks followed by the data symbols:
//!
//! ```text
//! input   ACBBAB#-----
//! target  ------ACBBAB
//! ```
//!
//! Blocks are concatenated until the sequence reaches the requested length;
//! the final block is cut at that length.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeededRng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CopyConfig {
    /// Number of data symbols `I`.
    pub data_symbols: usize,
    pub m_low: usize,
    pub m_high: usize,
    /// Total tokens in the sequence.
    pub length: usize,
    pub seed: u64,
}

impl Default for CopyConfig {
    fn default() -> Self {
        Self {
            data_symbols: 6,
            m_low: 10,
            m_high: 10,
            length: 256_000,
            seed: 0,
        }
    }
}

impl CopyConfig {
    pub fn fixed(m: usize, length: usize, seed: u64) -> Self {
        Self {
            m_low: m,
            m_high: m,
            length,
            seed,
            ..Self::default()
        }
    }

    pub fn variable(m_low: usize, m_high: usize, length: usize, seed: u64) -> Self {
        Self {
            m_low,
            m_high,
            length,
            seed,
            ..Self::default()
        }
    }

    pub fn blank(&self) -> usize {
        self.data_symbols
    }

    pub fn recall(&self) -> usize {
        self.data_symbols + 1
    }

    pub fn vocab(&self) -> usize {
        self.data_symbols + 2
    }

    pub fn validate(&self) -> Result<()> {
        if self.data_symbols < 1 {
            return Err(Error::config("copy task needs at least one data symbol"));
        }
        if self.m_low < 1 || self.m_low > self.m_high {
            return Err(Error::config(format!(
                "copy memory range [{}, {}] must satisfy 1 <= m_low <= m_high",
                self.m_low, self.m_high
            )));
        }
        if self.length < 2 * self.m_low {
            return Err(Error::config(format!(
                "copy length {} shorter than one block of {}",
                self.length,
                2 * self.m_low
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Block {
    pub start: usize,
    pub m: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabeledSequence {
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
    /// Blocks in order; the last may run past the end of the sequence.
    pub blocks: Vec<Block>,
}

impl LabeledSequence {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

/// Input and target of one block.
pub fn copy_block(data: &[usize], data_symbols: usize) -> (Vec<usize>, Vec<usize>) {
    let m = data.len();
    let blank = data_symbols;
    let recall = data_symbols + 1;
    let mut input = data.to_vec();
    input.push(recall);
    input.extend(std::iter::repeat(blank).take(m - 1));
    let mut target = vec![blank; m];
    target.extend_from_slice(data);
    (input, target)
}

pub fn gen_copy(cfg: &CopyConfig) -> Result<LabeledSequence> {
    cfg.validate()?;
    let mut rng = SeededRng::new(cfg.seed);
    let mut inputs = Vec::with_capacity(cfg.length + 2 * cfg.m_high);
    let mut targets = Vec::with_capacity(inputs.capacity());
    let mut blocks = Vec::new();
    while inputs.len() < cfg.length {
        let m = rng.range_inclusive(cfg.m_low, cfg.m_high);
        let data: Vec<usize> = (0..m)
            .map(|_| rng.below(cfg.data_symbols as u64) as usize)
            .collect();
        let (x, y) = copy_block(&data, cfg.data_symbols);
        blocks.push(Block {
            start: inputs.len(),
            m,
        });
        inputs.extend(x);
        targets.extend(y);
    }
    inputs.truncate(cfg.length);
    targets.truncate(cfg.length);
    Ok(LabeledSequence {
        inputs,
        targets,
        blocks,
    })
}

/// Renders tokens with one character per id.
pub fn render(tokens: &[usize], alphabet: &str) -> String {
    let chars: Vec<char> = alphabet.chars().collect();
    tokens.iter().map(|&t| chars[t]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_example() {
        // A B C - #  →  ids 0 1 2 3 4
        let (x, y) = copy_block(&[0, 2, 1, 1, 0, 1], 3);
        assert_eq!(render(&x, "ABC-#"), "ACBBAB#-----");
        assert_eq!(render(&y, "ABC-#"), "------ACBBAB");
    }

    #[test]
    fn minimal_block() {
        let (x, y) = copy_block(&[0], 1);
        assert_eq!(render(&x, "A-#"), "A#");
        assert_eq!(render(&y, "A-#"), "-A");
    }

    #[test]
    fn block_structure_over_many_blocks() {
        let cfg = CopyConfig::variable(5, 10, 150_000, 17);
        let seq = gen_copy(&cfg).unwrap();
        assert_eq!(seq.len(), 150_000);
        let complete: Vec<_> = seq
            .blocks
            .iter()
            .filter(|b| b.start + 2 * b.m <= seq.len())
            .collect();
        // blocks average 2·7.5 tokens, so about 10k of them
        assert!(complete.len() >= 9_500);
        let mut seen_m = [false; 11];
        for b in complete {
            let x = &seq.inputs[b.start..b.start + 2 * b.m];
            let y = &seq.targets[b.start..b.start + 2 * b.m];
            assert_eq!(x.iter().filter(|&&t| t == cfg.recall()).count(), 1);
            assert_eq!(x[b.m], cfg.recall());
            assert!(y[..b.m].iter().all(|&t| t == cfg.blank()));
            // every non-blank target was shown m steps earlier, so a perfect
            // model reaches perplexity 1
            for j in b.m..2 * b.m {
                assert_eq!(y[j], x[j - b.m]);
                assert!(y[j] < cfg.data_symbols);
            }
            seen_m[b.m] = true;
        }
        assert!((5..=10).all(|m| seen_m[m]));
        assert!(seq.inputs.iter().chain(&seq.targets).all(|&t| t < cfg.vocab()));
    }

    #[test]
    fn deterministic_in_seed() {
        let a = gen_copy(&CopyConfig::fixed(10, 5000, 3)).unwrap();
        let b = gen_copy(&CopyConfig::fixed(10, 5000, 3)).unwrap();
        let c = gen_copy(&CopyConfig::fixed(10, 5000, 4)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.inputs, c.inputs);
        assert!(a.blocks.iter().all(|b| b.m == 10));
    }

    #[test]
    fn invalid_configs() {
        assert!(gen_copy(&CopyConfig::variable(6, 5, 100, 0)).is_err());
        assert!(gen_copy(&CopyConfig::fixed(0, 100, 0)).is_err());
        assert!(gen_copy(&CopyConfig::fixed(10, 15, 0)).is_err());
        let cfg = CopyConfig {
            data_symbols: 0,
            ..CopyConfig::fixed(2, 100, 0)
        };
        assert!(gen_copy(&cfg).is_err());
    }
}
