//! Fixed-length chunking, per-epoch permutations and the fixed dev subset.

pub mod cache;
pub mod synthetic;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{keyed, Purpose};

pub use cache::{read_token_cache, write_token_cache};
pub use synthetic::{generate_synthetic_corpus, SyntheticCorpus, SyntheticSpec};

/// Default number of dev chunks evaluated at each epoch end.
pub const DEFAULT_DEV_CHUNKS: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Dev,
}

/// A whole split, concatenated into one id sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenStream {
    pub ids: Vec<u32>,
    pub split: Split,
}

impl TokenStream {
    pub fn new(ids: Vec<u32>, split: Split) -> Self {
        Self { ids, split }
    }

    pub fn check_vocab(&self, vocab: usize) -> Result<()> {
        match self.ids.iter().find(|&&id| id as usize >= vocab) {
            Some(&id) => Err(Error::TokenOutOfRange { id, vocab }),
            None => Ok(()),
        }
    }
}

/// One training example: exactly `chunk_len` contiguous ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Chunk {
    pub ids: Vec<u32>,
}

/// Number of full chunks after skipping `offset` tokens.
pub fn chunk_count(n_tokens: usize, chunk_len: usize, offset: usize) -> usize {
    n_tokens.saturating_sub(offset) / chunk_len
}

/// Drops the first `offset` tokens, then cuts full chunks; the remainder is dropped.
pub fn chunk_stream(stream: &TokenStream, chunk_len: usize, offset: usize) -> Result<Vec<Chunk>> {
    if chunk_len <= 1 {
        return Err(Error::config(format!("chunk_len must be > 1, got {chunk_len}")));
    }
    if offset >= chunk_len {
        return Err(Error::config(format!("offset {offset} must be < chunk_len {chunk_len}")));
    }
    let tail = stream.ids.get(offset..).unwrap_or(&[]);
    Ok(tail
        .chunks_exact(chunk_len)
        .map(|c| Chunk { ids: c.to_vec() })
        .collect())
}

/// Visiting order of one epoch.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpochPlan {
    pub epoch: u64,
    pub seed: u64,
    pub offset: usize,
    pub permutation: Vec<usize>,
}

/// Fisher–Yates over `0..n`, drawing with `u64` ranges so the result does
/// not depend on the platform's pointer width.
pub fn permutation(n: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i as u64) as usize;
        p.swap(i, j);
    }
    p
}

/// Builds the plan for `epoch`. The offset (when enabled) is drawn first,
/// then `n_chunks_for(offset)` gives the number of chunks to permute.
pub fn epoch_plan(n_chunks_for: impl Fn(usize) -> usize, chunk_len: usize, epoch: u64, seed: u64, use_offset: bool) -> EpochPlan {
    let offset = if use_offset && chunk_len > 1 {
        keyed(seed, epoch, Purpose::Offset).random_range(0..chunk_len as u64) as usize
    } else {
        0
    };
    let n = n_chunks_for(offset);
    let permutation = permutation(n, &mut keyed(seed, epoch, Purpose::Permutation));
    EpochPlan {
        epoch,
        seed,
        offset,
        permutation,
    }
}

/// A dev subset drawn once from `seed`, returned in stream order.
pub fn fixed_dev_subset(stream: &TokenStream, chunk_len: usize, n_chunks: usize, seed: u64) -> Result<Vec<Chunk>> {
    let all = chunk_stream(stream, chunk_len, 0)?;
    if n_chunks > all.len() {
        return Err(Error::config(format!(
            "requested {n_chunks} dev chunks but only {} are available",
            all.len()
        )));
    }
    let mut picked = permutation(all.len(), &mut keyed(seed, 0, Purpose::DevSubset));
    picked.truncate(n_chunks);
    picked.sort_unstable();
    Ok(picked.into_iter().map(|i| all[i].clone()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn stream(n: usize) -> TokenStream {
        TokenStream::new((0..n as u32).collect(), Split::Train)
    }

    #[test]
    fn chunk_counts() {
        let s = stream(1000);
        let c = chunk_stream(&s, 128, 0).unwrap();
        assert_eq!(c.len(), 7);
        assert_eq!(1000 - 7 * 128, 104);
        assert_eq!(chunk_stream(&s, 128, 127).unwrap().len(), 6);
        assert_eq!(c[1].ids[0], 128);
        assert!(chunk_stream(&s, 1, 0).is_err());
        assert!(chunk_stream(&s, 8, 8).is_err());
    }

    #[test]
    fn plans_are_deterministic_and_vary_by_epoch() {
        let a = epoch_plan(|_| 50, 128, 0, 1, false);
        assert_eq!(a, epoch_plan(|_| 50, 128, 0, 1, false));
        assert_eq!(a.offset, 0);
        assert_ne!(a.permutation, epoch_plan(|_| 50, 128, 1, 1, false).permutation);
        let offsets: Vec<usize> = (0..20).map(|e| epoch_plan(|_| 5, 128, e, 9, true).offset).collect();
        assert!(offsets.iter().all(|&o| o < 128));
        assert!(offsets.iter().any(|&o| o != offsets[0]));
    }

    #[test]
    fn dev_subset_edges() {
        let s = TokenStream::new((0..100).collect(), Split::Dev);
        assert_eq!(fixed_dev_subset(&s, 10, 0, 3).unwrap(), vec![]);
        assert_eq!(fixed_dev_subset(&s, 10, 10, 3).unwrap(), chunk_stream(&s, 10, 0).unwrap());
        let a = fixed_dev_subset(&s, 10, 4, 3).unwrap();
        assert_eq!(a, fixed_dev_subset(&s, 10, 4, 3).unwrap());
        assert!(a.windows(2).all(|w| w[0].ids[0] < w[1].ids[0]));
        assert!(fixed_dev_subset(&s, 10, 11, 3).is_err());
    }

    proptest! {
        #[test]
        fn chunk_coverage_is_exact(n in 0usize..5000, len in 2usize..200, off_frac in 0.0f64..1.0) {
            let offset = ((len as f64) * off_frac) as usize % len;
            let chunks = chunk_stream(&stream(n), len, offset).unwrap();
            let covered: usize = chunks.iter().map(|c| c.ids.len()).sum();
            prop_assert_eq!(covered, n.saturating_sub(offset) / len * len);
            prop_assert!(chunks.iter().all(|c| c.ids.len() == len));
        }

        #[test]
        fn permutation_is_a_bijection(n in 0usize..500, seed in any::<u64>(), epoch in 0u64..50) {
            let mut p = epoch_plan(|_| n, 128, epoch, seed, true).permutation;
            p.sort_unstable();
            prop_assert_eq!(p, (0..n).collect::<Vec<_>>());
        }
    }
}
