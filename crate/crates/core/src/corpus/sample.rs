//! Uniform negative sampling without replacement.

use std::collections::HashSet;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Draw `k` distinct item ids uniformly from `1..vocab_size` excluding
/// `exclude` (the user's history). Deterministic for a given rng state.
pub fn sample_negatives(
    k: usize,
    vocab_size: usize,
    exclude: &HashSet<u32>,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<u32>> {
    let candidates = vocab_size.saturating_sub(1); // pad id 0 is never a candidate
    let excluded_in_range =
        exclude.iter().filter(|&&x| x >= 1 && (x as usize) < vocab_size).count();
    let pool = candidates - excluded_in_range;
    if pool < k {
        return Err(Error::PoolTooSmall { need: k, have: pool });
    }

    // Rejection sampling is fast while the pool is much larger than k;
    // otherwise shuffle the materialized pool.
    if k * 2 <= pool {
        let mut chosen = HashSet::with_capacity(k);
        let mut out = Vec::with_capacity(k);
        while out.len() < k {
            let id = rng.random_range(1..vocab_size) as u32;
            if exclude.contains(&id) || !chosen.insert(id) {
                continue;
            }
            out.push(id);
        }
        Ok(out)
    } else {
        let mut pool_ids: Vec<u32> =
            (1..vocab_size as u32).filter(|id| !exclude.contains(id)).collect();
        for i in 0..k {
            let j = rng.random_range(i..pool_ids.len());
            pool_ids.swap(i, j);
        }
        pool_ids.truncate(k);
        Ok(pool_ids)
    }
}
