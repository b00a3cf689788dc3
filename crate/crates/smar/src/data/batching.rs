//! Deterministic batching with in-batch-negative hygiene.
//!
//! Within a batch every item id is distinct, so a positive can never appear
//! as its own negative. The shuffle is keyed by (seed, epoch); every pair is
//! emitted exactly once per epoch, and only the trailing batch may be short
//! unless duplicate item ids force an early split.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::records::ClickPair;
use crate::error::{Result, SmarError};

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Batches of indices into `pairs`.
pub fn make_batches(
    pairs: &[ClickPair],
    batch_size: usize,
    seed: u64,
    epoch: usize,
) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(SmarError::Contract("batch size must be positive".into()));
    }
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(&mut epoch_rng(seed, epoch));

    let mut batches = Vec::new();
    let mut remaining = order;
    while !remaining.is_empty() {
        let mut batch = Vec::with_capacity(batch_size);
        let mut used: HashSet<&str> = HashSet::with_capacity(batch_size);
        let mut rest = Vec::new();
        for idx in remaining {
            let item = pairs[idx].item_id.as_str();
            if batch.len() < batch_size && used.insert(item) {
                batch.push(idx);
            } else {
                rest.push(idx);
            }
        }
        batches.push(batch);
        remaining = rest;
    }
    Ok(batches)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::records::Split;

    fn pair(q: usize, item: &str) -> ClickPair {
        ClickPair {
            query_id: format!("q{q}"),
            item_id: item.into(),
            split: Split::Train,
        }
    }

    #[test]
    fn sizes_and_exact_coverage() {
        let pairs: Vec<ClickPair> = (0..10).map(|i| pair(i, &format!("i{i}"))).collect();
        let batches = make_batches(&pairs, 4, 1, 0).unwrap();
        let sizes: Vec<usize> = batches.iter().map(|b| b.len()).collect();
        assert_eq!(sizes, vec![4, 4, 2]);

        let mut seen: Vec<usize> = batches.into_iter().flatten().collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn deterministic_per_seed_epoch_and_distinct_across_epochs() {
        let pairs: Vec<ClickPair> = (0..16).map(|i| pair(i, &format!("i{i}"))).collect();
        let a = make_batches(&pairs, 4, 7, 2).unwrap();
        let b = make_batches(&pairs, 4, 7, 2).unwrap();
        assert_eq!(a, b);
        let c = make_batches(&pairs, 4, 7, 3).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn no_batch_contains_duplicate_items() {
        // Three pairs share one item; they must land in different batches.
        let mut pairs: Vec<ClickPair> = (0..9).map(|i| pair(i, &format!("i{i}"))).collect();
        pairs.push(pair(9, "i0"));
        pairs.push(pair(10, "i0"));
        for epoch in 0..5 {
            let batches = make_batches(&pairs, 4, 3, epoch).unwrap();
            let mut count = 0;
            for batch in &batches {
                let items: Vec<&str> = batch.iter().map(|&i| pairs[i].item_id.as_str()).collect();
                let unique: HashSet<&&str> = items.iter().collect();
                assert_eq!(unique.len(), items.len(), "duplicate item in batch");
                count += batch.len();
            }
            assert_eq!(count, pairs.len());
        }
    }
}
