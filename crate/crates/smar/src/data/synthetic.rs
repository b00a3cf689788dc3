//! Synthetic query enrichment for pre-training.
//!
//! Each synthetic query is a subset of one item title's tokens (contiguous
//! window or order-preserving random subset, length 1..title_len-1), paired
//! with that item as its positive. The generated pair count is roughly
//! `factor` times the true pair count.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::records::{ClickPair, ItemRecord, QueryRecord, Split};
use crate::error::{Result, SmarError};

pub struct SyntheticQueries {
    pub queries: Vec<QueryRecord>,
    pub pairs: Vec<ClickPair>,
    /// Items whose single-token titles cannot yield a strict subset.
    pub skipped_single_token_items: usize,
}

pub fn gen_synthetic_queries(
    items: &[ItemRecord],
    n_true_pairs: usize,
    factor: f64,
    seed: u64,
) -> Result<SyntheticQueries> {
    if factor <= 0.0 {
        return Err(SmarError::Contract(format!(
            "synthetic factor {factor} must be positive"
        )));
    }
    let eligible: Vec<&ItemRecord> = items
        .iter()
        .filter(|i| i.title.split_whitespace().count() >= 2)
        .collect();
    let skipped = items.len() - eligible.len();
    let target = (factor * n_true_pairs as f64).round() as usize;

    let mut out = SyntheticQueries {
        queries: Vec::new(),
        pairs: Vec::new(),
        skipped_single_token_items: skipped,
    };
    if eligible.is_empty() || target == 0 {
        return Ok(out);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..target {
        let item = eligible[rng.gen_range(0..eligible.len())];
        let tokens: Vec<&str> = item.title.split_whitespace().collect();
        let len = rng.gen_range(1..tokens.len());
        let picked: Vec<&str> = if rng.gen_bool(0.5) {
            let start = rng.gen_range(0..=tokens.len() - len);
            tokens[start..start + len].to_vec()
        } else {
            let mut idx: Vec<usize> = (0..tokens.len()).collect();
            idx.shuffle(&mut rng);
            let mut chosen: Vec<usize> = idx.into_iter().take(len).collect();
            chosen.sort_unstable();
            chosen.into_iter().map(|j| tokens[j]).collect()
        };
        let query_id = format!("synq-{i:06}");
        out.queries.push(QueryRecord {
            query_id: query_id.clone(),
            text: picked.join(" "),
            synthetic: true,
        });
        out.pairs.push(ClickPair {
            query_id,
            item_id: item.item_id.clone(),
            split: Split::Train,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn item(id: &str, title: &str) -> ItemRecord {
        ItemRecord {
            item_id: id.into(),
            title: title.into(),
            category: "c".into(),
            brand: "b".into(),
            fashion: false,
            image_features: vec![vec![0.0]],
        }
    }

    #[test]
    fn every_synthetic_query_is_a_title_subset() {
        let items = vec![item("i1", "red cotton dress"), item("i2", "acme leather boot")];
        let out = gen_synthetic_queries(&items, 40, 2.0, 9).unwrap();
        assert_eq!(out.pairs.len(), 80);
        let by_id: std::collections::HashMap<&str, &ItemRecord> =
            items.iter().map(|i| (i.item_id.as_str(), i)).collect();
        for (q, p) in out.queries.iter().zip(&out.pairs) {
            let title: HashSet<&str> = by_id[p.item_id.as_str()].title.split_whitespace().collect();
            let q_tokens: Vec<&str> = q.text.split_whitespace().collect();
            assert!(!q_tokens.is_empty() && q_tokens.len() < title.len() + 1);
            for t in q_tokens {
                assert!(title.contains(t), "{t} not in source title");
            }
        }
    }

    #[test]
    fn tiny_factor_is_fine_and_single_token_titles_are_skipped() {
        let items = vec![item("i1", "solo"), item("i2", "two words")];
        let out = gen_synthetic_queries(&items, 3, 0.0001, 1).unwrap();
        assert!(out.pairs.is_empty());
        assert_eq!(out.skipped_single_token_items, 1);
    }

    #[test]
    fn same_seed_gives_identical_output() {
        let items = vec![item("i1", "red cotton dress"), item("i2", "blue wool scarf")];
        let a = gen_synthetic_queries(&items, 20, 1.5, 5).unwrap();
        let b = gen_synthetic_queries(&items, 20, 1.5, 5).unwrap();
        assert_eq!(a.queries, b.queries);
        assert_eq!(a.pairs, b.pairs);
    }
}
