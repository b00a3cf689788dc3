//! Exact inner-product retrieval over precomputed item embeddings.
//!
//! Catalogs at desk scale make brute-force scoring affordable, which removes
//! any approximation confound from the evaluation. Index build is
//! embarrassingly parallel over item chunks with each chunk writing its own
//! row range, so the result is bit-identical for any thread count.

use std::collections::BTreeSet;

use crate::data::records::ItemRecord;
use crate::data::vocab::{tokenize_tight, Vocab};
use crate::encoders::{
    encode_item_image, encode_item_multimodal, encode_item_text, Model, ParamBinding,
};
use crate::error::{Result, SmarError};
use crate::numerics::{Tape, Tensor};

const INDEX_NORM_TOL: f64 = 1e-6;
const BUILD_CHUNK: usize = 64;

#[derive(
    Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, serde::Serialize, serde::Deserialize,
)]
#[serde(rename_all = "lowercase")]
pub enum IndexMode {
    Text,
    Image,
    Multimodal,
}

impl std::fmt::Display for IndexMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            IndexMode::Text => write!(f, "text"),
            IndexMode::Image => write!(f, "image"),
            IndexMode::Multimodal => write!(f, "multimodal"),
        }
    }
}

/// Item embeddings in item-id order, every row unit-norm.
pub struct EmbeddingIndex {
    pub mode: IndexMode,
    pub item_ids: Vec<String>,
    pub embeddings: Tensor,
}

impl EmbeddingIndex {
    pub fn new(mode: IndexMode, item_ids: Vec<String>, embeddings: Tensor) -> Result<Self> {
        if item_ids.is_empty() {
            return Err(SmarError::Empty("index with no items".into()));
        }
        if embeddings.rank() != 2 || embeddings.shape()[0] != item_ids.len() {
            return Err(SmarError::DimMismatch {
                op: "embedding_index",
                lhs: vec![item_ids.len()],
                rhs: embeddings.shape().to_vec(),
            });
        }
        let unique: BTreeSet<&String> = item_ids.iter().collect();
        if unique.len() != item_ids.len() {
            return Err(SmarError::Data("duplicate item ids in index".into()));
        }
        for r in 0..item_ids.len() {
            let norm: f64 = embeddings.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > INDEX_NORM_TOL {
                return Err(SmarError::Contract(format!(
                    "index row {r} ({}) has norm {norm}",
                    item_ids[r]
                )));
            }
        }
        Ok(EmbeddingIndex {
            mode,
            item_ids,
            embeddings,
        })
    }

    pub fn len(&self) -> usize {
        self.item_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.item_ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.shape()[1]
    }
}

fn encode_chunk(
    model: &Model,
    vocab: &Vocab,
    mode: IndexMode,
    chunk: &[&ItemRecord],
    out: &mut [f64],
    k: usize,
) -> Result<()> {
    let tape = Tape::new();
    let binding = ParamBinding::frozen(&tape, &model.params);
    for (row, item) in chunk.iter().enumerate() {
        let with_item = |e: SmarError| {
            SmarError::Data(format!("failed to encode item {}: {e}", item.item_id))
        };
        let unit = match mode {
            IndexMode::Text => {
                let tok = tokenize_tight(&item.title, vocab, model.config.item_text.max_seq_len)
                    .map_err(with_item)?;
                encode_item_text(&binding, &model.config, &tok)
                    .map_err(with_item)?
                    .unit
            }
            IndexMode::Image => {
                let img = item.image_seq().map_err(with_item)?;
                encode_item_image(&binding, &model.config, &img)
                    .map_err(with_item)?
                    .unit
            }
            IndexMode::Multimodal => {
                let tok = tokenize_tight(&item.title, vocab, model.config.item_text.max_seq_len)
                    .map_err(with_item)?;
                let img = item.image_seq().map_err(with_item)?;
                let text = encode_item_text(&binding, &model.config, &tok).map_err(with_item)?;
                let image = encode_item_image(&binding, &model.config, &img).map_err(with_item)?;
                encode_item_multimodal(&binding, &model.config, &text, &image)
                    .map_err(with_item)?
                    .unit
            }
        };
        out[row * k..(row + 1) * k].copy_from_slice(unit.tensor().data());
    }
    Ok(())
}

/// Encodes every item under `mode`, ordered by ascending item id.
pub fn build_index(
    model: &Model,
    items: &[ItemRecord],
    vocab: &Vocab,
    mode: IndexMode,
    threads: usize,
) -> Result<EmbeddingIndex> {
    if items.is_empty() {
        return Err(SmarError::Empty("cannot index an empty catalog".into()));
    }
    let mut sorted: Vec<&ItemRecord> = items.iter().collect();
    sorted.sort_by(|a, b| a.item_id.cmp(&b.item_id));

    let k = model.config.dim();
    let mut data = vec![0.0; sorted.len() * k];
    let chunks: Vec<(usize, Vec<&ItemRecord>)> = sorted
        .chunks(BUILD_CHUNK)
        .enumerate()
        .map(|(i, c)| (i * BUILD_CHUNK, c.to_vec()))
        .collect();

    if threads > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| SmarError::Contract(format!("thread pool: {e}")))?;
        let results: Vec<Result<()>> = pool.install(|| {
            use rayon::prelude::*;
            let mut slots: Vec<(usize, &mut [f64])> = Vec::new();
            let mut rest: &mut [f64] = &mut data;
            for (start, chunk) in &chunks {
                let (head, tail) = rest.split_at_mut(chunk.len() * k);
                slots.push((*start, head));
                rest = tail;
            }
            slots
                .into_par_iter()
                .zip(chunks.par_iter())
                .map(|((_, out), (_, chunk))| encode_chunk(model, vocab, mode, chunk, out, k))
                .collect()
        });
        for r in results {
            r?;
        }
    } else {
        for (start, chunk) in &chunks {
            let range = start * k..(start + chunk.len()) * k;
            encode_chunk(model, vocab, mode, chunk, &mut data[range], k)?;
        }
    }

    let ids: Vec<String> = sorted.iter().map(|i| i.item_id.clone()).collect();
    let n = ids.len();
    EmbeddingIndex::new(mode, ids, Tensor::matrix(n, k, data)?)
}

/// Exact top-k by inner product; ties break toward the ascending item id.
/// Returns min(k, N) results.
pub fn topk(index: &EmbeddingIndex, q_emb: &Tensor, k: usize) -> Result<Vec<(String, f64)>> {
    if k == 0 {
        return Err(SmarError::Contract("top-k requires k >= 1".into()));
    }
    if index.is_empty() {
        return Err(SmarError::Empty("top-k over an empty index".into()));
    }
    if q_emb.rank() != 1 || q_emb.numel() != index.dim() {
        return Err(SmarError::DimMismatch {
            op: "topk",
            lhs: q_emb.shape().to_vec(),
            rhs: vec![index.dim()],
        });
    }
    let n = index.len();
    let dim = index.dim();
    let q = q_emb.data();
    let emb = index.embeddings.data();
    let mut scored: Vec<(f64, usize)> = (0..n)
        .map(|r| {
            let row = &emb[r * dim..(r + 1) * dim];
            let mut s = 0.0;
            for j in 0..dim {
                s += row[j] * q[j];
            }
            (s, r)
        })
        .collect();

    // Item ids are sorted ascending, so comparing row indices implements the
    // id tie-break.
    let better = |a: &(f64, usize), b: &(f64, usize)| {
        b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1))
    };
    let take = k.min(n);
    if take < n {
        scored.select_nth_unstable_by(take - 1, better);
        scored.truncate(take);
    }
    scored.sort_by(better);
    Ok(scored
        .into_iter()
        .map(|(s, r)| (index.item_ids[r].clone(), s))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(v: Vec<f64>) -> Vec<f64> {
        let n: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / n).collect()
    }

    fn small_index() -> EmbeddingIndex {
        let rows = vec![
            unit(vec![1.0, 0.0, 0.0]),
            unit(vec![0.0, 1.0, 0.0]),
            unit(vec![1.0, 1.0, 0.0]),
            unit(vec![0.0, 0.0, 1.0]),
        ];
        let data: Vec<f64> = rows.into_iter().flatten().collect();
        EmbeddingIndex::new(
            IndexMode::Text,
            (0..4).map(|i| format!("item-{i}")).collect(),
            Tensor::matrix(4, 3, data).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn exact_row_match_ranks_first_with_unit_score() {
        let idx = small_index();
        let q = Tensor::vector(unit(vec![0.0, 1.0, 0.0])).unwrap();
        let top = topk(&idx, &q, 2).unwrap();
        assert_eq!(top[0].0, "item-1");
        assert!((top[0].1 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn k_larger_than_catalog_returns_all() {
        let idx = small_index();
        let q = Tensor::vector(unit(vec![1.0, 1.0, 1.0])).unwrap();
        assert_eq!(topk(&idx, &q, 10).unwrap().len(), 4);
    }

    #[test]
    fn ties_break_by_ascending_item_id() {
        let data: Vec<f64> = vec![
            unit(vec![1.0, 0.0]),
            unit(vec![0.0, 1.0]),
            unit(vec![1.0, 0.0]),
        ]
        .into_iter()
        .flatten()
        .collect();
        let idx = EmbeddingIndex::new(
            IndexMode::Text,
            vec!["a".into(), "b".into(), "c".into()],
            Tensor::matrix(3, 2, data).unwrap(),
        )
        .unwrap();
        let q = Tensor::vector(unit(vec![1.0, 0.0])).unwrap();
        let top = topk(&idx, &q, 3).unwrap();
        assert_eq!(top[0].0, "a");
        assert_eq!(top[1].0, "c");
        assert_eq!(top[2].0, "b");
    }

    #[test]
    fn agrees_with_full_sort_oracle_on_random_queries() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(90);
        let n = 60;
        let dim = 8;
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| unit((0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()))
            .collect();
        let data: Vec<f64> = rows.iter().flatten().copied().collect();
        let idx = EmbeddingIndex::new(
            IndexMode::Text,
            (0..n).map(|i| format!("item-{i:03}")).collect(),
            Tensor::matrix(n, dim, data).unwrap(),
        )
        .unwrap();

        for trial in 0..100 {
            let q = Tensor::vector(unit((0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()))
                .unwrap();
            let k = 1 + (trial % 12);
            let got = topk(&idx, &q, k).unwrap();

            // Naive oracle: score everything, full stable sort.
            let mut all: Vec<(String, f64)> = (0..n)
                .map(|r| {
                    let s: f64 = idx.embeddings.row(r).iter().zip(q.data()).map(|(a, b)| a * b).sum();
                    (idx.item_ids[r].clone(), s)
                })
                .collect();
            all.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
            all.truncate(k);
            assert_eq!(got, all, "trial {trial}");
        }
    }

    #[test]
    fn empty_index_is_an_error() {
        assert!(EmbeddingIndex::new(IndexMode::Text, vec![], Tensor::zeros(vec![1, 1])).is_err());
    }
}
