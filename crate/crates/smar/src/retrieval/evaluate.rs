//! End-to-end evaluation: encode queries, route, retrieve, score.
//!
//! Adaptive variants route each query through the fashion header to either
//! the text index or the multimodal index; the partition is exact (every
//! query scored against exactly one index mode per run).

use std::collections::{BTreeMap, HashSet};

use crate::data::records::{Corpus, Split};
use crate::data::vocab::{tokenize_tight, Vocab};
use crate::encoders::{Model, ParamBinding, TokenizedInput};
use crate::error::{Result, SmarError};
use crate::numerics::Tape;
use crate::objectives::predict_fashion;
use crate::retrieval::index::{build_index, topk, EmbeddingIndex, IndexMode};
use crate::retrieval::metrics::{macro_report, query_metrics, MetricsReport, QueryMetrics};
use crate::training::checkpoint::{Checkpoint, Stage};
use crate::variant::{ServingMode, Variant};

/// Routing decision for one query.
pub fn route(model: &Model, input: &TokenizedInput) -> Result<(IndexMode, f64)> {
    let (pooled, _) = model.encode_query(input)?;
    let p = predict_fashion(
        &pooled,
        model.params.get("header.w")?,
        model.params.get("header.b")?,
    )?;
    let mode = if p >= model.config.route_threshold {
        IndexMode::Multimodal
    } else {
        IndexMode::Text
    };
    Ok((mode, p))
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct QueryEval {
    pub query_id: String,
    pub text: String,
    pub routed: IndexMode,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub header_p: Option<f64>,
    pub metrics: QueryMetrics,
    pub ranking: Vec<(String, f64)>,
}

pub struct EvalOutcome {
    pub variant: Variant,
    pub ks: Vec<usize>,
    pub per_query: Vec<QueryEval>,
}

impl EvalOutcome {
    pub fn report(&self) -> Result<MetricsReport> {
        self.subset_report(|_| true)
    }

    pub fn subset_report(&self, keep: impl Fn(&QueryEval) -> bool) -> Result<MetricsReport> {
        let subset: Vec<QueryMetrics> = self
            .per_query
            .iter()
            .filter(|q| keep(q))
            .map(|q| q.metrics.clone())
            .collect();
        macro_report(subset, &self.ks)
    }

    /// Queries per routed index mode; the modes partition the query set.
    pub fn routed_counts(&self) -> BTreeMap<IndexMode, usize> {
        let mut counts = BTreeMap::new();
        for q in &self.per_query {
            *counts.entry(q.routed).or_default() += 1;
        }
        counts
    }
}

fn validate_ks(ks: &[usize]) -> Result<()> {
    if ks.is_empty() || ks.iter().any(|&k| k == 0) {
        return Err(SmarError::Contract(format!("invalid k list {ks:?}")));
    }
    Ok(())
}

struct QueryWork {
    query_id: String,
    text: String,
    tokens: TokenizedInput,
    relevant: Vec<String>,
}

fn eval_chunk(
    model: &Model,
    chunk: &[QueryWork],
    serving: ServingMode,
    text_index: Option<&EmbeddingIndex>,
    image_index: Option<&EmbeddingIndex>,
    mm_index: Option<&EmbeddingIndex>,
    ks: &[usize],
    out: &mut [Option<QueryEval>],
) -> Result<()> {
    let max_k = *ks.iter().max().expect("ks validated non-empty");
    let tape = Tape::new();
    let binding = ParamBinding::frozen(&tape, &model.params);
    for (slot, work) in out.iter_mut().zip(chunk) {
        let q = crate::encoders::encode_query(&binding, &model.config, &work.tokens)?;
        let unit = q.unit.tensor();
        let (routed, header_p) = match serving {
            ServingMode::Text => (IndexMode::Text, None),
            ServingMode::Image => (IndexMode::Image, None),
            ServingMode::Adaptive => {
                let p = predict_fashion(
                    &q.pooled.tensor(),
                    model.params.get("header.w")?,
                    model.params.get("header.b")?,
                )?;
                let mode = if p >= model.config.route_threshold {
                    IndexMode::Multimodal
                } else {
                    IndexMode::Text
                };
                (mode, Some(p))
            }
        };
        let index = match routed {
            IndexMode::Text => text_index,
            IndexMode::Image => image_index,
            IndexMode::Multimodal => mm_index,
        }
        .ok_or_else(|| SmarError::Contract(format!("no index built for mode {routed}")))?;
        let ranking = topk(index, &unit, max_k)?;
        let ranked_ids: Vec<String> = ranking.iter().map(|(id, _)| id.clone()).collect();
        let relevant: HashSet<&str> = work.relevant.iter().map(|s| s.as_str()).collect();
        let metrics = query_metrics(&work.query_id, &ranked_ids, &relevant, ks)?;
        *slot = Some(QueryEval {
            query_id: work.query_id.clone(),
            text: work.text.clone(),
            routed,
            header_p,
            metrics,
            ranking,
        });
    }
    Ok(())
}

/// Evaluates a checkpoint on the corpus's qrels under the given variant's
/// serving mode.
pub fn evaluate(
    ckpt: &Checkpoint,
    corpus: &Corpus,
    vocab: &Vocab,
    ks: &[usize],
    variant: Variant,
    threads: usize,
) -> Result<EvalOutcome> {
    validate_ks(ks)?;
    ckpt.ensure_vocab_hash(&vocab.hash())?;
    let serving = variant.serving();
    if serving == ServingMode::Adaptive && ckpt.manifest.stage != Stage::Finetuned {
        return Err(SmarError::ConfigMismatch(format!(
            "adaptive routing needs a finetuned checkpoint, got stage {}",
            ckpt.manifest.stage
        )));
    }
    if ckpt.manifest.model.fusion != variant.fusion() {
        return Err(SmarError::ConfigMismatch(format!(
            "variant {variant} expects fusion {:?} but the checkpoint was trained with {:?}",
            variant.fusion(),
            ckpt.manifest.model.fusion
        )));
    }
    let model = ckpt.to_model()?;

    // Every eval-split pair must have judgments; silent skips hide bugs.
    let judged: HashSet<&str> = corpus.qrels.iter().map(|q| q.query_id.as_str()).collect();
    for pair in &corpus.pairs {
        if pair.split == Split::Eval && !judged.contains(pair.query_id.as_str()) {
            return Err(SmarError::Data(format!(
                "eval query {} missing from qrels",
                pair.query_id
            )));
        }
    }

    let eval_queries = corpus.eval_queries();
    if eval_queries.is_empty() {
        return Err(SmarError::Empty("corpus has no eval queries".into()));
    }

    let text_index = match serving {
        ServingMode::Text | ServingMode::Adaptive => Some(build_index(
            &model,
            &corpus.items,
            vocab,
            IndexMode::Text,
            threads,
        )?),
        ServingMode::Image => None,
    };
    let image_index = match serving {
        ServingMode::Image => Some(build_index(
            &model,
            &corpus.items,
            vocab,
            IndexMode::Image,
            threads,
        )?),
        _ => None,
    };
    let mm_index = match serving {
        ServingMode::Adaptive => Some(build_index(
            &model,
            &corpus.items,
            vocab,
            IndexMode::Multimodal,
            threads,
        )?),
        _ => None,
    };

    let work: Vec<QueryWork> = eval_queries
        .iter()
        .map(|(q, qrel)| {
            Ok(QueryWork {
                query_id: q.query_id.clone(),
                text: q.text.clone(),
                tokens: tokenize_tight(&q.text, vocab, model.config.query.max_seq_len)?,
                relevant: qrel.relevant_item_ids.clone(),
            })
        })
        .collect::<Result<_>>()?;

    const CHUNK: usize = 64;
    let mut slots: Vec<Option<QueryEval>> = Vec::new();
    slots.resize_with(work.len(), || None);
    if threads > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| SmarError::Contract(format!("thread pool: {e}")))?;
        let results: Vec<Result<()>> = pool.install(|| {
            use rayon::prelude::*;
            slots
                .chunks_mut(CHUNK)
                .zip(work.chunks(CHUNK))
                .par_bridge()
                .map(|(out, chunk)| {
                    eval_chunk(
                        &model,
                        chunk,
                        serving,
                        text_index.as_ref(),
                        image_index.as_ref(),
                        mm_index.as_ref(),
                        ks,
                        out,
                    )
                })
                .collect()
        });
        for r in results {
            r?;
        }
    } else {
        for (out, chunk) in slots.chunks_mut(CHUNK).zip(work.chunks(CHUNK)) {
            eval_chunk(
                &model,
                chunk,
                serving,
                text_index.as_ref(),
                image_index.as_ref(),
                mm_index.as_ref(),
                ks,
                out,
            )?;
        }
    }

    let per_query: Vec<QueryEval> = slots
        .into_iter()
        .map(|s| s.ok_or_else(|| SmarError::Contract("query left unevaluated".into())))
        .collect::<Result<_>>()?;
    Ok(EvalOutcome {
        variant,
        ks: ks.to_vec(),
        per_query,
    })
}
