//! Corpus schema and JSONL interchange.
//!
//! One record per line, UTF-8. The four files of a corpus directory:
//! `items.jsonl`, `queries.jsonl`, `pairs.jsonl`, `qrels.jsonl`; generated
//! corpora additionally carry a `meta.json` describing how they were built.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::encoders::ImageFeatureSeq;
use crate::error::{Result, SmarError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemRecord {
    pub item_id: String,
    pub title: String,
    pub category: String,
    pub brand: String,
    pub fashion: bool,
    /// Pre-extracted image features, one row per region.
    pub image_features: Vec<Vec<f64>>,
}

impl ItemRecord {
    pub fn image_seq(&self) -> Result<ImageFeatureSeq> {
        ImageFeatureSeq::from_rows(&self.image_features)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub query_id: String,
    pub text: String,
    pub synthetic: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClickPair {
    pub query_id: String,
    pub item_id: String,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QrelRecord {
    pub query_id: String,
    pub relevant_item_ids: Vec<String>,
}

/// Provenance of a generated corpus; consumed by the evaluation harnesses to
/// recover the color vocabulary and fashion noun list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusMeta {
    pub spec: crate::data::desk::CorpusSpec,
    pub seed: u64,
    pub colors: Vec<String>,
    pub fashion_nouns: Vec<String>,
    pub n_colored_items: usize,
    pub n_color_queries_train: usize,
    pub n_color_queries_eval: usize,
    pub n_synthetic_queries: usize,
    pub single_token_titles_skipped: usize,
}

#[derive(Clone, Debug, Default)]
pub struct Corpus {
    pub items: Vec<ItemRecord>,
    pub queries: Vec<QueryRecord>,
    pub pairs: Vec<ClickPair>,
    pub qrels: Vec<QrelRecord>,
    pub meta: Option<CorpusMeta>,
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let file = File::create(path).map_err(|e| SmarError::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")
            .map_err(|e| SmarError::io(path.display().to_string(), e))?;
    }
    w.flush()
        .map_err(|e| SmarError::io(path.display().to_string(), e))?;
    Ok(())
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| SmarError::io(path.display().to_string(), e))?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| SmarError::io(path.display().to_string(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: T = serde_json::from_str(&line).map_err(|e| {
            SmarError::Data(format!(
                "{}:{}: malformed record: {e}",
                path.display(),
                lineno + 1
            ))
        })?;
        out.push(record);
    }
    Ok(out)
}

impl Corpus {
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| SmarError::io(dir.display().to_string(), e))?;
        write_jsonl(&dir.join("items.jsonl"), &self.items)?;
        write_jsonl(&dir.join("queries.jsonl"), &self.queries)?;
        write_jsonl(&dir.join("pairs.jsonl"), &self.pairs)?;
        write_jsonl(&dir.join("qrels.jsonl"), &self.qrels)?;
        if let Some(meta) = &self.meta {
            let path = dir.join("meta.json");
            let json = serde_json::to_string_pretty(meta)?;
            std::fs::write(&path, json + "\n")
                .map_err(|e| SmarError::io(path.display().to_string(), e))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let corpus = Corpus {
            items: read_jsonl(&dir.join("items.jsonl"))?,
            queries: read_jsonl(&dir.join("queries.jsonl"))?,
            pairs: read_jsonl(&dir.join("pairs.jsonl"))?,
            qrels: read_jsonl(&dir.join("qrels.jsonl"))?,
            meta: {
                let path = dir.join("meta.json");
                if path.exists() {
                    let text = std::fs::read_to_string(&path)
                        .map_err(|e| SmarError::io(path.display().to_string(), e))?;
                    Some(serde_json::from_str(&text)?)
                } else {
                    None
                }
            },
        };
        corpus.validate()?;
        Ok(corpus)
    }

    pub fn validate(&self) -> Result<()> {
        let mut item_ids = BTreeSet::new();
        for item in &self.items {
            if !item_ids.insert(item.item_id.as_str()) {
                return Err(SmarError::Data(format!(
                    "duplicate item_id {}",
                    item.item_id
                )));
            }
            if item.image_features.is_empty() {
                return Err(SmarError::Data(format!(
                    "item {} has no image features",
                    item.item_id
                )));
            }
        }
        let mut query_ids = BTreeSet::new();
        for q in &self.queries {
            if !query_ids.insert(q.query_id.as_str()) {
                return Err(SmarError::Data(format!(
                    "duplicate query_id {}",
                    q.query_id
                )));
            }
        }
        let mut seen_pairs = BTreeSet::new();
        for p in &self.pairs {
            if !query_ids.contains(p.query_id.as_str()) {
                return Err(SmarError::Data(format!(
                    "pair references unknown query {}",
                    p.query_id
                )));
            }
            if !item_ids.contains(p.item_id.as_str()) {
                return Err(SmarError::Data(format!(
                    "pair references unknown item {}",
                    p.item_id
                )));
            }
            if !seen_pairs.insert((p.query_id.as_str(), p.item_id.as_str())) {
                return Err(SmarError::Data(format!(
                    "duplicate pair ({}, {})",
                    p.query_id, p.item_id
                )));
            }
        }
        for qrel in &self.qrels {
            if !query_ids.contains(qrel.query_id.as_str()) {
                return Err(SmarError::Data(format!(
                    "qrel references unknown query {}",
                    qrel.query_id
                )));
            }
            if qrel.relevant_item_ids.is_empty() {
                return Err(SmarError::Data(format!(
                    "qrel for {} is empty",
                    qrel.query_id
                )));
            }
            for id in &qrel.relevant_item_ids {
                if !item_ids.contains(id.as_str()) {
                    return Err(SmarError::Data(format!(
                        "qrel for {} references unknown item {id}",
                        qrel.query_id
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn item_map(&self) -> BTreeMap<&str, &ItemRecord> {
        self.items.iter().map(|i| (i.item_id.as_str(), i)).collect()
    }

    pub fn query_map(&self) -> BTreeMap<&str, &QueryRecord> {
        self.queries
            .iter()
            .map(|q| (q.query_id.as_str(), q))
            .collect()
    }

    /// All train-split pairs; pre-training consumes true and synthetic pairs
    /// alike.
    pub fn pretrain_pairs(&self) -> Vec<&ClickPair> {
        self.pairs
            .iter()
            .filter(|p| p.split == Split::Train)
            .collect()
    }

    /// Train-split pairs whose query is a real (non-synthetic) one; these are
    /// the click pairs fine-tuning trains on.
    pub fn click_pairs(&self) -> Vec<&ClickPair> {
        let qmap = self.query_map();
        self.pairs
            .iter()
            .filter(|p| {
                p.split == Split::Train
                    && qmap.get(p.query_id.as_str()).map(|q| !q.synthetic).unwrap_or(false)
            })
            .collect()
    }

    /// Queries that have relevance judgments, in qrels order.
    pub fn eval_queries(&self) -> Vec<(&QueryRecord, &QrelRecord)> {
        let qmap = self.query_map();
        self.qrels
            .iter()
            .filter_map(|qrel| qmap.get(qrel.query_id.as_str()).map(|q| (*q, qrel)))
            .collect()
    }

    /// Fashion label per query: majority vote over the fashion flags of its
    /// relevant items (qrels when present, otherwise its train clicks). Ties
    /// count as not-fashion.
    pub fn query_fashion_labels(&self) -> BTreeMap<String, bool> {
        let item_map = self.item_map();
        let mut votes: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
        for qrel in &self.qrels {
            let entry = votes.entry(qrel.query_id.as_str()).or_default();
            for id in &qrel.relevant_item_ids {
                if let Some(item) = item_map.get(id.as_str()) {
                    entry.0 += usize::from(item.fashion);
                    entry.1 += 1;
                }
            }
        }
        for pair in &self.pairs {
            if pair.split != Split::Train {
                continue;
            }
            if votes.contains_key(pair.query_id.as_str()) {
                continue;
            }
            if let Some(item) = item_map.get(pair.item_id.as_str()) {
                let entry = votes.entry(pair.query_id.as_str()).or_default();
                entry.0 += usize::from(item.fashion);
                entry.1 += 1;
            }
        }
        votes
            .into_iter()
            .map(|(q, (fashion, total))| (q.to_string(), 2 * fashion > total))
            .collect()
    }

    /// Text stream for vocabulary construction: item text fields plus all
    /// query texts.
    pub fn vocab_texts(&self) -> impl Iterator<Item = &str> {
        self.items
            .iter()
            .flat_map(|i| {
                [i.title.as_str(), i.category.as_str(), i.brand.as_str()].into_iter()
            })
            .chain(self.queries.iter().map(|q| q.text.as_str()))
    }
}
