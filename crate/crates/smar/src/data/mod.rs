//! Corpus schema, tokenizer, generators, and batching.

pub mod batching;
pub mod desk;
pub mod records;
pub mod synthetic;
pub mod vocab;

pub use batching::make_batches;
pub use desk::{gen_desk_corpus, is_color_query, CorpusSpec};
pub use records::{
    read_jsonl, write_jsonl, ClickPair, Corpus, CorpusMeta, ItemRecord, QrelRecord, QueryRecord,
    Split,
};
pub use synthetic::{gen_synthetic_queries, SyntheticQueries};
pub use vocab::{build_vocab, tokenize, tokenize_tight, Vocab, PAD_ID, UNK_ID};
