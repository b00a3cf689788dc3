//! SMAR: modality-asymmetric dense retrieval.
//!
//! Queries are text-only; items carry text and an image-feature sequence.
//! Four transformer towers produce unit-norm embeddings scored by inner
//! product. Pre-training optimizes a weighted three-task in-batch contrastive
//! objective (query↔item-text, query↔item-image, query↔fused); fine-tuning on
//! click pairs mixes the text and fused objectives per query through a learned
//! fashion-prediction header, which also routes queries to the text or the
//! multimodal item index at serving time.
//!
//! The crate is organized bottom-up:
//!
//! - [`numerics`]: tensors, the autodiff tape, and a finite-difference checker
//! - [`encoders`]: the four towers and their parameter set
//! - [`objectives`]: scoring, contrastive losses, header and adaptive loss
//! - [`data`]: corpus schema, tokenizer, synthetic corpora, batching
//! - [`training`]: AdamW, pre-train/fine-tune loops, checkpoints
//! - [`retrieval`]: exact top-k search, metrics, ablation and sweep harnesses
//! - [`cli`]: the `smar` command-line surface

pub mod error;
pub mod cli;
pub mod config;
pub mod data;
pub mod encoders;
pub mod numerics;
pub mod objectives;
pub mod retrieval;
pub mod training;
pub mod variant;

pub use error::{Result, SmarError};
