//! C ABI for serving SMAR retrieval from other languages.
//!
//! All heap objects cross the boundary as opaque pointers with `_free`
//! functions; every fallible call returns a [`SmarStatus`] and leaves a
//! description retrievable via [`smar_last_error`] on failure. The generated
//! header lives at `include/smar.h`.
//!
//! Typical call sequence:
//!
//! ```c
//! smar_model_t *model = NULL;
//! smar_model_load("finetuned.ckpt", "vocab.json", &model);
//! smar_index_t *index = NULL;
//! smar_index_build(model, "items.jsonl", SMAR_INDEX_MODE_MULTIMODAL, 1, &index);
//! size_t n = 0;
//! smar_search(model, index, "red dress", 10, &n, rows, scores);
//! const char *best = smar_index_item_id(index, rows[0]);
//! ```

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::path::Path;
use std::ptr;

use smar::data::records::read_jsonl;
use smar::data::records::ItemRecord;
use smar::data::vocab::{tokenize_tight, Vocab};
use smar::encoders::Model;
use smar::error::SmarError;
use smar::retrieval::evaluate::route;
use smar::retrieval::index::{build_index, topk, EmbeddingIndex, IndexMode};
use smar::training::checkpoint::Checkpoint;

/// Result codes for every fallible FFI call.
#[repr(C)]
#[derive(Clone, Copy, PartialEq, Eq)]
pub enum SmarStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    Io = 3,
    BadInput = 4,
    Internal = 5,
}

/// Item-side representation an index is built from.
#[repr(C)]
#[derive(Clone, Copy, PartialEq, Eq)]
pub enum SmarIndexMode {
    Text = 0,
    Image = 1,
    Multimodal = 2,
}

/// Routing decision for a query.
#[repr(C)]
#[derive(Clone, Copy, PartialEq, Eq)]
pub enum SmarRoute {
    Text = 0,
    Multimodal = 1,
}

/// Opaque: a loaded checkpoint plus its vocabulary.
pub struct SmarModel {
    model: Model,
    vocab: Vocab,
}

/// Opaque: item embeddings ready for exact top-k search.
pub struct SmarIndex {
    index: EmbeddingIndex,
    // CStrings kept alive so borrowed id pointers stay valid.
    ids: Vec<CString>,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let sanitized = msg.replace('\0', " ");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
}

fn status_of(err: &SmarError) -> SmarStatus {
    match err {
        SmarError::Io { .. } => SmarStatus::Io,
        SmarError::CorruptCheckpoint(_)
        | SmarError::ConfigMismatch(_)
        | SmarError::Data(_)
        | SmarError::Empty(_)
        | SmarError::VocabId { .. } => SmarStatus::BadInput,
        _ => SmarStatus::Internal,
    }
}

fn fail(err: SmarError) -> SmarStatus {
    set_error(&err.to_string());
    status_of(&err)
}

/// # Safety
/// `ptr` must be a valid NUL-terminated string.
unsafe fn cstr<'a>(ptr: *const c_char, what: &str) -> Result<&'a str, SmarStatus> {
    if ptr.is_null() {
        set_error(&format!("{what} is null"));
        return Err(SmarStatus::NullArgument);
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| {
        set_error(&format!("{what} is not valid UTF-8"));
        SmarStatus::InvalidUtf8
    })
}

/// Message describing the most recent failure on this thread. Borrowed;
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn smar_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// ABI version, major*10000 + minor*100 + patch.
#[no_mangle]
pub extern "C" fn smar_ffi_version() -> u32 {
    100
}

/// Loads a checkpoint and its vocabulary file into an opaque model handle.
///
/// # Safety
/// `ckpt_path` and `vocab_path` must be valid NUL-terminated strings;
/// `out_model` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn smar_model_load(
    ckpt_path: *const c_char,
    vocab_path: *const c_char,
    out_model: *mut *mut SmarModel,
) -> SmarStatus {
    if out_model.is_null() {
        set_error("out_model is null");
        return SmarStatus::NullArgument;
    }
    let ckpt_path = match cstr(ckpt_path, "ckpt_path") {
        Ok(s) => s,
        Err(st) => return st,
    };
    let vocab_path = match cstr(vocab_path, "vocab_path") {
        Ok(s) => s,
        Err(st) => return st,
    };
    let loaded = (|| -> Result<SmarModel, SmarError> {
        let ckpt = Checkpoint::load(Path::new(ckpt_path))?;
        let vocab = Vocab::load(Path::new(vocab_path))?;
        ckpt.ensure_vocab_hash(&vocab.hash())?;
        Ok(SmarModel {
            model: ckpt.to_model()?,
            vocab,
        })
    })();
    match loaded {
        Ok(m) => {
            *out_model = Box::into_raw(Box::new(m));
            SmarStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// # Safety
/// `model` must be a pointer returned by [`smar_model_load`], or null.
#[no_mangle]
pub unsafe extern "C" fn smar_model_free(model: *mut SmarModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Embedding dimension of the loaded model.
///
/// # Safety
/// `model` must be a valid model handle.
#[no_mangle]
pub unsafe extern "C" fn smar_model_dim(model: *const SmarModel) -> usize {
    if model.is_null() {
        return 0;
    }
    (*model).model.config.dim()
}

/// Encodes a query into `out_embedding` (length `smar_model_dim`); the
/// vector is L2-normalized.
///
/// # Safety
/// `model` must be a valid handle, `text` a valid NUL-terminated string, and
/// `out_embedding` writable for `smar_model_dim(model)` doubles.
#[no_mangle]
pub unsafe extern "C" fn smar_encode_query(
    model: *const SmarModel,
    text: *const c_char,
    out_embedding: *mut f64,
) -> SmarStatus {
    if model.is_null() || out_embedding.is_null() {
        set_error("model or out_embedding is null");
        return SmarStatus::NullArgument;
    }
    let text = match cstr(text, "text") {
        Ok(s) => s,
        Err(st) => return st,
    };
    let handle = &*model;
    let encoded = (|| -> Result<Vec<f64>, SmarError> {
        let tok = tokenize_tight(text, &handle.vocab, handle.model.config.query.max_seq_len)?;
        let (_, unit) = handle.model.encode_query(&tok)?;
        Ok(unit.data().to_vec())
    })();
    match encoded {
        Ok(v) => {
            ptr::copy_nonoverlapping(v.as_ptr(), out_embedding, v.len());
            SmarStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// Routing decision and header probability for a query. Requires a
/// fine-tuned checkpoint (the header is untrained before that stage).
///
/// # Safety
/// `model` must be a valid handle, `text` a valid NUL-terminated string;
/// `out_route` and `out_probability` may be null when not wanted.
#[no_mangle]
pub unsafe extern "C" fn smar_route_query(
    model: *const SmarModel,
    text: *const c_char,
    out_route: *mut SmarRoute,
    out_probability: *mut f64,
) -> SmarStatus {
    if model.is_null() {
        set_error("model is null");
        return SmarStatus::NullArgument;
    }
    let text = match cstr(text, "text") {
        Ok(s) => s,
        Err(st) => return st,
    };
    let handle = &*model;
    let routed = (|| -> Result<(IndexMode, f64), SmarError> {
        let tok = tokenize_tight(text, &handle.vocab, handle.model.config.query.max_seq_len)?;
        route(&handle.model, &tok)
    })();
    match routed {
        Ok((mode, p)) => {
            if !out_route.is_null() {
                *out_route = match mode {
                    IndexMode::Multimodal => SmarRoute::Multimodal,
                    _ => SmarRoute::Text,
                };
            }
            if !out_probability.is_null() {
                *out_probability = p;
            }
            SmarStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// Builds an item index from an `items.jsonl` file.
///
/// # Safety
/// `model` must be a valid handle, `items_jsonl` a valid NUL-terminated path,
/// `out_index` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn smar_index_build(
    model: *const SmarModel,
    items_jsonl: *const c_char,
    mode: SmarIndexMode,
    threads: usize,
    out_index: *mut *mut SmarIndex,
) -> SmarStatus {
    if model.is_null() || out_index.is_null() {
        set_error("model or out_index is null");
        return SmarStatus::NullArgument;
    }
    let path = match cstr(items_jsonl, "items_jsonl") {
        Ok(s) => s,
        Err(st) => return st,
    };
    let handle = &*model;
    let built = (|| -> Result<SmarIndex, SmarError> {
        let items: Vec<ItemRecord> = read_jsonl(Path::new(path))?;
        let mode = match mode {
            SmarIndexMode::Text => IndexMode::Text,
            SmarIndexMode::Image => IndexMode::Image,
            SmarIndexMode::Multimodal => IndexMode::Multimodal,
        };
        let index = build_index(&handle.model, &items, &handle.vocab, mode, threads.max(1))?;
        let ids = index
            .item_ids
            .iter()
            .map(|id| CString::new(id.as_str()).unwrap_or_default())
            .collect();
        Ok(SmarIndex { index, ids })
    })();
    match built {
        Ok(i) => {
            *out_index = Box::into_raw(Box::new(i));
            SmarStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// # Safety
/// `index` must be a pointer returned by [`smar_index_build`], or null.
#[no_mangle]
pub unsafe extern "C" fn smar_index_free(index: *mut SmarIndex) {
    if !index.is_null() {
        drop(Box::from_raw(index));
    }
}

/// Number of items in the index.
///
/// # Safety
/// `index` must be a valid index handle.
#[no_mangle]
pub unsafe extern "C" fn smar_index_len(index: *const SmarIndex) -> usize {
    if index.is_null() {
        return 0;
    }
    (*index).index.len()
}

/// Borrowed item id for an index row; valid while the index lives. Null when
/// the row is out of range.
///
/// # Safety
/// `index` must be a valid index handle.
#[no_mangle]
pub unsafe extern "C" fn smar_index_item_id(
    index: *const SmarIndex,
    row: usize,
) -> *const c_char {
    if index.is_null() {
        return ptr::null();
    }
    let handle = &*index;
    match handle.ids.get(row) {
        Some(id) => id.as_ptr(),
        None => ptr::null(),
    }
}

/// Exact top-k search with a caller-provided query embedding. Writes up to
/// `k` (row, score) pairs and the actual count into `out_len`.
///
/// # Safety
/// `q_embedding` must point to `dim` doubles; `out_rows` and `out_scores`
/// must be writable for `k` entries; `out_len` must be valid.
#[no_mangle]
pub unsafe extern "C" fn smar_topk(
    index: *const SmarIndex,
    q_embedding: *const f64,
    dim: usize,
    k: usize,
    out_len: *mut usize,
    out_rows: *mut usize,
    out_scores: *mut f64,
) -> SmarStatus {
    if index.is_null()
        || q_embedding.is_null()
        || out_len.is_null()
        || out_rows.is_null()
        || out_scores.is_null()
    {
        set_error("null argument to smar_topk");
        return SmarStatus::NullArgument;
    }
    let handle = &*index;
    let q = std::slice::from_raw_parts(q_embedding, dim);
    let searched = (|| -> Result<Vec<(String, f64)>, SmarError> {
        let q = smar::numerics::Tensor::vector(q.to_vec())?;
        topk(&handle.index, &q, k)
    })();
    match searched {
        Ok(ranked) => {
            // topk returns ids; map back to rows via the sorted id order.
            *out_len = ranked.len();
            for (i, (id, score)) in ranked.iter().enumerate() {
                let row = handle
                    .index
                    .item_ids
                    .binary_search(id)
                    .expect("id came from this index");
                *out_rows.add(i) = row;
                *out_scores.add(i) = *score;
            }
            SmarStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// Encode-and-search convenience: tokenizes `text`, embeds it, and runs
/// exact top-k against the given index.
///
/// # Safety
/// Pointer requirements as in [`smar_encode_query`] and [`smar_topk`].
#[no_mangle]
pub unsafe extern "C" fn smar_search(
    model: *const SmarModel,
    index: *const SmarIndex,
    text: *const c_char,
    k: usize,
    out_len: *mut usize,
    out_rows: *mut usize,
    out_scores: *mut f64,
) -> SmarStatus {
    if model.is_null() {
        set_error("model is null");
        return SmarStatus::NullArgument;
    }
    let dim = (*model).model.config.dim();
    let mut embedding = vec![0.0f64; dim];
    let status = smar_encode_query(model, text, embedding.as_mut_ptr());
    if status != SmarStatus::Ok {
        return status;
    }
    smar_topk(
        index,
        embedding.as_ptr(),
        dim,
        k,
        out_len,
        out_rows,
        out_scores,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use smar::data::vocab::build_vocab;
    use smar::data::{gen_desk_corpus, CorpusSpec};
    use smar::encoders::{ModelConfig, ModelParams};
    use smar::training::checkpoint::Stage;

    fn fixture(dir: &Path) -> (CString, CString, CString) {
        let spec = CorpusSpec {
            n_items: 40,
            n_train_queries: 10,
            n_eval_queries: 5,
            ..CorpusSpec::default()
        };
        let corpus = gen_desk_corpus(&spec, 3).unwrap();
        corpus.save(dir).unwrap();
        let vocab = build_vocab(corpus.vocab_texts(), 1).unwrap();
        vocab.save(&dir.join("vocab.json")).unwrap();

        let mut cfg = ModelConfig::desk(vocab.size(), spec.d_img);
        for t in [
            &mut cfg.query,
            &mut cfg.item_text,
            &mut cfg.item_image,
            &mut cfg.item_mm,
        ] {
            t.model_dim = 16;
            t.ff_dim = 32;
            t.heads = 2;
        }
        let params = ModelParams::init(&cfg, 9).unwrap();
        let ckpt = Checkpoint::new(Stage::Finetuned, 0, 9, cfg, vocab.hash(), params).unwrap();
        ckpt.save(&dir.join("model.ckpt")).unwrap();

        let c = |p: std::path::PathBuf| CString::new(p.to_str().unwrap()).unwrap();
        (
            c(dir.join("model.ckpt")),
            c(dir.join("vocab.json")),
            c(dir.join("items.jsonl")),
        )
    }

    #[test]
    fn load_search_free_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (ckpt, vocab, items) = fixture(dir.path());

        unsafe {
            let mut model: *mut SmarModel = ptr::null_mut();
            assert!(smar_model_load(ckpt.as_ptr(), vocab.as_ptr(), &mut model) == SmarStatus::Ok);
            let dim = smar_model_dim(model);
            assert_eq!(dim, 16);

            let mut index: *mut SmarIndex = ptr::null_mut();
            assert!(
                smar_index_build(model, items.as_ptr(), SmarIndexMode::Text, 1, &mut index)
                    == SmarStatus::Ok
            );
            assert_eq!(smar_index_len(index), 40);

            let query = CString::new("acme dress").unwrap();
            let mut emb = vec![0.0; dim];
            assert!(smar_encode_query(model, query.as_ptr(), emb.as_mut_ptr()) == SmarStatus::Ok);
            let norm: f64 = emb.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-9);

            let mut rows = vec![0usize; 5];
            let mut scores = vec![0.0f64; 5];
            let mut len = 0usize;
            assert!(
                smar_search(
                    model,
                    index,
                    query.as_ptr(),
                    5,
                    &mut len,
                    rows.as_mut_ptr(),
                    scores.as_mut_ptr()
                ) == SmarStatus::Ok
            );
            assert_eq!(len, 5);
            assert!(scores.windows(2).all(|w| w[0] >= w[1]), "descending scores");
            let id = smar_index_item_id(index, rows[0]);
            assert!(!id.is_null());
            assert!(CStr::from_ptr(id).to_str().unwrap().starts_with("item-"));

            let mut route_out = SmarRoute::Text;
            let mut p = -1.0;
            assert!(
                smar_route_query(model, query.as_ptr(), &mut route_out, &mut p)
                    == SmarStatus::Ok
            );
            assert!((0.0..=1.0).contains(&p));

            smar_index_free(index);
            smar_model_free(model);
        }
    }

    #[test]
    fn errors_set_message_and_status() {
        unsafe {
            let mut model: *mut SmarModel = ptr::null_mut();
            let bogus = CString::new("/nonexistent/x.ckpt").unwrap();
            let vocab = CString::new("/nonexistent/v.json").unwrap();
            let st = smar_model_load(bogus.as_ptr(), vocab.as_ptr(), &mut model);
            assert!(st == SmarStatus::Io);
            let msg = CStr::from_ptr(smar_last_error()).to_str().unwrap();
            assert!(msg.contains("x.ckpt"), "{msg}");

            let st = smar_model_load(ptr::null(), vocab.as_ptr(), &mut model);
            assert!(st == SmarStatus::NullArgument);
        }
    }

    #[test]
    fn vocab_mismatch_is_rejected_at_load() {
        let dir = tempfile::tempdir().unwrap();
        let (ckpt, _, _) = fixture(dir.path());
        let other = build_vocab(["completely different tokens"].iter().copied(), 1).unwrap();
        other.save(&dir.path().join("other.json")).unwrap();
        let other_c = CString::new(dir.path().join("other.json").to_str().unwrap()).unwrap();
        unsafe {
            let mut model: *mut SmarModel = ptr::null_mut();
            let st = smar_model_load(ckpt.as_ptr(), other_c.as_ptr(), &mut model);
            assert!(st == SmarStatus::BadInput);
        }
    }
}
