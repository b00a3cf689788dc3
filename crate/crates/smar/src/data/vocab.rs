//! Whitespace/lowercase vocabulary and tokenizer.
//!
//! Ids 0 and 1 are reserved for PAD and UNK; the CLS position is handled by
//! the towers and never appears in the vocabulary. Token ids are assigned by
//! descending frequency, ties broken lexicographically, so two builds over
//! the same corpus agree exactly.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoders::TokenizedInput;
use crate::error::{Result, SmarError};

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
const PAD_TOKEN: &str = "<pad>";
const UNK_TOKEN: &str = "<unk>";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, u32>,
}

impl Vocab {
    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocab { tokens, index }
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn id_of(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token_of(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(|s| s.as_str())
    }

    /// Stable content hash, recorded in checkpoints so a model is never
    /// evaluated against a different token table than it was trained on.
    pub fn hash(&self) -> String {
        let mut hasher = Sha256::new();
        for t in &self.tokens {
            hasher.update(t.as_bytes());
            hasher.update(b"\n");
        }
        let digest = hasher.finalize();
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let json = serde_json::to_string_pretty(&self.tokens)?;
        std::fs::write(path, json + "\n")
            .map_err(|e| SmarError::io(path.display().to_string(), e))?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| SmarError::io(path.display().to_string(), e))?;
        let tokens: Vec<String> = serde_json::from_str(&text)?;
        if tokens.len() < 2 || tokens[0] != PAD_TOKEN || tokens[1] != UNK_TOKEN {
            return Err(SmarError::Data(format!(
                "vocab file {} lacks reserved pad/unk entries",
                path.display()
            )));
        }
        Ok(Vocab::from_tokens(tokens))
    }
}

fn split_tokens(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace().map(|t| t.to_lowercase())
}

/// Builds a vocabulary over the given texts, keeping tokens with frequency at
/// least `min_freq`.
pub fn build_vocab<'a>(
    texts: impl IntoIterator<Item = &'a str>,
    min_freq: usize,
) -> Result<Vocab> {
    if min_freq == 0 {
        return Err(SmarError::Contract("min_freq must be at least 1".into()));
    }
    let mut freq: HashMap<String, usize> = HashMap::new();
    for text in texts {
        for tok in split_tokens(text) {
            *freq.entry(tok).or_default() += 1;
        }
    }
    if freq.is_empty() {
        return Err(SmarError::Empty("corpus has no tokens".into()));
    }
    let mut ranked: Vec<(String, usize)> =
        freq.into_iter().filter(|(_, c)| *c >= min_freq).collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

    let mut tokens = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
    tokens.extend(ranked.into_iter().map(|(t, _)| t));
    Ok(Vocab::from_tokens(tokens))
}

/// Tokenizes to exactly `max_len` positions: lowercase whitespace split,
/// UNK for unknown tokens, tail truncation (the head of a title carries the
/// head noun), PAD plus mask for the remainder.
pub fn tokenize(text: &str, vocab: &Vocab, max_len: usize) -> Result<TokenizedInput> {
    if max_len == 0 {
        return Err(SmarError::Contract("max_len must be at least 1".into()));
    }
    let mut ids: Vec<u32> = split_tokens(text)
        .map(|t| vocab.id_of(&t).unwrap_or(UNK_ID))
        .collect();
    if ids.is_empty() {
        return Err(SmarError::Empty(format!(
            "query text {text:?} is empty after tokenization"
        )));
    }
    ids.truncate(max_len);
    let real = ids.len();
    let mut mask = vec![true; real];
    ids.resize(max_len, PAD_ID);
    mask.resize(max_len, false);
    TokenizedInput::new(ids, mask)
}

/// Tokenizes without padding, capped at `max_seq_len - 1` content positions
/// (the towers prepend CLS). The padded form is equivalent under attention
/// masking; the unpadded form avoids spending encoder work on PAD rows.
pub fn tokenize_tight(text: &str, vocab: &Vocab, max_seq_len: usize) -> Result<TokenizedInput> {
    let cap = max_seq_len.saturating_sub(1).max(1);
    let n_tokens = split_tokens(text).count();
    tokenize(text, vocab, cap.min(n_tokens.max(1)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn min_freq_filters_and_orders_deterministically() {
        let texts = ["a a b", "a c c"];
        let v = build_vocab(texts.iter().copied(), 2).unwrap();
        assert!(v.id_of("a").is_some());
        assert!(v.id_of("c").is_some());
        assert!(v.id_of("b").is_none());

        let v1 = build_vocab(texts.iter().copied(), 1).unwrap();
        let v2 = build_vocab(texts.iter().copied(), 1).unwrap();
        assert_eq!(v1, v2);
        assert!(v1.id_of("b").is_some());
        // a (freq 3) before c (freq 2) before b (freq 1).
        assert!(v1.id_of("a") < v1.id_of("c"));
        assert!(v1.id_of("c") < v1.id_of("b"));
    }

    #[test]
    fn tokenize_maps_known_and_unknown() {
        let v = build_vocab(["red dress"].iter().copied(), 1).unwrap();
        let t = tokenize("Red Dress", &v, 2).unwrap();
        assert_eq!(t.ids.len(), 2);
        assert_eq!(t.mask, vec![true, true]);
        assert_ne!(t.ids[0], UNK_ID);

        let u = tokenize("red mystery", &v, 2).unwrap();
        assert_eq!(u.ids[1], UNK_ID);
    }

    #[test]
    fn tokenize_truncates_tail_and_pads() {
        let v = build_vocab(["t"].iter().copied(), 1).unwrap();
        let long: Vec<String> = (0..100).map(|i| format!("w{i}")).collect();
        let text = long.join(" ");
        let t = tokenize(&text, &v, 16).unwrap();
        assert_eq!(t.ids.len(), 16);
        assert!(t.mask.iter().all(|&m| m), "first 16 tokens kept, no padding");

        let short = tokenize("t", &v, 4).unwrap();
        assert_eq!(short.mask, vec![true, false, false, false]);
        assert_eq!(short.ids[1], PAD_ID);
    }

    #[test]
    fn empty_text_is_an_error() {
        let v = build_vocab(["x"].iter().copied(), 1).unwrap();
        assert!(matches!(tokenize("   ", &v, 4), Err(SmarError::Empty(_))));
    }

    #[test]
    fn hash_is_stable_and_content_sensitive() {
        let v1 = build_vocab(["a b c"].iter().copied(), 1).unwrap();
        let v2 = build_vocab(["a b c"].iter().copied(), 1).unwrap();
        let v3 = build_vocab(["a b d"].iter().copied(), 1).unwrap();
        assert_eq!(v1.hash(), v2.hash());
        assert_ne!(v1.hash(), v3.hash());
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let v = build_vocab(["alpha beta gamma"].iter().copied(), 1).unwrap();
        let path = dir.path().join("vocab.json");
        v.save(&path).unwrap();
        let loaded = Vocab::load(&path).unwrap();
        assert_eq!(loaded.hash(), v.hash());
        assert_eq!(loaded.id_of("beta"), v.id_of("beta"));
    }
}
