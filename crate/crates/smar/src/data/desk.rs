//! Desk-scale multimodal corpus generator.
//!
//! Items are titled `brand adjective(s) noun` over fixed word pools. A
//! configurable share of fashion items carries a latent color that appears
//! ONLY in the image features (a one-hot block plus noise, never in the
//! title), alongside a noun block that makes image-only retrieval possible
//! but weaker than text. Color-dependent queries pair a color word with a
//! fashion noun; their ground truth is decided by the latent image color, so
//! a text-only model cannot resolve them. Eval relevance is exact attribute
//! match over each query's constraint set.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::records::{ClickPair, Corpus, CorpusMeta, ItemRecord, QrelRecord, QueryRecord, Split};
use crate::error::{Result, SmarError};

pub const FASHION_NOUNS: [&str; 8] = [
    "dress", "shirt", "skirt", "jacket", "handbag", "sneaker", "scarf", "coat",
];
pub const OTHER_NOUNS: [&str; 8] = [
    "book", "laptop", "blender", "shampoo", "drill", "monitor", "kettle", "notebook",
];
pub const BRANDS: [&str; 8] = [
    "acme", "zenith", "orbit", "nova", "primo", "vertex", "lumen", "atlas",
];
pub const COLORS: [&str; 6] = ["red", "blue", "green", "black", "white", "yellow"];
pub const ADJECTIVES: [&str; 8] = [
    "cotton", "leather", "wireless", "portable", "classic", "premium", "compact", "deluxe",
];

const N_NOUNS: usize = FASHION_NOUNS.len() + OTHER_NOUNS.len();

/// Width of the structured feature prefix: noun one-hot block then color
/// one-hot block. Anything beyond is noise-only.
pub const MIN_D_IMG: usize = N_NOUNS + COLORS.len();

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub n_items: usize,
    pub n_train_queries: usize,
    pub n_eval_queries: usize,
    /// Share of (train and eval) queries that carry a color word.
    pub color_query_fraction: f64,
    /// Share of fashion items whose image encodes a latent color.
    pub color_item_fraction: f64,
    pub d_img: usize,
    pub n_regions: usize,
    /// Magnitude of the noun one-hot block.
    pub signal: f64,
    /// Magnitude of the color one-hot block; lower values make the latent
    /// color a subtler image cue.
    pub color_signal: f64,
    /// Std of the additive feature noise.
    pub noise_std: f64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            n_items: 2000,
            n_train_queries: 1000,
            n_eval_queries: 500,
            color_query_fraction: 0.5,
            color_item_fraction: 1.0,
            d_img: 32,
            n_regions: 4,
            signal: 1.0,
            color_signal: 1.0,
            noise_std: 0.1,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.n_items == 0 {
            errs.push("n_items must be positive".to_string());
        }
        if self.d_img < MIN_D_IMG {
            errs.push(format!(
                "d_img {} too small for the noun+color blocks (need at least {MIN_D_IMG})",
                self.d_img
            ));
        }
        if self.n_regions == 0 {
            errs.push("n_regions must be positive".to_string());
        }
        for (name, v) in [
            ("color_query_fraction", self.color_query_fraction),
            ("color_item_fraction", self.color_item_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                errs.push(format!("{name} {v} outside [0, 1]"));
            }
        }
        if self.color_query_fraction > 0.0 && self.color_item_fraction <= 0.0 {
            errs.push(
                "color-dependent queries requested but color_item_fraction is zero".to_string(),
            );
        }
        if self.signal <= 0.0 || self.color_signal <= 0.0 {
            errs.push("signal magnitudes must be positive".to_string());
        }
        if self.noise_std < 0.0 {
            errs.push("noise_std must be non-negative".to_string());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(SmarError::CorpusSpec(errs.join("; ")))
        }
    }
}

struct GenItem {
    record: ItemRecord,
    noun: usize,
    brand: usize,
    adjectives: Vec<usize>,
    color: Option<usize>,
}

/// A query's constraint set; relevance is exact match on every present field.
struct QuerySpec {
    noun: usize,
    brand: Option<usize>,
    adjective: Option<usize>,
    color: Option<usize>,
}

impl QuerySpec {
    fn matches(&self, item: &GenItem) -> bool {
        item.noun == self.noun
            && self.brand.map_or(true, |b| item.brand == b)
            && self.adjective.map_or(true, |a| item.adjectives.contains(&a))
            && self.color.map_or(true, |c| item.color == Some(c))
    }

    fn text(&self) -> String {
        let noun = noun_word(self.noun);
        let mut parts = Vec::new();
        if let Some(c) = self.color {
            parts.push(COLORS[c]);
        }
        if let Some(a) = self.adjective {
            parts.push(ADJECTIVES[a]);
        }
        if let Some(b) = self.brand {
            parts.push(BRANDS[b]);
        }
        parts.push(noun);
        parts.join(" ")
    }
}

fn noun_word(idx: usize) -> &'static str {
    if idx < FASHION_NOUNS.len() {
        FASHION_NOUNS[idx]
    } else {
        OTHER_NOUNS[idx - FASHION_NOUNS.len()]
    }
}

fn gen_items(spec: &CorpusSpec, rng: &mut ChaCha8Rng) -> Result<Vec<GenItem>> {
    let noise = Normal::new(0.0, spec.noise_std.max(f64::MIN_POSITIVE)).expect("valid normal");
    let mut items = Vec::with_capacity(spec.n_items);
    for idx in 0..spec.n_items {
        let noun = rng.gen_range(0..N_NOUNS);
        let fashion = noun < FASHION_NOUNS.len();
        let brand = rng.gen_range(0..BRANDS.len());
        let n_adj = 1 + usize::from(rng.gen_bool(0.5));
        let mut adjectives = Vec::with_capacity(n_adj);
        while adjectives.len() < n_adj {
            let a = rng.gen_range(0..ADJECTIVES.len());
            if !adjectives.contains(&a) {
                adjectives.push(a);
            }
        }
        let color = if fashion && rng.gen_bool(spec.color_item_fraction.clamp(0.0, 1.0)) {
            Some(rng.gen_range(0..COLORS.len()))
        } else {
            None
        };

        let mut features = Vec::with_capacity(spec.n_regions);
        for _ in 0..spec.n_regions {
            let mut row: Vec<f64> = (0..spec.d_img)
                .map(|_| {
                    if spec.noise_std > 0.0 {
                        noise.sample(rng)
                    } else {
                        0.0
                    }
                })
                .collect();
            row[noun] += spec.signal;
            if let Some(c) = color {
                row[N_NOUNS + c] += spec.color_signal;
            }
            features.push(row);
        }

        let adj_words: Vec<&str> = adjectives.iter().map(|&a| ADJECTIVES[a]).collect();
        let title = format!("{} {} {}", BRANDS[brand], adj_words.join(" "), noun_word(noun));
        items.push(GenItem {
            record: ItemRecord {
                item_id: format!("item-{idx:05}"),
                title,
                category: noun_word(noun).to_string(),
                brand: BRANDS[brand].to_string(),
                fashion,
                image_features: features,
            },
            noun,
            brand,
            adjectives,
            color,
        });
    }
    Ok(items)
}

fn gen_query_spec(
    items: &[GenItem],
    colored_idx: &[usize],
    want_color: bool,
    rng: &mut ChaCha8Rng,
) -> QuerySpec {
    if want_color {
        let item = &items[colored_idx[rng.gen_range(0..colored_idx.len())]];
        QuerySpec {
            noun: item.noun,
            brand: rng.gen_bool(0.3).then_some(item.brand),
            adjective: None,
            color: item.color,
        }
    } else {
        let item = &items[rng.gen_range(0..items.len())];
        let roll: f64 = rng.gen();
        let (brand, adjective) = if roll < 0.4 {
            (Some(item.brand), None)
        } else if roll < 0.8 {
            (None, Some(item.adjectives[rng.gen_range(0..item.adjectives.len())]))
        } else {
            (None, None)
        };
        QuerySpec {
            noun: item.noun,
            brand,
            adjective,
            color: None,
        }
    }
}

/// Generates a full corpus: items, train queries with one click each, eval
/// queries with exact-match qrels.
pub fn gen_desk_corpus(spec: &CorpusSpec, seed: u64) -> Result<Corpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let items = gen_items(spec, &mut rng)?;

    let colored_idx: Vec<usize> = items
        .iter()
        .enumerate()
        .filter_map(|(i, it)| it.color.map(|_| i))
        .collect();
    if spec.color_query_fraction > 0.0 && colored_idx.is_empty() {
        return Err(SmarError::CorpusSpec(
            "color-dependent queries requested but the item draw produced no colored items; \
             increase n_items or color_item_fraction"
                .into(),
        ));
    }

    let mut queries = Vec::new();
    let mut pairs = Vec::new();
    let mut qrels = Vec::new();
    let mut n_color_train = 0usize;
    let mut n_color_eval = 0usize;

    for i in 0..spec.n_train_queries {
        let want_color = rng.gen_bool(spec.color_query_fraction);
        let qs = gen_query_spec(&items, &colored_idx, want_color, &mut rng);
        let relevant: Vec<usize> = (0..items.len()).filter(|&j| qs.matches(&items[j])).collect();
        debug_assert!(!relevant.is_empty());
        let query_id = format!("trainq-{i:05}");
        n_color_train += usize::from(want_color);
        queries.push(QueryRecord {
            query_id: query_id.clone(),
            text: qs.text(),
            synthetic: false,
        });
        let click = relevant[rng.gen_range(0..relevant.len())];
        pairs.push(ClickPair {
            query_id,
            item_id: items[click].record.item_id.clone(),
            split: Split::Train,
        });
    }

    for i in 0..spec.n_eval_queries {
        let want_color = rng.gen_bool(spec.color_query_fraction);
        let qs = gen_query_spec(&items, &colored_idx, want_color, &mut rng);
        let relevant: Vec<&GenItem> = items.iter().filter(|it| qs.matches(it)).collect();
        if relevant.is_empty() {
            return Err(SmarError::CorpusSpec(format!(
                "generated eval query {:?} has no relevant items",
                qs.text()
            )));
        }
        if qs.color.is_some() {
            // The modality gap: no relevant title may leak the color token.
            let color_word = COLORS[qs.color.unwrap()];
            for it in &relevant {
                if it.record.title.split_whitespace().any(|t| t == color_word) {
                    return Err(SmarError::CorpusSpec(format!(
                        "item {} leaks color {color_word} into its title",
                        it.record.item_id
                    )));
                }
            }
        }
        let query_id = format!("evalq-{i:05}");
        n_color_eval += usize::from(want_color);
        queries.push(QueryRecord {
            query_id: query_id.clone(),
            text: qs.text(),
            synthetic: false,
        });
        qrels.push(QrelRecord {
            query_id,
            relevant_item_ids: relevant.iter().map(|it| it.record.item_id.clone()).collect(),
        });
    }

    let n_colored_items = colored_idx.len();
    let corpus = Corpus {
        items: items.into_iter().map(|it| it.record).collect(),
        queries,
        pairs,
        qrels,
        meta: Some(CorpusMeta {
            spec: *spec,
            seed,
            colors: COLORS.iter().map(|s| s.to_string()).collect(),
            fashion_nouns: FASHION_NOUNS.iter().map(|s| s.to_string()).collect(),
            n_colored_items,
            n_color_queries_train: n_color_train,
            n_color_queries_eval: n_color_eval,
            n_synthetic_queries: 0,
            single_token_titles_skipped: 0,
        }),
    };
    corpus.validate()?;
    Ok(corpus)
}

/// True when the query text contains a color word; color-dependent queries
/// are exactly these by construction.
pub fn is_color_query(text: &str, colors: &[String]) -> bool {
    text.split_whitespace()
        .any(|t| colors.iter().any(|c| c == t))
}
