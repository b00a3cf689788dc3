//! Named parameter set for all four towers plus the prediction header.
//!
//! The name schema is the single source of truth: initialization, checkpoint
//! manifests, and optimizer state all iterate the same ordered list, which is
//! what makes runs reproducible and checkpoints closed (no orphan names).

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::encoders::config::ModelConfig;
use crate::error::{Result, SmarError};
use crate::numerics::Tensor;

pub const TOWER_QUERY: &str = "query";
pub const TOWER_ITEM_TEXT: &str = "item_text";
pub const TOWER_ITEM_IMAGE: &str = "item_image";
pub const TOWER_ITEM_MM: &str = "item_mm";
pub const HEADER_PREFIX: &str = "header";

const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    map: BTreeMap<String, Tensor>,
}

/// Ordered (name, shape) schema implied by a model configuration.
pub fn param_schema(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let k = cfg.dim();
    let mut schema = Vec::new();

    let self_attn_block = |schema: &mut Vec<(String, Vec<usize>)>, p: &str, ff: usize| {
        for suffix_shape in [
            ("ln1.gain", vec![k]),
            ("ln1.bias", vec![k]),
            ("attn.wq", vec![k, k]),
            ("attn.bq", vec![k]),
            ("attn.wk", vec![k, k]),
            ("attn.bk", vec![k]),
            ("attn.wv", vec![k, k]),
            ("attn.bv", vec![k]),
            ("attn.wo", vec![k, k]),
            ("attn.bo", vec![k]),
            ("ln2.gain", vec![k]),
            ("ln2.bias", vec![k]),
            ("ff.w1", vec![k, ff]),
            ("ff.b1", vec![ff]),
            ("ff.w2", vec![ff, k]),
            ("ff.b2", vec![k]),
        ] {
            schema.push((format!("{p}.{}", suffix_shape.0), suffix_shape.1));
        }
    };

    for (prefix, tower) in [(TOWER_QUERY, &cfg.query), (TOWER_ITEM_TEXT, &cfg.item_text)] {
        let vocab = tower.vocab_size.expect("text tower has vocab");
        schema.push((format!("{prefix}.cls"), vec![k]));
        schema.push((format!("{prefix}.pos_emb"), vec![tower.max_seq_len, k]));
        schema.push((format!("{prefix}.tok_emb"), vec![vocab, k]));
        for l in 0..tower.layers {
            self_attn_block(&mut schema, &format!("{prefix}.l{l}"), tower.ff_dim);
        }
    }

    let img = &cfg.item_image;
    let d_img = img.image_feat_dim.expect("image tower has feat dim");
    schema.push((format!("{TOWER_ITEM_IMAGE}.cls"), vec![k]));
    schema.push((format!("{TOWER_ITEM_IMAGE}.pos_emb"), vec![img.max_seq_len, k]));
    schema.push((format!("{TOWER_ITEM_IMAGE}.proj_w"), vec![d_img, k]));
    schema.push((format!("{TOWER_ITEM_IMAGE}.proj_b"), vec![k]));
    for l in 0..img.layers {
        self_attn_block(&mut schema, &format!("{TOWER_ITEM_IMAGE}.l{l}"), img.ff_dim);
    }

    // The multimodal tower reads the unimodal sequences, so it owns no
    // embedding tables; the extra ln_kv normalizes the key/value stream.
    for l in 0..cfg.item_mm.layers {
        let p = format!("{TOWER_ITEM_MM}.l{l}");
        for suffix_shape in [
            ("ln_q.gain", vec![k]),
            ("ln_q.bias", vec![k]),
            ("ln_kv.gain", vec![k]),
            ("ln_kv.bias", vec![k]),
            ("attn.wq", vec![k, k]),
            ("attn.bq", vec![k]),
            ("attn.wk", vec![k, k]),
            ("attn.bk", vec![k]),
            ("attn.wv", vec![k, k]),
            ("attn.bv", vec![k]),
            ("attn.wo", vec![k, k]),
            ("attn.bo", vec![k]),
            ("ln2.gain", vec![k]),
            ("ln2.bias", vec![k]),
            ("ff.w1", vec![k, cfg.item_mm.ff_dim]),
            ("ff.b1", vec![cfg.item_mm.ff_dim]),
            ("ff.w2", vec![cfg.item_mm.ff_dim, k]),
            ("ff.b2", vec![k]),
        ] {
            schema.push((format!("{p}.{}", suffix_shape.0), suffix_shape.1));
        }
    }

    schema.push((format!("{HEADER_PREFIX}.w"), vec![k]));
    schema.push((format!("{HEADER_PREFIX}.b"), vec![1]));
    schema
}

fn is_zero_init(name: &str) -> bool {
    let last = name.rsplit('.').next().unwrap_or(name);
    matches!(last, "bias" | "bq" | "bk" | "bv" | "bo" | "b" | "b1" | "b2" | "proj_b")
}

fn is_one_init(name: &str) -> bool {
    name.ends_with(".gain")
}

impl ModelParams {
    /// Draws all parameters in schema order: layer-norm gains one, biases
    /// zero, everything else truncated normal (std 0.02, cut at two sigma).
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).expect("valid normal");
        let mut trunc = || loop {
            let z: f64 = normal.sample(&mut rng);
            if z.abs() <= 2.0 {
                return z * INIT_STD;
            }
        };
        let mut map = BTreeMap::new();
        for (name, shape) in param_schema(cfg) {
            let numel: usize = shape.iter().product();
            let data = if is_zero_init(&name) {
                vec![0.0; numel]
            } else if is_one_init(&name) {
                vec![1.0; numel]
            } else {
                (0..numel).map(|_| trunc()).collect()
            };
            map.insert(name, Tensor::new(shape, data)?.with_grad());
        }
        Ok(ModelParams { map })
    }

    /// Wraps an externally produced parameter map, enforcing that it is
    /// exactly the closed set implied by `cfg` (names and shapes).
    pub fn from_map(cfg: &ModelConfig, map: BTreeMap<String, Tensor>) -> Result<Self> {
        let schema = param_schema(cfg);
        let mut problems = Vec::new();
        for (name, shape) in &schema {
            match map.get(name) {
                None => problems.push(format!("missing parameter {name}")),
                Some(t) if t.shape() != shape.as_slice() => problems.push(format!(
                    "{name}: shape {:?} does not match expected {:?}",
                    t.shape(),
                    shape
                )),
                _ => {}
            }
        }
        let expected: std::collections::BTreeSet<&String> =
            schema.iter().map(|(n, _)| n).collect();
        for name in map.keys() {
            if !expected.contains(name) {
                problems.push(format!("orphan parameter {name}"));
            }
        }
        if !problems.is_empty() {
            return Err(SmarError::ConfigMismatch(problems.join("; ")));
        }
        let map = map.into_iter().map(|(n, t)| (n, t.with_grad())).collect();
        Ok(ModelParams { map })
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.map
            .get(name)
            .ok_or_else(|| SmarError::Contract(format!("unknown parameter {name}")))
    }

    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        match self.map.get_mut(name) {
            Some(slot) => {
                if slot.shape() != value.shape() {
                    return Err(SmarError::DimMismatch {
                        op: "param_set",
                        lhs: slot.shape().to_vec(),
                        rhs: value.shape().to_vec(),
                    });
                }
                *slot = value.with_grad();
                Ok(())
            }
            None => Err(SmarError::Contract(format!("unknown parameter {name}"))),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Total scalar count across all parameters.
    pub fn numel(&self) -> usize {
        self.map.values().map(|t| t.numel()).sum()
    }
}
