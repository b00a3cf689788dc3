//! Tower and model hyperparameters.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SmarError};

/// Architecture of one transformer tower.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TowerConfig {
    pub heads: usize,
    pub layers: usize,
    pub model_dim: usize,
    pub ff_dim: usize,
    pub max_seq_len: usize,
    /// Token table size; present on the text towers only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab_size: Option<usize>,
    /// Raw image feature width; present on the image tower only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_feat_dim: Option<usize>,
}

impl TowerConfig {
    pub fn validate(&self, name: &str) -> Vec<String> {
        let mut errs = Vec::new();
        if self.heads == 0 || self.layers == 0 || self.model_dim == 0 || self.ff_dim == 0 {
            errs.push(format!(
                "{name}: heads/layers/model_dim/ff_dim must be positive"
            ));
        }
        if self.heads > 0 && self.model_dim % self.heads != 0 {
            errs.push(format!(
                "{name}: model_dim {} not divisible by heads {}",
                self.model_dim, self.heads
            ));
        }
        if self.max_seq_len < 2 {
            errs.push(format!(
                "{name}: max_seq_len {} < 2 (CLS plus at least one content token)",
                self.max_seq_len
            ));
        }
        if self.vocab_size == Some(0) {
            errs.push(format!("{name}: vocab_size must be positive"));
        }
        if self.image_feat_dim == Some(0) {
            errs.push(format!("{name}: image_feat_dim must be positive"));
        }
        errs
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }
}

/// How the multimodal tower fuses text and image sequences.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    /// Attention queries from the text sequence, keys/values from the image
    /// sequence.
    Cross,
    /// Self-attention over the concatenated [text; image] sequence, pooling
    /// the text-side CLS. Used by the `smar-nc` ablation.
    Concat,
}

/// Full model configuration: the four towers plus scoring knobs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub query: TowerConfig,
    pub item_text: TowerConfig,
    pub item_image: TowerConfig,
    pub item_mm: TowerConfig,
    /// Softmax temperature applied to in-batch similarity logits.
    pub temperature: f64,
    /// Routing threshold on the fashion-header probability.
    pub route_threshold: f64,
    pub fusion: FusionMode,
}

impl ModelConfig {
    /// Small dimensions suited to CPU experiments: k=64, 4 heads, query tower
    /// 4 layers, item towers 1 layer.
    pub fn desk(vocab_size: usize, image_feat_dim: usize) -> Self {
        let base = |layers: usize| TowerConfig {
            heads: 4,
            layers,
            model_dim: 64,
            ff_dim: 256,
            max_seq_len: 8,
            vocab_size: Some(vocab_size),
            image_feat_dim: None,
        };
        ModelConfig {
            query: base(4),
            item_text: base(1),
            item_image: TowerConfig {
                vocab_size: None,
                image_feat_dim: Some(image_feat_dim),
                ..base(1)
            },
            item_mm: TowerConfig {
                vocab_size: None,
                ..base(1)
            },
            temperature: 1.0,
            route_threshold: 0.5,
            fusion: FusionMode::Cross,
        }
    }

    /// Production-scale settings: 12 heads, query tower 4 layers, item towers
    /// 1 layer, k=768. Too large to train in the tests; selectable from the
    /// CLI as the `paper` preset.
    pub fn paper(vocab_size: usize, image_feat_dim: usize) -> Self {
        let base = |layers: usize| TowerConfig {
            heads: 12,
            layers,
            model_dim: 768,
            ff_dim: 3072,
            max_seq_len: 32,
            vocab_size: Some(vocab_size),
            image_feat_dim: None,
        };
        ModelConfig {
            query: base(4),
            item_text: base(1),
            item_image: TowerConfig {
                vocab_size: None,
                image_feat_dim: Some(image_feat_dim),
                ..base(1)
            },
            item_mm: TowerConfig {
                vocab_size: None,
                ..base(1)
            },
            temperature: 1.0,
            route_threshold: 0.5,
            fusion: FusionMode::Cross,
        }
    }

    /// Embedding dimension shared by all towers.
    pub fn dim(&self) -> usize {
        self.query.model_dim
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        errs.extend(self.query.validate("query"));
        errs.extend(self.item_text.validate("item_text"));
        errs.extend(self.item_image.validate("item_image"));
        errs.extend(self.item_mm.validate("item_mm"));
        let k = self.query.model_dim;
        for (name, tower) in [
            ("item_text", &self.item_text),
            ("item_image", &self.item_image),
            ("item_mm", &self.item_mm),
        ] {
            if tower.model_dim != k {
                errs.push(format!(
                    "{name}: model_dim {} differs from query model_dim {k}",
                    tower.model_dim
                ));
            }
        }
        if self.query.vocab_size.is_none() || self.item_text.vocab_size.is_none() {
            errs.push("query and item_text towers need vocab_size".into());
        }
        if self.item_image.image_feat_dim.is_none() {
            errs.push("item_image tower needs image_feat_dim".into());
        }
        if !(self.temperature > 0.0) {
            errs.push(format!("temperature {} must be positive", self.temperature));
        }
        if !(0.0..=1.0).contains(&self.route_threshold) {
            errs.push(format!(
                "route_threshold {} outside [0, 1]",
                self.route_threshold
            ));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(SmarError::Config(errs.join("; ")))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_config_is_valid() {
        ModelConfig::desk(100, 32).validate().unwrap();
        ModelConfig::paper(1000, 2048).validate().unwrap();
    }

    #[test]
    fn validation_collects_every_violation() {
        let mut cfg = ModelConfig::desk(100, 32);
        cfg.query.heads = 3; // 64 % 3 != 0
        cfg.temperature = 0.0;
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("divisible"), "{err}");
        assert!(err.contains("temperature"), "{err}");
    }
}
