//! Run configuration: JSON config files layered under command-line flags
//! (flags win). Validation collects every violation rather than stopping at
//! the first.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoders::ModelConfig;
use crate::error::{Result, SmarError};
use crate::objectives::LossWeights;
use crate::training::TrainConfig;
use crate::variant::Variant;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// Small dimensions for CPU-scale experiments (the default).
    Desk,
    /// Production-scale settings: 12 heads, lr 5e-5, batch 128.
    Paper,
}

impl Preset {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Preset::Desk),
            "paper" => Ok(Preset::Paper),
            other => Err(SmarError::Config(format!(
                "unknown preset {other:?} (expected desk|paper)"
            ))),
        }
    }
}

/// Optional JSON config file contents. Every field can also be set by a flag;
/// flags override the file.
#[derive(Clone, Debug, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct FileConfig {
    pub preset: Option<String>,
    pub dim: Option<usize>,
    pub heads: Option<usize>,
    pub query_layers: Option<usize>,
    pub item_layers: Option<usize>,
    pub ff_dim: Option<usize>,
    pub max_seq_len: Option<usize>,
    pub temperature: Option<f64>,
    pub route_threshold: Option<f64>,
    pub lr: Option<f64>,
    pub batch_size: Option<usize>,
    pub epochs: Option<usize>,
    pub finetune_lr: Option<f64>,
    pub finetune_epochs: Option<usize>,
    pub finetune_batch_size: Option<usize>,
    pub seed: Option<u64>,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub gamma: Option<f64>,
    pub weight_decay: Option<f64>,
    pub clip_norm: Option<f64>,
    pub header_lr: Option<f64>,
    pub variant: Option<String>,
    pub ks: Option<Vec<usize>>,
    pub threads: Option<usize>,
    pub min_freq: Option<usize>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| SmarError::io(path.display().to_string(), e))?;
        serde_json::from_str(&text)
            .map_err(|e| SmarError::Config(format!("{}: {e}", path.display())))
    }
}

/// Flag-level overrides collected by the CLI; `None` defers to the config
/// file, then to the preset defaults.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub preset: Option<String>,
    pub lr: Option<f64>,
    pub batch_size: Option<usize>,
    pub epochs: Option<usize>,
    pub finetune_epochs: Option<usize>,
    pub seed: Option<u64>,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub gamma: Option<f64>,
    pub variant: Option<String>,
    pub ks: Option<Vec<usize>>,
    pub threads: Option<usize>,
}

/// Fully resolved run settings.
#[derive(Clone, Debug)]
pub struct Resolved {
    pub model: ModelConfig,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub ks: Vec<usize>,
    pub threads: usize,
    pub variant: Variant,
    pub min_freq: usize,
}

pub fn resolve(
    file: &FileConfig,
    flags: &Overrides,
    vocab_size: usize,
    image_feat_dim: usize,
) -> Result<Resolved> {
    let mut errs: Vec<String> = Vec::new();

    let preset = match flags
        .preset
        .as_deref()
        .or(file.preset.as_deref())
        .map(Preset::parse)
        .transpose()
    {
        Ok(p) => p.unwrap_or(Preset::Desk),
        Err(e) => {
            errs.push(e.to_string());
            Preset::Desk
        }
    };

    let mut model = match preset {
        Preset::Desk => ModelConfig::desk(vocab_size, image_feat_dim),
        Preset::Paper => ModelConfig::paper(vocab_size, image_feat_dim),
    };
    let towers = |m: &mut ModelConfig, f: &dyn Fn(&mut crate::encoders::TowerConfig)| {
        f(&mut m.query);
        f(&mut m.item_text);
        f(&mut m.item_image);
        f(&mut m.item_mm);
    };
    if let Some(dim) = file.dim {
        towers(&mut model, &|t| t.model_dim = dim);
        if file.ff_dim.is_none() {
            towers(&mut model, &|t| t.ff_dim = 4 * dim);
        }
    }
    if let Some(heads) = file.heads {
        towers(&mut model, &|t| t.heads = heads);
    }
    if let Some(ff) = file.ff_dim {
        towers(&mut model, &|t| t.ff_dim = ff);
    }
    if let Some(seq) = file.max_seq_len {
        towers(&mut model, &|t| t.max_seq_len = seq);
    }
    if let Some(l) = file.query_layers {
        model.query.layers = l;
    }
    if let Some(l) = file.item_layers {
        model.item_text.layers = l;
        model.item_image.layers = l;
        model.item_mm.layers = l;
    }
    if let Some(t) = file.temperature {
        model.temperature = t;
    }
    if let Some(t) = file.route_threshold {
        model.route_threshold = t;
    }

    let variant = match flags
        .variant
        .as_deref()
        .or(file.variant.as_deref())
        .map(Variant::parse)
        .transpose()
    {
        Ok(v) => v.unwrap_or(Variant::Smar),
        Err(e) => {
            errs.push(e.to_string());
            Variant::Smar
        }
    };
    model.fusion = variant.fusion();

    let defaults = match preset {
        Preset::Desk => TrainConfig::default(),
        Preset::Paper => TrainConfig {
            lr: 5e-5,
            batch_size: 128,
            ..TrainConfig::default()
        },
    };
    let base_weights = variant.weights();
    let weights = LossWeights {
        alpha: flags.alpha.or(file.alpha).unwrap_or(base_weights.alpha),
        beta: flags.beta.or(file.beta).unwrap_or(base_weights.beta),
        gamma: flags.gamma.or(file.gamma).unwrap_or(base_weights.gamma),
    };
    let seed = flags.seed.or(file.seed).unwrap_or(defaults.seed);
    let pretrain = TrainConfig {
        lr: flags.lr.or(file.lr).unwrap_or(defaults.lr),
        batch_size: flags
            .batch_size
            .or(file.batch_size)
            .unwrap_or(defaults.batch_size),
        epochs: flags.epochs.or(file.epochs).unwrap_or(defaults.epochs),
        seed,
        weights,
        weight_decay: file.weight_decay.unwrap_or(defaults.weight_decay),
        clip_norm: file.clip_norm.unwrap_or(defaults.clip_norm),
        header_lr: file.header_lr,
        ..defaults
    };
    let finetune = TrainConfig {
        lr: file.finetune_lr.unwrap_or(pretrain.lr),
        batch_size: file.finetune_batch_size.unwrap_or(pretrain.batch_size),
        epochs: flags
            .finetune_epochs
            .or(file.finetune_epochs)
            .unwrap_or_else(|| pretrain.epochs.div_ceil(2)),
        ..pretrain
    };

    let ks = flags
        .ks
        .clone()
        .or_else(|| file.ks.clone())
        .unwrap_or_else(|| vec![1, 10, 50]);
    if ks.is_empty() || ks.iter().any(|&k| k == 0) {
        errs.push(format!("k list {ks:?} must be non-empty and positive"));
    }
    let threads = flags.threads.or(file.threads).unwrap_or(1);
    if threads == 0 {
        errs.push("threads must be at least 1".into());
    }
    let min_freq = file.min_freq.unwrap_or(1);

    if let Err(e) = model.validate() {
        errs.push(e.to_string());
    }
    if let Err(e) = pretrain.validate() {
        errs.push(e.to_string());
    }
    if let Err(e) = finetune.validate() {
        errs.push(e.to_string());
    }
    if !errs.is_empty() {
        return Err(SmarError::Config(errs.join("; ")));
    }
    Ok(Resolved {
        model,
        pretrain,
        finetune,
        ks,
        threads,
        variant,
        min_freq,
    })
}
