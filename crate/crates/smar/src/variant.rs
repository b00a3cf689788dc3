//! The ablation variant family.
//!
//! Baselines: `dpsr` (text-only two-tower) and `dpsr-i` (image-only item
//! side). The `smar-n*` variants drop one pre-training task each (`-ni` the
//! image alignment, `-nt` the text projection, `-nm` the fused alignment);
//! `smar-nc` replaces cross-attention fusion with self-attention over the
//! concatenated sequences; `smar` is the full model.

use crate::encoders::FusionMode;
use crate::error::{Result, SmarError};
use crate::objectives::LossWeights;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Dpsr,
    DpsrI,
    SmarNi,
    SmarNt,
    SmarNm,
    SmarNc,
    Smar,
}

/// Which item representation serves a query at evaluation time.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ServingMode {
    Text,
    Image,
    /// Route per query through the fashion header: text or multimodal.
    Adaptive,
}

/// What the fine-tuning stage optimizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FinetuneObjective {
    TextOnly,
    ImageOnly,
    Adaptive,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::DpsrI,
        Variant::Dpsr,
        Variant::SmarNi,
        Variant::SmarNt,
        Variant::SmarNm,
        Variant::SmarNc,
        Variant::Smar,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Dpsr => "dpsr",
            Variant::DpsrI => "dpsr-i",
            Variant::SmarNi => "smar-ni",
            Variant::SmarNt => "smar-nt",
            Variant::SmarNm => "smar-nm",
            Variant::SmarNc => "smar-nc",
            Variant::Smar => "smar",
        }
    }

    pub fn parse(s: &str) -> Result<Variant> {
        Variant::ALL
            .iter()
            .copied()
            .find(|v| v.name() == s)
            .ok_or_else(|| SmarError::UnknownVariant(s.to_string()))
    }

    pub fn weights(&self) -> LossWeights {
        let (alpha, beta, gamma) = match self {
            Variant::Dpsr => (1.0, 0.0, 0.0),
            Variant::DpsrI => (0.0, 1.0, 0.0),
            Variant::SmarNi => (1.0, 0.0, 1.0),
            Variant::SmarNt => (0.0, 1.0, 1.0),
            Variant::SmarNm => (1.0, 1.0, 0.0),
            Variant::SmarNc | Variant::Smar => (1.0, 1.0, 1.0),
        };
        LossWeights { alpha, beta, gamma }
    }

    pub fn fusion(&self) -> FusionMode {
        match self {
            Variant::SmarNc => FusionMode::Concat,
            _ => FusionMode::Cross,
        }
    }

    pub fn serving(&self) -> ServingMode {
        match self {
            Variant::Dpsr => ServingMode::Text,
            Variant::DpsrI => ServingMode::Image,
            _ => ServingMode::Adaptive,
        }
    }

    pub fn finetune_objective(&self) -> FinetuneObjective {
        match self {
            Variant::Dpsr => FinetuneObjective::TextOnly,
            Variant::DpsrI => FinetuneObjective::ImageOnly,
            _ => FinetuneObjective::Adaptive,
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}
