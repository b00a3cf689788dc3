//! The four-tower encoder stack and its parameter set.

pub mod config;
pub mod params;
pub mod tower;

pub use config::{FusionMode, ModelConfig, TowerConfig};
pub use params::{param_schema, ModelParams};
pub use tower::{
    cls_pool, cross_encoder_forward, embed_image, embed_tokens, encode_item_image,
    encode_item_multimodal, encode_item_text, encode_query, encoder_forward, ImageFeatureSeq,
    Model, ParamBinding, TokenizedInput, TowerOutput, LN_EPS,
};
