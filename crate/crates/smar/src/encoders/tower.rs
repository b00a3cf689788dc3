//! The four towers: query, item-text, item-image, item-multimodal.
//!
//! Text towers: token + positional embedding with a learned CLS row, a
//! pre-layer-norm transformer stack, CLS pooling, L2 normalization. The image
//! tower projects pre-extracted region features to model width and runs the
//! same stack. The multimodal tower fuses the unimodal sequences: attention
//! queries come from the text sequence, keys/values from the image sequence
//! (or plain self-attention over their concatenation in `Concat` mode).

use std::cell::RefCell;
use std::collections::BTreeMap;

use crate::encoders::config::{FusionMode, ModelConfig, TowerConfig};
use crate::encoders::params::{
    ModelParams, TOWER_ITEM_IMAGE, TOWER_ITEM_MM, TOWER_ITEM_TEXT, TOWER_QUERY,
};
use crate::error::{Result, SmarError};
use crate::numerics::{Tape, Tensor, Value};

pub const LN_EPS: f64 = 1e-5;

/// Token ids plus validity mask, CLS excluded (the towers prepend it).
#[derive(Clone, Debug, PartialEq)]
pub struct TokenizedInput {
    pub ids: Vec<u32>,
    pub mask: Vec<bool>,
}

impl TokenizedInput {
    pub fn new(ids: Vec<u32>, mask: Vec<bool>) -> Result<Self> {
        if ids.len() != mask.len() {
            return Err(SmarError::DimMismatch {
                op: "tokenized_input",
                lhs: vec![ids.len()],
                rhs: vec![mask.len()],
            });
        }
        if !mask.iter().any(|&m| m) {
            return Err(SmarError::Empty("input has no unmasked tokens".into()));
        }
        Ok(TokenizedInput { ids, mask })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Pre-extracted image features, one row per region.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageFeatureSeq {
    pub features: Tensor,
    pub mask: Vec<bool>,
}

impl ImageFeatureSeq {
    pub fn new(features: Tensor, mask: Vec<bool>) -> Result<Self> {
        if features.rank() != 2 {
            return Err(SmarError::BadShape {
                op: "image_features",
                shape: features.shape().to_vec(),
                detail: "expected [n_regions x d_img]".into(),
            });
        }
        if features.shape()[0] != mask.len() {
            return Err(SmarError::DimMismatch {
                op: "image_features",
                lhs: features.shape().to_vec(),
                rhs: vec![mask.len()],
            });
        }
        if !mask.iter().any(|&m| m) {
            return Err(SmarError::Empty("image input has no unmasked regions".into()));
        }
        Ok(ImageFeatureSeq { features, mask })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(SmarError::Empty("image input has zero regions".into()));
        }
        let d = rows[0].len();
        let mut data = Vec::with_capacity(rows.len() * d);
        for r in rows {
            if r.len() != d {
                return Err(SmarError::DimMismatch {
                    op: "image_features",
                    lhs: vec![d],
                    rhs: vec![r.len()],
                });
            }
            data.extend_from_slice(r);
        }
        let n = rows.len();
        ImageFeatureSeq::new(Tensor::matrix(n, d, data)?, vec![true; n])
    }

    pub fn n_regions(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn feat_dim(&self) -> usize {
        self.features.shape()[1]
    }
}

/// Lazily registers model parameters on a tape, as trainable leaves or as
/// frozen constants. Each parameter is bound at most once per tape.
pub struct ParamBinding<'t, 'p> {
    tape: &'t Tape,
    source: Option<(&'p ModelParams, bool)>,
    cache: RefCell<BTreeMap<String, Value<'t>>>,
}

impl<'t, 'p> ParamBinding<'t, 'p> {
    pub fn trainable(tape: &'t Tape, params: &'p ModelParams) -> Self {
        ParamBinding {
            tape,
            source: Some((params, true)),
            cache: RefCell::new(BTreeMap::new()),
        }
    }

    pub fn frozen(tape: &'t Tape, params: &'p ModelParams) -> Self {
        ParamBinding {
            tape,
            source: Some((params, false)),
            cache: RefCell::new(BTreeMap::new()),
        }
    }

    /// Binding whose values come from an externally built map (the gradient
    /// checker's leaves); names outside the map fall back to `rest`, frozen.
    pub fn with_overrides(
        tape: &'t Tape,
        overrides: &BTreeMap<String, Value<'t>>,
        rest: &'p ModelParams,
    ) -> Self {
        ParamBinding {
            tape,
            source: Some((rest, false)),
            cache: RefCell::new(overrides.clone()),
        }
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn get(&self, name: &str) -> Result<Value<'t>> {
        if let Some(v) = self.cache.borrow().get(name) {
            return Ok(*v);
        }
        let (params, trainable) = self.source.ok_or_else(|| {
            SmarError::Contract(format!("parameter {name} not bound on this tape"))
        })?;
        let tensor = params.get(name)?;
        let value = if trainable {
            self.tape.leaf(tensor)
        } else {
            self.tape.constant(tensor)
        };
        self.cache.borrow_mut().insert(name.to_string(), value);
        Ok(value)
    }

    /// Names bound so far with their tape handles; the gradient of any
    /// parameter never bound is exactly zero.
    pub fn bound(&self) -> Vec<(String, Value<'t>)> {
        self.cache
            .borrow()
            .iter()
            .map(|(n, v)| (n.clone(), *v))
            .collect()
    }
}

/// One tower's forward products.
pub struct TowerOutput<'t> {
    /// Full encoder output sequence, CLS at row 0.
    pub seq: Value<'t>,
    /// Pre-normalization pooled CLS vector (the header input on the query
    /// side).
    pub pooled: Value<'t>,
    /// L2-normalized embedding used for scoring.
    pub unit: Value<'t>,
    /// Sequence mask including the always-unmasked CLS.
    pub mask: Vec<bool>,
}

fn attention<'t>(
    binding: &ParamBinding<'t, '_>,
    block: &str,
    q_src: Value<'t>,
    kv_src: Value<'t>,
    key_mask: &[bool],
    heads: usize,
) -> Result<Value<'t>> {
    if !key_mask.iter().any(|&m| m) {
        return Err(SmarError::Contract(
            "attention row with every key masked".into(),
        ));
    }
    let q = q_src
        .matmul(binding.get(&format!("{block}.attn.wq"))?)?
        .add_row(binding.get(&format!("{block}.attn.bq"))?)?;
    let k = kv_src
        .matmul(binding.get(&format!("{block}.attn.wk"))?)?
        .add_row(binding.get(&format!("{block}.attn.bk"))?)?;
    let v = kv_src
        .matmul(binding.get(&format!("{block}.attn.wv"))?)?
        .add_row(binding.get(&format!("{block}.attn.bv"))?)?;

    let dim = q.shape()[1];
    if dim % heads != 0 {
        return Err(SmarError::Contract(format!(
            "model dim {dim} not divisible by {heads} heads"
        )));
    }
    let dh = dim / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let mut contexts = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = q.slice_cols(h * dh, dh)?;
        let kh = k.slice_cols(h * dh, dh)?;
        let vh = v.slice_cols(h * dh, dh)?;
        let probs = qh
            .matmul(kh.transpose()?)?
            .scale(scale)?
            .mask_cols(key_mask)?
            .row_softmax()?;
        contexts.push(probs.matmul(vh)?);
    }
    let ctx = binding.tape().concat_cols(&contexts)?;
    ctx.matmul(binding.get(&format!("{block}.attn.wo"))?)?
        .add_row(binding.get(&format!("{block}.attn.bo"))?)
}

fn feed_forward<'t>(
    binding: &ParamBinding<'t, '_>,
    block: &str,
    x: Value<'t>,
) -> Result<Value<'t>> {
    let f_in = x.layer_norm(
        binding.get(&format!("{block}.ln2.gain"))?,
        binding.get(&format!("{block}.ln2.bias"))?,
        LN_EPS,
    )?;
    let h = f_in
        .matmul(binding.get(&format!("{block}.ff.w1"))?)?
        .add_row(binding.get(&format!("{block}.ff.b1"))?)?
        .gelu()?
        .matmul(binding.get(&format!("{block}.ff.w2"))?)?
        .add_row(binding.get(&format!("{block}.ff.b2"))?)?;
    x.add(h)
}

/// Pre-LN self-attention block; `ln1_name` differs between the unimodal
/// towers ("ln1") and the concat-fusion multimodal block ("ln_q").
fn self_block<'t>(
    binding: &ParamBinding<'t, '_>,
    block: &str,
    ln1_name: &str,
    x: Value<'t>,
    mask: &[bool],
    heads: usize,
) -> Result<Value<'t>> {
    let a_in = x.layer_norm(
        binding.get(&format!("{block}.{ln1_name}.gain"))?,
        binding.get(&format!("{block}.{ln1_name}.bias"))?,
        LN_EPS,
    )?;
    let attn = attention(binding, block, a_in, a_in, mask, heads)?;
    let x = x.add(attn)?;
    feed_forward(binding, block, x)
}

fn cross_block<'t>(
    binding: &ParamBinding<'t, '_>,
    block: &str,
    x_text: Value<'t>,
    h_image: Value<'t>,
    image_mask: &[bool],
    heads: usize,
) -> Result<Value<'t>> {
    let q_in = x_text.layer_norm(
        binding.get(&format!("{block}.ln_q.gain"))?,
        binding.get(&format!("{block}.ln_q.bias"))?,
        LN_EPS,
    )?;
    let kv_in = h_image.layer_norm(
        binding.get(&format!("{block}.ln_kv.gain"))?,
        binding.get(&format!("{block}.ln_kv.bias"))?,
        LN_EPS,
    )?;
    let attn = attention(binding, block, q_in, kv_in, image_mask, heads)?;
    let x = x_text.add(attn)?;
    feed_forward(binding, block, x)
}

/// Embeds tokens for a text tower: row 0 is the learned CLS vector plus
/// positional embedding 0; rows 1..=L are token plus positional embeddings.
pub fn embed_tokens<'t>(
    binding: &ParamBinding<'t, '_>,
    prefix: &str,
    tower: &TowerConfig,
    input: &TokenizedInput,
) -> Result<(Value<'t>, Vec<bool>)> {
    if input.len() + 1 > tower.max_seq_len {
        return Err(SmarError::BadShape {
            op: "embed_tokens",
            shape: vec![input.len()],
            detail: format!("sequence exceeds max_seq_len {}", tower.max_seq_len),
        });
    }
    if !input.mask.iter().any(|&m| m) {
        return Err(SmarError::Empty("input has no unmasked tokens".into()));
    }
    let k = tower.model_dim;
    let ids: Vec<usize> = input.ids.iter().map(|&i| i as usize).collect();
    let tok = binding.get(&format!("{prefix}.tok_emb"))?.gather_rows(&ids)?;
    let cls = binding.get(&format!("{prefix}.cls"))?.reshape(vec![1, k])?;
    let seq = cls.concat_rows(tok)?;
    let pos = binding
        .get(&format!("{prefix}.pos_emb"))?
        .slice_rows(0, input.len() + 1)?;
    let x = seq.add(pos)?;
    let mut mask = vec![true];
    mask.extend_from_slice(&input.mask);
    Ok((x, mask))
}

/// Projects image region features to model width and embeds them the same
/// way: learned CLS row plus learned positional embeddings.
pub fn embed_image<'t>(
    binding: &ParamBinding<'t, '_>,
    feats: &ImageFeatureSeq,
) -> Result<(Value<'t>, Vec<bool>)> {
    let proj_w = binding.get(&format!("{TOWER_ITEM_IMAGE}.proj_w"))?;
    let d_img = proj_w.shape()[0];
    if feats.feat_dim() != d_img {
        return Err(SmarError::DimMismatch {
            op: "image_projection",
            lhs: feats.features.shape().to_vec(),
            rhs: proj_w.shape().to_vec(),
        });
    }
    let k = proj_w.shape()[1];
    let raw = binding.tape().constant(&feats.features);
    let proj = raw
        .matmul(proj_w)?
        .add_row(binding.get(&format!("{TOWER_ITEM_IMAGE}.proj_b"))?)?;
    let cls = binding
        .get(&format!("{TOWER_ITEM_IMAGE}.cls"))?
        .reshape(vec![1, k])?;
    let seq = cls.concat_rows(proj)?;
    let pos = binding
        .get(&format!("{TOWER_ITEM_IMAGE}.pos_emb"))?
        .slice_rows(0, feats.n_regions() + 1)?;
    let x = seq.add(pos)?;
    let mut mask = vec![true];
    mask.extend_from_slice(&feats.mask);
    Ok((x, mask))
}

/// Runs a self-attention encoder stack. Zero layers is the identity.
pub fn encoder_forward<'t>(
    binding: &ParamBinding<'t, '_>,
    prefix: &str,
    mut x: Value<'t>,
    mask: &[bool],
    heads: usize,
    layers: usize,
) -> Result<Value<'t>> {
    if x.shape().len() != 2 || x.shape()[0] != mask.len() {
        return Err(SmarError::DimMismatch {
            op: "encoder_forward",
            lhs: x.shape(),
            rhs: vec![mask.len()],
        });
    }
    for l in 0..layers {
        x = self_block(binding, &format!("{prefix}.l{l}"), "ln1", x, mask, heads)?;
    }
    Ok(x)
}

/// Runs the cross-attention fusion stack: queries from the text sequence,
/// keys/values from the image sequence. Output length equals the text length.
pub fn cross_encoder_forward<'t>(
    binding: &ParamBinding<'t, '_>,
    mut h_text: Value<'t>,
    h_image: Value<'t>,
    image_mask: &[bool],
    heads: usize,
    layers: usize,
) -> Result<Value<'t>> {
    if h_text.shape()[1] != h_image.shape()[1] {
        return Err(SmarError::DimMismatch {
            op: "cross_encoder_forward",
            lhs: h_text.shape(),
            rhs: h_image.shape(),
        });
    }
    for l in 0..layers {
        h_text = cross_block(
            binding,
            &format!("{TOWER_ITEM_MM}.l{l}"),
            h_text,
            h_image,
            image_mask,
            heads,
        )?;
    }
    Ok(h_text)
}

/// CLS pooling: row 0 of the encoder output.
pub fn cls_pool(h: Value<'_>) -> Result<Value<'_>> {
    h.row(0)
}

fn finish_tower<'t>(seq: Value<'t>, mask: Vec<bool>) -> Result<TowerOutput<'t>> {
    let pooled = cls_pool(seq)?;
    let unit = pooled.l2_normalize()?;
    Ok(TowerOutput {
        seq,
        pooled,
        unit,
        mask,
    })
}

pub fn encode_query<'t>(
    binding: &ParamBinding<'t, '_>,
    cfg: &ModelConfig,
    input: &TokenizedInput,
) -> Result<TowerOutput<'t>> {
    let (x, mask) = embed_tokens(binding, TOWER_QUERY, &cfg.query, input)?;
    let seq = encoder_forward(
        binding,
        TOWER_QUERY,
        x,
        &mask,
        cfg.query.heads,
        cfg.query.layers,
    )?;
    finish_tower(seq, mask)
}

pub fn encode_item_text<'t>(
    binding: &ParamBinding<'t, '_>,
    cfg: &ModelConfig,
    input: &TokenizedInput,
) -> Result<TowerOutput<'t>> {
    let (x, mask) = embed_tokens(binding, TOWER_ITEM_TEXT, &cfg.item_text, input)?;
    let seq = encoder_forward(
        binding,
        TOWER_ITEM_TEXT,
        x,
        &mask,
        cfg.item_text.heads,
        cfg.item_text.layers,
    )?;
    finish_tower(seq, mask)
}

pub fn encode_item_image<'t>(
    binding: &ParamBinding<'t, '_>,
    cfg: &ModelConfig,
    feats: &ImageFeatureSeq,
) -> Result<TowerOutput<'t>> {
    if feats.n_regions() + 1 > cfg.item_image.max_seq_len {
        return Err(SmarError::BadShape {
            op: "encode_item_image",
            shape: feats.features.shape().to_vec(),
            detail: format!(
                "regions exceed max_seq_len {}",
                cfg.item_image.max_seq_len
            ),
        });
    }
    let (x, mask) = embed_image(binding, feats)?;
    let seq = encoder_forward(
        binding,
        TOWER_ITEM_IMAGE,
        x,
        &mask,
        cfg.item_image.heads,
        cfg.item_image.layers,
    )?;
    finish_tower(seq, mask)
}

/// Fuses already-encoded text and image sequences. The text and image tower
/// outputs are reused, so within one parameter set the multimodal path sees
/// bit-identical `H^t`/`H^i`.
pub fn encode_item_multimodal<'t>(
    binding: &ParamBinding<'t, '_>,
    cfg: &ModelConfig,
    text: &TowerOutput<'t>,
    image: &TowerOutput<'t>,
) -> Result<TowerOutput<'t>> {
    match cfg.fusion {
        FusionMode::Cross => {
            let seq = cross_encoder_forward(
                binding,
                text.seq,
                image.seq,
                &image.mask,
                cfg.item_mm.heads,
                cfg.item_mm.layers,
            )?;
            finish_tower(seq, text.mask.clone())
        }
        FusionMode::Concat => {
            let mut x = text.seq.concat_rows(image.seq)?;
            let mut mask = text.mask.clone();
            mask.extend_from_slice(&image.mask);
            for l in 0..cfg.item_mm.layers {
                x = self_block(
                    binding,
                    &format!("{TOWER_ITEM_MM}.l{l}"),
                    "ln_q",
                    x,
                    &mask,
                    cfg.item_mm.heads,
                )?;
            }
            finish_tower(x, mask)
        }
    }
}

/// Frozen-parameter model for inference. Each encode call runs on its own
/// ephemeral tape; callers that batch many encodes should use the tape-level
/// functions with one [`ParamBinding`] per chunk instead.
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
}

impl Model {
    pub fn new(config: ModelConfig, params: ModelParams) -> Result<Self> {
        config.validate()?;
        Ok(Model { config, params })
    }

    /// Query embedding: (pre-normalization pooled vector, unit embedding).
    pub fn encode_query(&self, input: &TokenizedInput) -> Result<(Tensor, Tensor)> {
        let tape = Tape::new();
        let binding = ParamBinding::frozen(&tape, &self.params);
        let out = encode_query(&binding, &self.config, input)?;
        Ok((out.pooled.tensor(), out.unit.tensor()))
    }

    pub fn encode_item_text(&self, input: &TokenizedInput) -> Result<Tensor> {
        let tape = Tape::new();
        let binding = ParamBinding::frozen(&tape, &self.params);
        Ok(encode_item_text(&binding, &self.config, input)?.unit.tensor())
    }

    pub fn encode_item_image(&self, feats: &ImageFeatureSeq) -> Result<Tensor> {
        let tape = Tape::new();
        let binding = ParamBinding::frozen(&tape, &self.params);
        Ok(encode_item_image(&binding, &self.config, feats)?.unit.tensor())
    }

    pub fn encode_item_multimodal(
        &self,
        input: &TokenizedInput,
        feats: &ImageFeatureSeq,
    ) -> Result<Tensor> {
        let tape = Tape::new();
        let binding = ParamBinding::frozen(&tape, &self.params);
        let text = encode_item_text(&binding, &self.config, input)?;
        let image = encode_item_image(&binding, &self.config, feats)?;
        Ok(encode_item_multimodal(&binding, &self.config, &text, &image)?
            .unit
            .tensor())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::params::param_schema;

    fn tiny_cfg() -> ModelConfig {
        let mut cfg = ModelConfig::desk(12, 6);
        for tower in [
            &mut cfg.query,
            &mut cfg.item_text,
            &mut cfg.item_image,
            &mut cfg.item_mm,
        ] {
            tower.heads = 2;
            tower.model_dim = 8;
            tower.ff_dim = 16;
            tower.max_seq_len = 6;
            tower.layers = 1;
        }
        cfg
    }

    fn tiny_model() -> (ModelConfig, ModelParams) {
        let cfg = tiny_cfg();
        let params = ModelParams::init(&cfg, 42).unwrap();
        (cfg, params)
    }

    fn toks(ids: &[u32]) -> TokenizedInput {
        TokenizedInput::new(ids.to_vec(), vec![true; ids.len()]).unwrap()
    }

    fn image(seed: f64, regions: usize, d: usize) -> ImageFeatureSeq {
        let rows: Vec<Vec<f64>> = (0..regions)
            .map(|r| (0..d).map(|j| ((r * d + j) as f64 * 0.3 + seed).sin()).collect())
            .collect();
        ImageFeatureSeq::from_rows(&rows).unwrap()
    }

    #[test]
    fn embed_tokens_shape_and_vocab_error() {
        let (cfg, params) = tiny_model();
        let tape = Tape::new();
        let binding = ParamBinding::frozen(&tape, &params);
        let (x, mask) = embed_tokens(&binding, TOWER_QUERY, &cfg.query, &toks(&[3])).unwrap();
        assert_eq!(x.shape(), vec![2, 8]);
        assert_eq!(mask, vec![true, true]);

        let bad = embed_tokens(&binding, TOWER_QUERY, &cfg.query, &toks(&[99]));
        assert!(matches!(bad, Err(SmarError::VocabId { .. })));
    }

    #[test]
    fn all_masked_input_rejected() {
        assert!(TokenizedInput::new(vec![1, 2], vec![false, false]).is_err());
    }

    #[test]
    fn positions_distinguish_identical_tokens() {
        let (cfg, params) = tiny_model();
        let tape = Tape::new();
        let binding = ParamBinding::frozen(&tape, &params);
        let (x, _) = embed_tokens(&binding, TOWER_QUERY, &cfg.query, &toks(&[5, 5])).unwrap();
        let t = x.tensor();
        assert_ne!(t.row(1), t.row(2), "positional embeddings differ");
    }

    #[test]
    fn zero_layers_is_identity() {
        let (cfg, params) = tiny_model();
        let tape = Tape::new();
        let binding = ParamBinding::frozen(&tape, &params);
        let (x, mask) = embed_tokens(&binding, TOWER_QUERY, &cfg.query, &toks(&[1, 2, 3])).unwrap();
        let out = encoder_forward(&binding, TOWER_QUERY, x, &mask, cfg.query.heads, 0).unwrap();
        assert_eq!(out.tensor(), x.tensor());
    }

    #[test]
    fn masked_token_cannot_influence_unmasked_outputs() {
        let (cfg, params) = tiny_model();
        let run = |masked_id: u32| -> Tensor {
            let tape = Tape::new();
            let binding = ParamBinding::frozen(&tape, &params);
            let input =
                TokenizedInput::new(vec![1, masked_id, 3], vec![true, false, true]).unwrap();
            let out = encode_query(&binding, &cfg, &input).unwrap();
            out.seq.tensor()
        };
        let a = run(2);
        let b = run(7);
        for row in [0usize, 1, 3] {
            for j in 0..8 {
                let (x, y) = (a.at(row, j), b.at(row, j));
                assert!((x - y).abs() <= 1e-9, "row {row} col {j}: {x} vs {y}");
            }
        }
    }

    #[test]
    fn permuting_tokens_and_positions_permutes_outputs() {
        let (cfg, mut params) = tiny_model();
        let tape = Tape::new();
        let binding = ParamBinding::frozen(&tape, &params);
        let out1 = encode_query(&binding, &cfg, &toks(&[4, 9, 2])).unwrap().seq.tensor();

        // Swap content positions 1 and 2 in the positional table (rows 2, 3
        // counting the CLS row) and the corresponding tokens.
        let pos = params.get("query.pos_emb").unwrap().clone();
        let mut data = pos.data().to_vec();
        let k = 8;
        for j in 0..k {
            data.swap(k + j, 2 * k + j);
        }
        params
            .set(
                "query.pos_emb",
                Tensor::new(pos.shape().to_vec(), data).unwrap(),
            )
            .unwrap();
        let tape2 = Tape::new();
        let binding2 = ParamBinding::frozen(&tape2, &params);
        let out2 = encode_query(&binding2, &cfg, &toks(&[9, 4, 2])).unwrap().seq.tensor();

        let close = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-9);
        assert!(close(out1.row(0), out2.row(0)));
        assert!(close(out1.row(1), out2.row(2)));
        assert!(close(out1.row(2), out2.row(1)));
        assert!(close(out1.row(3), out2.row(3)));
    }

    #[test]
    fn single_image_region_gets_full_attention() {
        let (_cfg, params) = tiny_model();
        let tape = Tape::new();
        let binding = ParamBinding::frozen(&tape, &params);
        // kv sequence of one row: softmax over a single key is exactly 1, so
        // every query position receives the same context vector.
        let q_src = tape.constant(&Tensor::matrix(3, 8, (0..24).map(|i| i as f64 * 0.1).collect()).unwrap());
        let kv = tape.constant(&Tensor::matrix(1, 8, (0..8).map(|i| i as f64 * 0.2).collect()).unwrap());
        let out = attention(&binding, "item_mm.l0", q_src, kv, &[true], 2)
            .unwrap()
            .tensor();
        assert_eq!(out.row(0), out.row(1));
        assert_eq!(out.row(1), out.row(2));
    }

    #[test]
    fn cross_output_shape_and_masked_region_isolation() {
        let (cfg, params) = tiny_model();

        let run = |img: &ImageFeatureSeq, region_mask: Vec<bool>| -> (Tensor, Tensor) {
            let tape = Tape::new();
            let binding = ParamBinding::frozen(&tape, &params);
            let text = encode_item_text(&binding, &cfg, &toks(&[1, 2, 3, 4])).unwrap();
            let img = ImageFeatureSeq::new(img.features.clone(), region_mask).unwrap();
            let image = encode_item_image(&binding, &cfg, &img).unwrap();
            let fused = encode_item_multimodal(&binding, &cfg, &text, &image).unwrap();
            (fused.seq.tensor(), fused.unit.tensor())
        };

        let img = image(0.0, 3, 6);
        let (seq, _) = run(&img, vec![true; 3]);
        assert_eq!(seq.shape(), &[5, 8]); // Lt = 4 tokens + CLS

        // Zeroing a masked region's features must not move any output.
        let (_, base) = run(&img, vec![true, true, false]);
        let mut zeroed_rows: Vec<Vec<f64>> = (0..3).map(|r| img.features.row(r).to_vec()).collect();
        zeroed_rows[2] = vec![0.0; 6];
        let zeroed = ImageFeatureSeq::from_rows(&zeroed_rows).unwrap();
        let (_, after) = run(&zeroed, vec![true, true, false]);
        for (x, y) in base.data().iter().zip(after.data()) {
            assert!((x - y).abs() <= 1e-9);
        }
    }

    #[test]
    fn tower_outputs_are_unit_norm_and_deterministic() {
        let (cfg, params) = tiny_model();
        let tape = Tape::new();
        let binding = ParamBinding::frozen(&tape, &params);

        let q1 = encode_query(&binding, &cfg, &toks(&[1, 2])).unwrap().unit.tensor();
        let q2 = encode_query(&binding, &cfg, &toks(&[1, 2])).unwrap().unit.tensor();
        assert_eq!(q1, q2);
        assert!((q1.l2_norm() - 1.0).abs() < 1e-9);

        let other = encode_query(&binding, &cfg, &toks(&[3, 4])).unwrap().unit.tensor();
        let cos: f64 = q1.data().iter().zip(other.data()).map(|(a, b)| a * b).sum();
        assert!(cos < 1.0 - 1e-9, "distinct queries should not collide");

        let t = encode_item_text(&binding, &cfg, &toks(&[5, 6])).unwrap();
        assert!((t.unit.tensor().l2_norm() - 1.0).abs() < 1e-9);
        // H^t row 0 is the pre-normalization pooled vector.
        assert_eq!(t.seq.tensor().row(0), t.pooled.tensor().data());

        let img = image(1.0, 2, 6);
        let i = encode_item_image(&binding, &cfg, &img).unwrap();
        assert_eq!(i.seq.shape(), vec![3, 8]);
        assert!((i.unit.tensor().l2_norm() - 1.0).abs() < 1e-9);

        let m = encode_item_multimodal(&binding, &cfg, &t, &i).unwrap();
        assert!((m.unit.tensor().l2_norm() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn image_features_change_multimodal_but_not_text() {
        let (cfg, params) = tiny_model();
        let tape = Tape::new();
        let binding = ParamBinding::frozen(&tape, &params);
        let text = encode_item_text(&binding, &cfg, &toks(&[1, 2])).unwrap();
        let ia = encode_item_image(&binding, &cfg, &image(0.0, 2, 6)).unwrap();
        let ib = encode_item_image(&binding, &cfg, &image(5.0, 2, 6)).unwrap();
        let ma = encode_item_multimodal(&binding, &cfg, &text, &ia).unwrap().unit.tensor();
        let mb = encode_item_multimodal(&binding, &cfg, &text, &ib).unwrap().unit.tensor();
        assert_ne!(ma, mb);

        let text2 = encode_item_text(&binding, &cfg, &toks(&[1, 2])).unwrap();
        assert_eq!(text.unit.tensor(), text2.unit.tensor());
    }

    #[test]
    fn concat_fusion_differs_from_cross_fusion() {
        let (cfg, params) = tiny_model();
        let mut nc_cfg = cfg.clone();
        nc_cfg.fusion = FusionMode::Concat;

        let encode = |cfg: &ModelConfig| -> Tensor {
            let tape = Tape::new();
            let binding = ParamBinding::frozen(&tape, &params);
            let text = encode_item_text(&binding, cfg, &toks(&[1, 2, 3])).unwrap();
            let img = encode_item_image(&binding, cfg, &image(0.5, 2, 6)).unwrap();
            encode_item_multimodal(&binding, cfg, &text, &img).unwrap().unit.tensor()
        };
        assert_ne!(encode(&cfg), encode(&nc_cfg));
    }

    #[test]
    fn zero_features_zero_bias_leaves_cls_and_positions() {
        let (_cfg, params) = tiny_model();
        let tape = Tape::new();
        let binding = ParamBinding::frozen(&tape, &params);
        let zero = ImageFeatureSeq::from_rows(&[vec![0.0; 6], vec![0.0; 6]]).unwrap();
        let (x, _) = embed_image(&binding, &zero).unwrap();
        let x = x.tensor();
        let pos = params.get("item_image.pos_emb").unwrap();
        // proj(0) + 0 bias contributes nothing; rows 1.. equal positional rows.
        for r in 1..3 {
            assert_eq!(x.row(r), pos.row(r));
        }
    }

    #[test]
    fn image_feat_dim_mismatch_is_dimension_error() {
        let (cfg, params) = tiny_model();
        let tape = Tape::new();
        let binding = ParamBinding::frozen(&tape, &params);
        let wrong = ImageFeatureSeq::from_rows(&[vec![0.1; 4]]).unwrap();
        assert!(matches!(
            encode_item_image(&binding, &cfg, &wrong),
            Err(SmarError::DimMismatch { .. })
        ));
    }

    #[test]
    fn query_tower_gradients_match_finite_differences() {
        use crate::numerics::grad_check;
        use std::collections::BTreeMap;

        let (cfg, params) = tiny_model();
        // Check a representative slice of the tower, one parameter of each
        // kind; the acceptance suite sweeps every parameter end to end.
        let subset: BTreeMap<String, Tensor> = params
            .iter()
            .filter(|(n, _)| {
                matches!(
                    n.as_str(),
                    "query.cls"
                        | "query.tok_emb"
                        | "query.l0.attn.wq"
                        | "query.l0.ln1.gain"
                        | "query.l0.ff.b1"
                )
            })
            .map(|(n, t)| (n.clone(), t.clone()))
            .collect();

        let input = toks(&[1, 2, 3]);
        let weights: Vec<f64> = (0..8).map(|j| ((j + 1) as f64 * 0.37).cos()).collect();
        let err = grad_check(&subset, 1e-5, |tape, leaves| {
            let binding = ParamBinding::with_overrides(tape, leaves, &params);
            let out = encode_query(&binding, &cfg, &input)?;
            let w = tape.constant(&Tensor::vector(weights.clone())?);
            out.unit.dot(w)
        })
        .unwrap();
        assert!(err < 1e-4, "query tower FD error {err}");
    }

    #[test]
    fn schema_covers_all_bound_names() {
        let (cfg, params) = tiny_model();
        let tape = Tape::new();
        let binding = ParamBinding::trainable(&tape, &params);
        let text = encode_item_text(&binding, &cfg, &toks(&[1, 2])).unwrap();
        let img = encode_item_image(&binding, &cfg, &image(0.0, 2, 6)).unwrap();
        encode_item_multimodal(&binding, &cfg, &text, &img).unwrap();
        encode_query(&binding, &cfg, &toks(&[3])).unwrap();
        let schema: std::collections::BTreeSet<String> =
            param_schema(&cfg).into_iter().map(|(n, _)| n).collect();
        for (name, _) in binding.bound() {
            assert!(schema.contains(&name), "unexpected bound name {name}");
        }
    }
}
