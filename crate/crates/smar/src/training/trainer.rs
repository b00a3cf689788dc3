//! Pre-training and fine-tuning loops.
//!
//! Both loops are strictly sequential (forward, backward, clip, step), so a
//! given (config, corpus, seed) triple reproduces bit-identical checkpoints.
//! Towers whose loss weight is zero are never even built on the tape, which
//! both saves work and makes "no gradient reaches the image path" an exact
//! structural fact rather than a numerical one.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::data::records::{ClickPair, Corpus};
use crate::data::vocab::{tokenize_tight, Vocab};
use crate::data::make_batches;
use crate::encoders::params::HEADER_PREFIX;
use crate::encoders::{
    encode_item_image, encode_item_multimodal, encode_item_text, encode_query, ImageFeatureSeq,
    ModelConfig, ModelParams, ParamBinding, TokenizedInput,
};
use crate::error::{Result, SmarError};
use crate::numerics::{Tape, Tensor, Value};
use crate::objectives::{self, header_logit_t, in_batch_ce_t, LossWeights};
use crate::training::adamw::{adamw_step, clip_global_norm, AdamWConfig, OptimState};
use crate::training::checkpoint::{Checkpoint, Stage};
use crate::variant::FinetuneObjective;

/// Loss ceiling beyond which a run is declared divergent.
const DIVERGENCE_CEILING: f64 = 1e4;

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub weights: LossWeights,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Learning rate for the header's own optimizer; defaults to `lr`.
    pub header_lr: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 5e-4,
            batch_size: 32,
            epochs: 10,
            seed: 0,
            weights: LossWeights::default(),
            weight_decay: 0.01,
            clip_norm: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            header_lr: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if !(self.lr > 0.0) {
            errs.push(format!("lr {} must be positive", self.lr));
        }
        if self.batch_size == 0 {
            errs.push("batch_size must be positive".into());
        }
        if self.epochs == 0 {
            errs.push("epochs must be positive".into());
        }
        if !(self.clip_norm > 0.0) {
            errs.push(format!("clip_norm {} must be positive", self.clip_norm));
        }
        if let Err(e) = self.weights.validate() {
            errs.push(e.to_string());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(SmarError::Config(errs.join("; ")))
        }
    }

    fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }
}

/// One JSON line per optimizer step.
#[derive(Clone, Debug, Serialize)]
pub struct StepLog {
    pub step: u64,
    pub l_total: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l_text: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l_image: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l_mm: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l_prime: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub header_acc: Option<f64>,
    pub lr: f64,
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct Divergence {
    pub step: u64,
    pub loss: f64,
}

#[derive(Debug)]
pub struct TrainRun {
    pub checkpoint: Checkpoint,
    pub logs: Vec<StepLog>,
    /// When set, training aborted and `checkpoint` is the last good snapshot.
    pub diverged: Option<Divergence>,
}

/// Tokenization and feature cache shared across steps.
pub struct PreparedCorpus {
    pub query_tok: BTreeMap<String, TokenizedInput>,
    pub item_tok: BTreeMap<String, TokenizedInput>,
    pub item_img: BTreeMap<String, ImageFeatureSeq>,
}

impl PreparedCorpus {
    pub fn build(corpus: &Corpus, vocab: &Vocab, cfg: &ModelConfig) -> Result<Self> {
        let mut query_tok = BTreeMap::new();
        for q in &corpus.queries {
            query_tok.insert(
                q.query_id.clone(),
                tokenize_tight(&q.text, vocab, cfg.query.max_seq_len)?,
            );
        }
        let mut item_tok = BTreeMap::new();
        let mut item_img = BTreeMap::new();
        for item in &corpus.items {
            item_tok.insert(
                item.item_id.clone(),
                tokenize_tight(&item.title, vocab, cfg.item_text.max_seq_len)?,
            );
            item_img.insert(item.item_id.clone(), item.image_seq()?);
        }
        Ok(PreparedCorpus {
            query_tok,
            item_tok,
            item_img,
        })
    }

    fn query(&self, id: &str) -> Result<&TokenizedInput> {
        self.query_tok
            .get(id)
            .ok_or_else(|| SmarError::Data(format!("query {id} not prepared")))
    }

    fn item_text(&self, id: &str) -> Result<&TokenizedInput> {
        self.item_tok
            .get(id)
            .ok_or_else(|| SmarError::Data(format!("item {id} not prepared")))
    }

    fn item_image(&self, id: &str) -> Result<&ImageFeatureSeq> {
        self.item_img
            .get(id)
            .ok_or_else(|| SmarError::Data(format!("item {id} not prepared")))
    }
}

/// What one optimizer step produced; gradients are exposed so tests can
/// verify reachability claims directly.
pub struct StepStats {
    pub log: StepLog,
    pub grads: BTreeMap<String, Tensor>,
}

pub struct Trainer<'a> {
    pub model_cfg: ModelConfig,
    pub params: ModelParams,
    cfg: &'a TrainConfig,
    main_opt: OptimState,
    header_opt: OptimState,
    main_names: Vec<String>,
    header_names: Vec<String>,
    step: u64,
}

fn stack_units<'t>(tape: &'t Tape, units: &[Value<'t>]) -> Result<Value<'t>> {
    tape.stack_rows(units)
}

impl<'a> Trainer<'a> {
    pub fn new(model_cfg: ModelConfig, params: ModelParams, cfg: &'a TrainConfig) -> Result<Self> {
        cfg.validate()?;
        model_cfg.validate()?;
        let (header_names, main_names): (Vec<String>, Vec<String>) = params
            .names()
            .cloned()
            .partition(|n| n.starts_with(HEADER_PREFIX));
        Ok(Trainer {
            model_cfg,
            params,
            cfg,
            main_opt: OptimState::new(cfg.adamw()),
            header_opt: OptimState::new(AdamWConfig {
                lr: cfg.header_lr.unwrap_or(cfg.lr),
                ..cfg.adamw()
            }),
            main_names,
            header_names,
            step: 0,
        })
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    fn collect_grads(
        binding: &ParamBinding<'_, '_>,
        grads: &crate::numerics::Gradients<'_>,
    ) -> BTreeMap<String, Tensor> {
        binding
            .bound()
            .into_iter()
            .map(|(name, v)| (name, grads.get(v)))
            .collect()
    }

    /// One pre-training step over a batch of (query, item) pairs. Towers with
    /// zero task weight are skipped entirely.
    pub fn pretrain_step(
        &mut self,
        prepared: &PreparedCorpus,
        batch: &[&ClickPair],
    ) -> Result<StepStats> {
        if batch.is_empty() {
            return Err(SmarError::Empty("empty batch".into()));
        }
        let w = self.cfg.weights;
        let tau = self.model_cfg.temperature;
        let need_text = w.alpha > 0.0 || w.gamma > 0.0;
        let need_image = w.beta > 0.0 || w.gamma > 0.0;
        let need_mm = w.gamma > 0.0;

        let tape = Tape::new();
        let binding = ParamBinding::trainable(&tape, &self.params);

        let mut q_units = Vec::with_capacity(batch.len());
        let mut t_units = Vec::with_capacity(batch.len());
        let mut i_units = Vec::with_capacity(batch.len());
        let mut m_units = Vec::with_capacity(batch.len());
        for pair in batch {
            let q = encode_query(&binding, &self.model_cfg, prepared.query(&pair.query_id)?)?;
            q_units.push(q.unit);
            let text = if need_text {
                let t = encode_item_text(&binding, &self.model_cfg, prepared.item_text(&pair.item_id)?)?;
                t_units.push(t.unit);
                Some(t)
            } else {
                None
            };
            let image = if need_image {
                let i = encode_item_image(&binding, &self.model_cfg, prepared.item_image(&pair.item_id)?)?;
                i_units.push(i.unit);
                Some(i)
            } else {
                None
            };
            if need_mm {
                let m = encode_item_multimodal(
                    &binding,
                    &self.model_cfg,
                    text.as_ref().expect("gamma > 0 implies text"),
                    image.as_ref().expect("gamma > 0 implies image"),
                )?;
                m_units.push(m.unit);
            }
        }

        let q = stack_units(&tape, &q_units)?;
        let mut l_text = None;
        let mut l_image = None;
        let mut l_mm = None;
        let mut terms = Vec::new();
        if w.alpha > 0.0 {
            let term = in_batch_ce_t(q, stack_units(&tape, &t_units)?, tau)?;
            l_text = Some(term.item()?);
            terms.push((term, w.alpha));
        }
        if w.beta > 0.0 {
            let term = in_batch_ce_t(q, stack_units(&tape, &i_units)?, tau)?;
            l_image = Some(term.item()?);
            terms.push((term, w.beta));
        }
        if w.gamma > 0.0 {
            let term = in_batch_ce_t(q, stack_units(&tape, &m_units)?, tau)?;
            l_mm = Some(term.item()?);
            terms.push((term, w.gamma));
        }
        let mut total: Option<Value<'_>> = None;
        for (term, weight) in terms {
            let scaled = term.scale(weight)?;
            total = Some(match total {
                Some(acc) => acc.add(scaled)?,
                None => scaled,
            });
        }
        let total =
            total.ok_or_else(|| SmarError::Contract("all loss weights are zero".into()))?;
        let l_total = total.item()?;

        let grads_out = tape.backward(total)?;
        let mut grads = Self::collect_grads(&binding, &grads_out);
        clip_global_norm(&mut grads, self.cfg.clip_norm)?;
        adamw_step(&mut self.params, &self.main_names, &grads, &mut self.main_opt)?;
        self.step += 1;

        Ok(StepStats {
            log: StepLog {
                step: self.step,
                l_total,
                l_text,
                l_image,
                l_mm,
                l_prime: None,
                header_acc: None,
                lr: self.cfg.lr,
            },
            grads,
        })
    }

    /// One fine-tuning step over click pairs. In adaptive mode the main
    /// optimizer updates the towers through the p-mixed loss while a second
    /// optimizer fits the fashion header on detached query vectors.
    pub fn finetune_step(
        &mut self,
        prepared: &PreparedCorpus,
        batch: &[&ClickPair],
        labels: &BTreeMap<String, bool>,
        objective: FinetuneObjective,
    ) -> Result<StepStats> {
        if batch.is_empty() {
            return Err(SmarError::Empty("empty batch".into()));
        }
        let tau = self.model_cfg.temperature;
        let tape = Tape::new();
        let binding = ParamBinding::trainable(&tape, &self.params);

        let mut q_units = Vec::with_capacity(batch.len());
        let mut q_pooled = Vec::with_capacity(batch.len());
        let mut t_units = Vec::with_capacity(batch.len());
        let mut i_units = Vec::with_capacity(batch.len());
        let mut m_units = Vec::with_capacity(batch.len());
        for pair in batch {
            let q = encode_query(&binding, &self.model_cfg, prepared.query(&pair.query_id)?)?;
            q_units.push(q.unit);
            q_pooled.push(q.pooled);
            match objective {
                FinetuneObjective::TextOnly => {
                    let t = encode_item_text(&binding, &self.model_cfg, prepared.item_text(&pair.item_id)?)?;
                    t_units.push(t.unit);
                }
                FinetuneObjective::ImageOnly => {
                    let i = encode_item_image(&binding, &self.model_cfg, prepared.item_image(&pair.item_id)?)?;
                    i_units.push(i.unit);
                }
                FinetuneObjective::Adaptive => {
                    let t = encode_item_text(&binding, &self.model_cfg, prepared.item_text(&pair.item_id)?)?;
                    let i = encode_item_image(&binding, &self.model_cfg, prepared.item_image(&pair.item_id)?)?;
                    let m = encode_item_multimodal(&binding, &self.model_cfg, &t, &i)?;
                    t_units.push(t.unit);
                    i_units.push(i.unit);
                    m_units.push(m.unit);
                }
            }
        }

        let q = stack_units(&tape, &q_units)?;
        let (main_loss, header_grads, header_acc) = match objective {
            FinetuneObjective::TextOnly => {
                (in_batch_ce_t(q, stack_units(&tape, &t_units)?, tau)?, None, None)
            }
            FinetuneObjective::ImageOnly => {
                (in_batch_ce_t(q, stack_units(&tape, &i_units)?, tau)?, None, None)
            }
            FinetuneObjective::Adaptive => {
                let w = binding.get("header.w")?;
                let b = binding.get("header.b")?;
                let mut logits = Vec::with_capacity(batch.len());
                let mut p_vec = Vec::with_capacity(batch.len());
                let mut targets = Vec::with_capacity(batch.len());
                let mut correct = 0usize;
                for (pair, pooled) in batch.iter().zip(&q_pooled) {
                    let label = *labels.get(pair.query_id.as_str()).ok_or_else(|| {
                        SmarError::Data(format!(
                            "query {} has no fashion label",
                            pair.query_id
                        ))
                    })?;
                    let logit = header_logit_t(pooled.detach(), w, b)?;
                    let p = logit.sigmoid()?.item()?;
                    correct += usize::from((p >= self.model_cfg.route_threshold) == label);
                    logits.push(logit);
                    p_vec.push(p);
                    targets.push(f64::from(label));
                }

                let main = objectives::finetune_loss_t(
                    &tape,
                    q,
                    stack_units(&tape, &t_units)?,
                    stack_units(&tape, &m_units)?,
                    &p_vec,
                    tau,
                )?;

                // Header loss on its own backward pass; tower parameters are
                // unreachable from it because h^q is detached.
                let logit_vec = tape.stack_rows(&logits)?.reshape(vec![batch.len()])?;
                let header_loss = logit_vec.sigmoid_bce(&targets)?.mean()?;
                let header_grads_out = tape.backward(header_loss)?;
                let header_grads: BTreeMap<String, Tensor> =
                    Self::collect_grads(&binding, &header_grads_out)
                        .into_iter()
                        .filter(|(n, _)| n.starts_with(HEADER_PREFIX))
                        .collect();

                (main, Some(header_grads), Some(correct as f64 / batch.len() as f64))
            }
        };

        let l_total = main_loss.item()?;
        let grads_out = tape.backward(main_loss)?;
        let mut grads: BTreeMap<String, Tensor> = Self::collect_grads(&binding, &grads_out)
            .into_iter()
            .filter(|(n, _)| !n.starts_with(HEADER_PREFIX))
            .collect();
        drop(binding);

        if let Some(mut header_grads) = header_grads {
            clip_global_norm(&mut header_grads, self.cfg.clip_norm)?;
            adamw_step(
                &mut self.params,
                &self.header_names,
                &header_grads,
                &mut self.header_opt,
            )?;
        }
        clip_global_norm(&mut grads, self.cfg.clip_norm)?;
        adamw_step(&mut self.params, &self.main_names, &grads, &mut self.main_opt)?;
        self.step += 1;

        Ok(StepStats {
            log: StepLog {
                step: self.step,
                l_total,
                l_text: None,
                l_image: None,
                l_mm: None,
                l_prime: Some(l_total),
                header_acc,
                lr: self.cfg.lr,
            },
            grads,
        })
    }
}

fn run_loop<F>(
    trainer: &mut Trainer<'_>,
    pairs: &[&ClickPair],
    cfg: &TrainConfig,
    mut step_fn: F,
) -> Result<(Vec<StepLog>, Option<(Divergence, ModelParams)>)>
where
    F: FnMut(&mut Trainer<'_>, &[&ClickPair]) -> Result<StepStats>,
{
    let owned: Vec<ClickPair> = pairs.iter().map(|p| (*p).clone()).collect();
    let mut logs = Vec::new();
    let mut last_good = trainer.params.clone();
    for epoch in 0..cfg.epochs {
        let batches = make_batches(&owned, cfg.batch_size, cfg.seed, epoch)?;
        for batch_idx in batches {
            let batch: Vec<&ClickPair> = batch_idx.iter().map(|&i| &owned[i]).collect();
            let stats = step_fn(trainer, &batch)?;
            let loss = stats.log.l_total;
            logs.push(stats.log);
            if !loss.is_finite() || loss > DIVERGENCE_CEILING {
                return Ok((
                    logs,
                    Some((
                        Divergence {
                            step: trainer.step(),
                            loss,
                        },
                        last_good,
                    )),
                ));
            }
        }
        last_good = trainer.params.clone();
    }
    Ok((logs, None))
}

/// Pre-trains from random initialization over all train-split pairs (true
/// plus synthetic).
pub fn pretrain(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    corpus: &Corpus,
    vocab: &Vocab,
) -> Result<TrainRun> {
    cfg.validate()?;
    let pairs = corpus.pretrain_pairs();
    if pairs.is_empty() {
        return Err(SmarError::Data("corpus has no train pairs".into()));
    }
    let prepared = PreparedCorpus::build(corpus, vocab, model_cfg)?;
    let params = ModelParams::init(model_cfg, cfg.seed)?;
    let mut trainer = Trainer::new(model_cfg.clone(), params, cfg)?;
    let (logs, diverged) = run_loop(&mut trainer, &pairs, cfg, |t, batch| {
        t.pretrain_step(&prepared, batch)
    })?;

    let (params, diverged) = match diverged {
        Some((d, last_good)) => (last_good, Some(d)),
        None => (trainer.params, None),
    };
    let checkpoint = Checkpoint::new(
        Stage::Pretrained,
        trainer.step,
        cfg.seed,
        model_cfg.clone(),
        vocab.hash(),
        params,
    )?;
    Ok(TrainRun {
        checkpoint,
        logs,
        diverged,
    })
}

/// Fine-tunes a pre-trained checkpoint on click pairs (non-synthetic train
/// pairs). The towers continue from the checkpoint parameters; in adaptive
/// mode the fashion header is fitted by its own optimizer.
pub fn finetune(
    cfg: &TrainConfig,
    corpus: &Corpus,
    vocab: &Vocab,
    init: &Checkpoint,
    objective: FinetuneObjective,
) -> Result<TrainRun> {
    cfg.validate()?;
    if init.manifest.stage != Stage::Pretrained {
        return Err(SmarError::ConfigMismatch(format!(
            "fine-tuning expects a pretrained checkpoint, got stage {}",
            init.manifest.stage
        )));
    }
    init.ensure_vocab_hash(&vocab.hash())?;
    let model_cfg = init.manifest.model.clone();

    let pairs = corpus.click_pairs();
    if pairs.is_empty() {
        return Err(SmarError::Data("corpus has no click pairs".into()));
    }
    let labels = corpus.query_fashion_labels();
    if objective == FinetuneObjective::Adaptive {
        for p in &pairs {
            if !labels.contains_key(p.query_id.as_str()) {
                return Err(SmarError::Data(format!(
                    "query {} has no fashion label",
                    p.query_id
                )));
            }
        }
    }

    let prepared = PreparedCorpus::build(corpus, vocab, &model_cfg)?;
    let mut trainer = Trainer::new(model_cfg.clone(), init.params.clone(), cfg)?;
    let (logs, diverged) = run_loop(&mut trainer, &pairs, cfg, |t, batch| {
        t.finetune_step(&prepared, batch, &labels, objective)
    })?;

    let (params, diverged) = match diverged {
        Some((d, last_good)) => (last_good, Some(d)),
        None => (trainer.params, None),
    };
    let checkpoint = Checkpoint::new(
        Stage::Finetuned,
        trainer.step,
        cfg.seed,
        model_cfg,
        vocab.hash(),
        params,
    )?;
    Ok(TrainRun {
        checkpoint,
        logs,
        diverged,
    })
}
