//! Scoring and training objectives.
//!
//! Pre-training runs three in-batch contrastive tasks over one batch of
//! (query, positive item) pairs: query↔item-text, query↔item-image, and
//! query↔fused multimodal, combined with non-negative weights. Fine-tuning
//! mixes the text and multimodal objectives per example, weighted by the
//! fashion-header probability (gradient-detached, so the header is trained
//! only by its own binary cross-entropy).
//!
//! The `_t` suffixed functions build tape graphs for training; the plain
//! functions evaluate the same math on ephemeral tapes.

use crate::error::{Result, SmarError};
use crate::numerics::{Tape, Tensor, Value};

/// Tolerated deviation from unit norm in scoring inputs.
const NORM_TOL: f64 = 1e-6;

/// Loss weights for the three pre-training tasks (text, image, multimodal).
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl LossWeights {
    pub fn new(alpha: f64, beta: f64, gamma: f64) -> Result<Self> {
        let w = LossWeights { alpha, beta, gamma };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 || self.beta < 0.0 || self.gamma < 0.0 {
            return Err(SmarError::Contract(format!(
                "loss weights must be non-negative: {self:?}"
            )));
        }
        if self.alpha + self.beta + self.gamma <= 0.0 {
            return Err(SmarError::Contract(
                "at least one loss weight must be positive".into(),
            ));
        }
        Ok(())
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
        }
    }
}

/// One batch of unit-norm embeddings; row i's item is the positive for row
/// i's query, and every other row in the batch is a negative.
#[derive(Clone, Debug)]
pub struct ScoredBatch {
    pub query: Tensor,
    pub item_text: Tensor,
    pub item_image: Tensor,
    pub item_mm: Tensor,
}

impl ScoredBatch {
    pub fn new(query: Tensor, item_text: Tensor, item_image: Tensor, item_mm: Tensor) -> Result<Self> {
        let b = ScoredBatch {
            query,
            item_text,
            item_image,
            item_mm,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn batch_size(&self) -> usize {
        self.query.shape()[0]
    }

    fn validate(&self) -> Result<()> {
        let shape = self.query.shape();
        if shape.len() != 2 || shape[0] == 0 {
            return Err(SmarError::Empty("batch must have at least one row".into()));
        }
        for (name, t) in [
            ("item_text", &self.item_text),
            ("item_image", &self.item_image),
            ("item_mm", &self.item_mm),
        ] {
            if t.shape() != shape {
                return Err(SmarError::DimMismatch {
                    op: "scored_batch",
                    lhs: shape.to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            let _ = name;
        }
        for t in [&self.query, &self.item_text, &self.item_image, &self.item_mm] {
            for r in 0..shape[0] {
                let norm: f64 = t.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
                if (norm - 1.0).abs() > NORM_TOL {
                    return Err(SmarError::Contract(format!(
                        "batch row {r} has norm {norm}, expected 1"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Similarity of two unit-norm embeddings: their inner product, in [-1, 1].
pub fn score(e_q: &Tensor, e_s: &Tensor) -> Result<f64> {
    if e_q.shape() != e_s.shape() || e_q.rank() != 1 {
        return Err(SmarError::DimMismatch {
            op: "score",
            lhs: e_q.shape().to_vec(),
            rhs: e_s.shape().to_vec(),
        });
    }
    for (name, e) in [("query", e_q), ("item", e_s)] {
        let norm = e.l2_norm();
        if (norm - 1.0).abs() > NORM_TOL {
            return Err(SmarError::Contract(format!(
                "{name} embedding norm {norm} deviates from 1 beyond {NORM_TOL:e}"
            )));
        }
    }
    Ok(e_q.data().iter().zip(e_s.data()).map(|(a, b)| a * b).sum())
}

/// Per-example negative log-likelihood of the diagonal under in-batch
/// softmax: entry i is -log softmax(M_i)[i] with M = q sᵀ / tau.
pub fn per_example_nll_t<'t>(
    q: Value<'t>,
    s: Value<'t>,
    tau: f64,
) -> Result<Value<'t>> {
    if tau <= 0.0 {
        return Err(SmarError::Contract(format!("temperature {tau} must be positive")));
    }
    let logits = q.matmul(s.transpose()?)?.scale(1.0 / tau)?;
    logits.log_softmax_rows()?.diag()?.neg()
}

/// In-batch softmax cross-entropy: mean over the batch of the per-example
/// NLL. Diagonal entries are the positives; off-diagonals are negatives.
pub fn in_batch_ce_t<'t>(q: Value<'t>, s: Value<'t>, tau: f64) -> Result<Value<'t>> {
    let b = q.shape()[0];
    per_example_nll_t(q, s, tau)?.sum()?.scale(1.0 / b as f64)
}

/// Value-level wrapper over [`in_batch_ce_t`].
pub fn in_batch_ce(q_emb: &Tensor, s_emb: &Tensor, tau: f64) -> Result<f64> {
    if q_emb.rank() != 2 || q_emb.shape() != s_emb.shape() {
        return Err(SmarError::DimMismatch {
            op: "in_batch_ce",
            lhs: q_emb.shape().to_vec(),
            rhs: s_emb.shape().to_vec(),
        });
    }
    if q_emb.shape()[0] == 0 {
        return Err(SmarError::Empty("in_batch_ce over empty batch".into()));
    }
    let tape = Tape::new();
    in_batch_ce_t(tape.constant(q_emb), tape.constant(s_emb), tau)?.item()
}

/// Weighted three-task pre-training loss and its per-task components.
pub struct PretrainLoss<'t> {
    pub total: Value<'t>,
    pub text: Value<'t>,
    pub image: Value<'t>,
    pub mm: Value<'t>,
}

pub fn pretrain_loss_t<'t>(
    q: Value<'t>,
    s_text: Value<'t>,
    s_image: Value<'t>,
    s_mm: Value<'t>,
    w: &LossWeights,
    tau: f64,
) -> Result<PretrainLoss<'t>> {
    w.validate()?;
    let text = in_batch_ce_t(q, s_text, tau)?;
    let image = in_batch_ce_t(q, s_image, tau)?;
    let mm = in_batch_ce_t(q, s_mm, tau)?;
    let total = text
        .scale(w.alpha)?
        .add(image.scale(w.beta)?)?
        .add(mm.scale(w.gamma)?)?;
    Ok(PretrainLoss {
        total,
        text,
        image,
        mm,
    })
}

/// Value-level pre-training loss: (total, [L_text, L_image, L_mm]).
pub fn pretrain_loss(batch: &ScoredBatch, w: &LossWeights, tau: f64) -> Result<(f64, [f64; 3])> {
    batch.validate()?;
    let tape = Tape::new();
    let out = pretrain_loss_t(
        tape.constant(&batch.query),
        tape.constant(&batch.item_text),
        tape.constant(&batch.item_image),
        tape.constant(&batch.item_mm),
        w,
        tau,
    )?;
    Ok((
        out.total.item()?,
        [out.text.item()?, out.image.item()?, out.mm.item()?],
    ))
}

/// Fashion-header probability for one pooled query vector. The caller passes
/// a gradient-detached `h_q`; header gradients must not reach the query tower.
pub fn predict_fashion_t<'t>(
    h_q: Value<'t>,
    w: Value<'t>,
    b: Value<'t>,
) -> Result<Value<'t>> {
    header_logit_t(h_q, w, b)?.sigmoid()
}

/// Pre-sigmoid header score; kept separate so training can use the
/// numerically stable fused BCE on logits.
pub fn header_logit_t<'t>(h_q: Value<'t>, w: Value<'t>, b: Value<'t>) -> Result<Value<'t>> {
    w.dot(h_q)?.add(b)
}

/// Value-level header probability.
pub fn predict_fashion(h_q: &Tensor, w: &Tensor, b: &Tensor) -> Result<f64> {
    let tape = Tape::new();
    predict_fashion_t(tape.constant(h_q), tape.constant(w), tape.constant(b))?.item()
}

/// Binary cross-entropy on a probability in (0, 1).
pub fn header_loss(p: f64, label: bool) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(SmarError::Contract(format!(
            "header probability {p} outside (0, 1)"
        )));
    }
    Ok(if label { -p.ln() } else { -(1.0 - p).ln() })
}

/// Adaptive fine-tuning loss: per example, the text and multimodal NLL terms
/// are mixed by the (detached) header probability p_i.
pub fn finetune_loss_t<'t>(
    tape: &'t Tape,
    q: Value<'t>,
    s_text: Value<'t>,
    s_mm: Value<'t>,
    p_vec: &[f64],
    tau: f64,
) -> Result<Value<'t>> {
    let b = q.shape()[0];
    if p_vec.len() != b {
        return Err(SmarError::DimMismatch {
            op: "finetune_loss",
            lhs: vec![b],
            rhs: vec![p_vec.len()],
        });
    }
    if p_vec.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(SmarError::Contract(
            "finetune mixing probabilities must lie in [0, 1]".into(),
        ));
    }
    let nll_text = per_example_nll_t(q, s_text, tau)?;
    let nll_mm = per_example_nll_t(q, s_mm, tau)?;
    let p = tape.constant(&Tensor::vector(p_vec.to_vec())?);
    let one_minus_p =
        tape.constant(&Tensor::vector(p_vec.iter().map(|p| 1.0 - p).collect())?);
    p.dot(nll_mm)?
        .add(one_minus_p.dot(nll_text)?)?
        .scale(1.0 / b as f64)
}

/// Value-level adaptive loss over prebuilt embeddings.
pub fn finetune_loss(
    q: &Tensor,
    s_text: &Tensor,
    s_mm: &Tensor,
    p_vec: &[f64],
    tau: f64,
) -> Result<f64> {
    let tape = Tape::new();
    finetune_loss_t(
        &tape,
        tape.constant(q),
        tape.constant(s_text),
        tape.constant(s_mm),
        p_vec,
        tau,
    )?
    .item()
}
