//! AdamW with decoupled weight decay.
//!
//! Decay multiplies parameters directly by (1 - lr*lambda) before the
//! moment-based update, so it never flows through the moment estimates.

use std::collections::BTreeMap;

use crate::encoders::ModelParams;
use crate::error::{Result, SmarError};
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Per-parameter first/second moments plus the shared step counter.
pub struct OptimState {
    pub cfg: AdamWConfig,
    pub step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl OptimState {
    pub fn new(cfg: AdamWConfig) -> Self {
        OptimState {
            cfg,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }
}

/// One AdamW update over `names`. Parameters without a gradient entry take a
/// zero gradient (their moments decay and weight decay still applies).
pub fn adamw_step(
    params: &mut ModelParams,
    names: &[String],
    grads: &BTreeMap<String, Tensor>,
    state: &mut OptimState,
) -> Result<()> {
    for (name, g) in grads {
        if let Some(i) = g.data().iter().position(|v| !v.is_finite()) {
            return Err(SmarError::Contract(format!(
                "non-finite gradient for parameter {name} at index {i}"
            )));
        }
    }
    state.step += 1;
    let t = state.step;
    let c = state.cfg;
    let bias1 = 1.0 - c.beta1.powi(t as i32);
    let bias2 = 1.0 - c.beta2.powi(t as i32);

    for name in names {
        let current = params.get(name)?;
        let n = current.numel();
        if let Some(g) = grads.get(name) {
            if g.shape() != current.shape() {
                return Err(SmarError::DimMismatch {
                    op: "adamw_step",
                    lhs: current.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
        }
        let zero = vec![0.0; n];
        let g = grads.get(name).map(|t| t.data()).unwrap_or(&zero);
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
        let v = state.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);

        let mut data = current.data().to_vec();
        for j in 0..n {
            data[j] *= 1.0 - c.lr * c.weight_decay;
            m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g[j];
            v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j];
            let m_hat = m[j] / bias1;
            let v_hat = v[j] / bias2;
            data[j] -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
        }
        params.set(name, Tensor::new(current.shape().to_vec(), data)?)?;
    }
    Ok(())
}

/// Scales all gradients so their joint L2 norm does not exceed `max_norm`.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> Result<f64> {
    let mut sq = 0.0;
    for g in grads.values() {
        sq += g.data().iter().map(|v| v * v).sum::<f64>();
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for g in grads.values_mut() {
            let scaled: Vec<f64> = g.data().iter().map(|v| v * scale).collect();
            *g = Tensor::new(g.shape().to_vec(), scaled)?;
        }
    }
    Ok(norm)
}
