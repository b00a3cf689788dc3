//! Central-difference gradient checker.
//!
//! The checker is the independent oracle for every differentiable op and for
//! the full training losses: it re-evaluates the scalar function under ±h
//! element perturbations and compares against the tape's analytic gradients.

use std::collections::BTreeMap;

use crate::error::{Result, SmarError};
use crate::numerics::tape::{Tape, Value};
use crate::numerics::tensor::Tensor;

/// Scalar function of a named parameter set, expressed as a tape program.
pub trait ScalarFn:
    for<'t> Fn(&'t Tape, &BTreeMap<String, Value<'t>>) -> Result<Value<'t>>
{
}
impl<F> ScalarFn for F where
    F: for<'t> Fn(&'t Tape, &BTreeMap<String, Value<'t>>) -> Result<Value<'t>>
{
}

fn eval_scalar(f: &impl ScalarFn, params: &BTreeMap<String, Tensor>) -> Result<f64> {
    let tape = Tape::new();
    let leaves: BTreeMap<String, Value<'_>> = params
        .iter()
        .map(|(name, t)| (name.clone(), tape.leaf(t)))
        .collect();
    let loss = f(&tape, &leaves)?;
    loss.item()
}

/// Maximum relative error between analytic and central-difference gradients
/// over every element of every parameter.
///
/// `f` must be deterministic; two evaluations at the base point are compared
/// bit-for-bit before any differencing happens.
pub fn grad_check(
    params: &BTreeMap<String, Tensor>,
    h: f64,
    f: impl ScalarFn,
) -> Result<f64> {
    if h <= 0.0 {
        return Err(SmarError::Contract(format!("step h must be positive, got {h}")));
    }
    let first = eval_scalar(&f, params)?;
    let second = eval_scalar(&f, params)?;
    if first.to_bits() != second.to_bits() {
        return Err(SmarError::NonDeterministic { first, second });
    }

    // Analytic pass.
    let tape = Tape::new();
    let leaves: BTreeMap<String, Value<'_>> = params
        .iter()
        .map(|(name, t)| (name.clone(), tape.leaf(t)))
        .collect();
    let loss = f(&tape, &leaves)?;
    let grads = tape.backward(loss)?;
    let analytic: BTreeMap<String, Tensor> = leaves
        .iter()
        .map(|(name, v)| (name.clone(), grads.get(*v)))
        .collect();

    let mut max_rel = 0.0f64;
    for (name, base) in params {
        if !base.grad_enabled() {
            continue;
        }
        let a = &analytic[name];
        for i in 0..base.numel() {
            let mut plus = params.clone();
            plus.insert(name.clone(), base.perturbed(i, h)?);
            let f_plus = eval_scalar(&f, &plus)?;

            let mut minus = params.clone();
            minus.insert(name.clone(), base.perturbed(i, -h)?);
            let f_minus = eval_scalar(&f, &minus)?;

            let fd = (f_plus - f_minus) / (2.0 * h);
            let an = a.get(i);
            let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-8);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}
