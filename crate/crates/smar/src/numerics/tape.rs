//! Tape-based reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every differentiable op in execution order; the backward
//! pass walks the record in exact reverse order. Tapes are single-owner: build
//! the graph and run backward on one logical thread. Tensors themselves are
//! immutable, so concurrent forward passes on separate tapes are safe.
//!
//! Every op validates shapes on entry and scans its output for NaN/Inf before
//! the node is committed, so a poisoned value is reported at the op that
//! produced it rather than at the loss.

use std::cell::RefCell;

use crate::error::{Result, SmarError};
use crate::numerics::tensor::{check_finite, Tensor};

const MASK_NEG: f64 = -1e30;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    Matmul { a: usize, b: usize },
    Transpose { a: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    MulElem { a: usize, b: usize },
    Scale { a: usize, c: f64 },
    Neg { a: usize },
    AddRow { m: usize, row: usize },
    RowSoftmax { a: usize },
    LogSoftmaxRows { a: usize },
    LayerNorm { x: usize, gain: usize, bias: usize, eps: f64 },
    Gelu { a: usize },
    Sigmoid { a: usize },
    SigmoidBce { logits: usize, targets: Vec<f64> },
    L2Normalize { a: usize },
    Row { a: usize, index: usize },
    SliceRows { a: usize, start: usize },
    SliceCols { a: usize, start: usize },
    ConcatRows { a: usize, b: usize },
    ConcatCols { parts: Vec<usize> },
    StackRows { parts: Vec<usize> },
    GatherRows { table: usize, ids: Vec<usize> },
    Diag { a: usize },
    Sum { a: usize },
    Mean { a: usize },
    Dot { a: usize, b: usize },
    Reshape { a: usize },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Single-owner op recorder for one forward/backward cycle.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a tape. Copyable; all arithmetic goes through methods
/// that record onto the owning tape.
#[derive(Clone, Copy)]
pub struct Value<'t> {
    tape: &'t Tape,
    id: usize,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Registers a differentiable leaf. Gradient participation follows the
    /// tensor's `grad_enabled` flag; a non-grad tensor behaves as a constant.
    pub fn leaf(&self, t: &Tensor) -> Value<'_> {
        let needs_grad = t.grad_enabled();
        self.push(t.clone(), Op::Leaf, needs_grad)
    }

    /// Registers a non-differentiable input.
    pub fn constant(&self, t: &Tensor) -> Value<'_> {
        self.push(t.clone(), Op::Constant, false)
    }

    fn push(&self, value: Tensor, op: Op, needs_grad: bool) -> Value<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Value {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn same_tape(&self, other: &Tape) -> Result<()> {
        if std::ptr::eq(self, other) {
            Ok(())
        } else {
            Err(SmarError::Contract(
                "values belong to different tapes".into(),
            ))
        }
    }

    fn with_node<R>(&self, id: usize, f: impl FnOnce(&Node) -> R) -> R {
        f(&self.nodes.borrow()[id])
    }

    fn commit(
        &self,
        op_name: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        op: Op,
        needs_grad: bool,
    ) -> Result<Value<'_>> {
        check_finite(op_name, &data)?;
        let t = Tensor::from_raw_unchecked(shape, data);
        Ok(self.push(t, op, needs_grad))
    }

    /// Stacks rank-1 vectors of equal length into a matrix, one per row.
    pub fn stack_rows<'t>(&'t self, parts: &[Value<'t>]) -> Result<Value<'t>> {
        if parts.is_empty() {
            return Err(SmarError::Empty("stack_rows of zero vectors".into()));
        }
        let mut data = Vec::new();
        let mut needs_grad = false;
        let mut cols = 0usize;
        {
            let nodes = self.nodes.borrow();
            for (i, p) in parts.iter().enumerate() {
                self.same_tape(p.tape)?;
                let t = &nodes[p.id].value;
                if t.rank() != 1 {
                    return Err(SmarError::BadShape {
                        op: "stack_rows",
                        shape: t.shape().to_vec(),
                        detail: "expected rank-1 parts".into(),
                    });
                }
                if i == 0 {
                    cols = t.numel();
                } else if t.numel() != cols {
                    return Err(SmarError::DimMismatch {
                        op: "stack_rows",
                        lhs: vec![cols],
                        rhs: t.shape().to_vec(),
                    });
                }
                data.extend_from_slice(t.data());
                needs_grad |= nodes[p.id].needs_grad;
            }
        }
        let ids = parts.iter().map(|p| p.id).collect();
        self.commit(
            "stack_rows",
            vec![parts.len(), cols],
            data,
            Op::StackRows { parts: ids },
            needs_grad,
        )
    }

    /// Concatenates matrices with equal row counts along columns.
    pub fn concat_cols<'t>(&'t self, parts: &[Value<'t>]) -> Result<Value<'t>> {
        if parts.is_empty() {
            return Err(SmarError::Empty("concat_cols of zero parts".into()));
        }
        let (rows, total_cols, needs_grad) = {
            let nodes = self.nodes.borrow();
            let rows = nodes[parts[0].id].value.view_rows();
            let mut total = 0usize;
            let mut ng = false;
            for p in parts {
                self.same_tape(p.tape)?;
                let t = &nodes[p.id].value;
                if t.rank() != 2 || t.view_rows() != rows {
                    return Err(SmarError::DimMismatch {
                        op: "concat_cols",
                        lhs: vec![rows],
                        rhs: t.shape().to_vec(),
                    });
                }
                total += t.view_cols();
                ng |= nodes[p.id].needs_grad;
            }
            (rows, total, ng)
        };
        let mut data = vec![0.0; rows * total_cols];
        {
            let nodes = self.nodes.borrow();
            let mut col_off = 0usize;
            for p in parts {
                let t = &nodes[p.id].value;
                let c = t.view_cols();
                for r in 0..rows {
                    data[r * total_cols + col_off..r * total_cols + col_off + c]
                        .copy_from_slice(t.row(r));
                }
                col_off += c;
            }
        }
        let ids = parts.iter().map(|p| p.id).collect();
        self.commit(
            "concat_cols",
            vec![rows, total_cols],
            data,
            Op::ConcatCols { parts: ids },
            needs_grad,
        )
    }

    /// Reverse pass from a scalar loss. Returns gradients for every node;
    /// query leaves through [`Gradients::get`].
    pub fn backward(&self, loss: Value<'_>) -> Result<Gradients<'_>> {
        self.same_tape(loss.tape)?;
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.numel() != 1 {
            return Err(SmarError::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(vec![1.0]);

        for id in (0..=loss.id).rev() {
            if grads[id].is_none() || !nodes[id].needs_grad {
                continue;
            }
            let g = grads[id].take().unwrap();
            backprop_op(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }

        for (id, slot) in grads.iter().enumerate() {
            if let (Some(buf), Op::Leaf) = (slot, &nodes[id].op) {
                check_finite("backward", buf)?;
            }
        }
        drop(nodes);
        Ok(Gradients { tape: self, grads })
    }
}

/// Gradients produced by [`Tape::backward`]. Leaves that do not reach the
/// loss report exact zeros.
pub struct Gradients<'t> {
    tape: &'t Tape,
    grads: Vec<Option<Vec<f64>>>,
}

impl<'t> Gradients<'t> {
    pub fn get(&self, v: Value<'t>) -> Tensor {
        let shape = self.tape.with_node(v.id, |n| n.value.shape().to_vec());
        match &self.grads[v.id] {
            Some(buf) => Tensor::from_raw_unchecked(shape, buf.clone()),
            None => Tensor::zeros(shape),
        }
    }
}

impl<'t> Value<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn tensor(&self) -> Tensor {
        self.tape.with_node(self.id, |n| n.value.clone())
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.with_node(self.id, |n| n.value.shape().to_vec())
    }

    pub fn item(&self) -> Result<f64> {
        self.tape.with_node(self.id, |n| n.value.item())
    }

    /// Re-registers the current value as a non-differentiable constant.
    pub fn detach(&self) -> Value<'t> {
        let t = self.tensor();
        self.tape.constant(&t)
    }

    fn binary_shapes(&self, other: Value<'t>) -> Result<(Vec<usize>, bool)> {
        self.tape.same_tape(other.tape)?;
        let nodes = self.tape.nodes.borrow();
        let a = &nodes[self.id].value;
        let b = &nodes[other.id].value;
        if a.shape() != b.shape() {
            return Err(SmarError::DimMismatch {
                op: "elementwise",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        Ok((
            a.shape().to_vec(),
            nodes[self.id].needs_grad || nodes[other.id].needs_grad,
        ))
    }

    pub fn matmul(&self, other: Value<'t>) -> Result<Value<'t>> {
        self.tape.same_tape(other.tape)?;
        let (m, p, data, ng) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id].value;
            let b = &nodes[other.id].value;
            if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
                return Err(SmarError::DimMismatch {
                    op: "matmul",
                    lhs: a.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                });
            }
            let (m, n, p) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            let mut out = vec![0.0; m * p];
            matmul_nn(a.data(), b.data(), m, n, p, &mut out);
            (
                m,
                p,
                out,
                nodes[self.id].needs_grad || nodes[other.id].needs_grad,
            )
        };
        self.tape.commit(
            "matmul",
            vec![m, p],
            data,
            Op::Matmul {
                a: self.id,
                b: other.id,
            },
            ng,
        )
    }

    pub fn transpose(&self) -> Result<Value<'t>> {
        let (r, c, data, ng) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id].value;
            if a.rank() != 2 {
                return Err(SmarError::BadShape {
                    op: "transpose",
                    shape: a.shape().to_vec(),
                    detail: "expected rank-2".into(),
                });
            }
            let (r, c) = (a.shape()[0], a.shape()[1]);
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    out[j * r + i] = a.data()[i * c + j];
                }
            }
            (r, c, out, nodes[self.id].needs_grad)
        };
        self.tape
            .commit("transpose", vec![c, r], data, Op::Transpose { a: self.id }, ng)
    }

    pub fn add(&self, other: Value<'t>) -> Result<Value<'t>> {
        let (shape, ng) = self.binary_shapes(other)?;
        let data = {
            let nodes = self.tape.nodes.borrow();
            let a = nodes[self.id].value.data();
            let b = nodes[other.id].value.data();
            a.iter().zip(b).map(|(x, y)| x + y).collect()
        };
        self.tape.commit(
            "add",
            shape,
            data,
            Op::Add {
                a: self.id,
                b: other.id,
            },
            ng,
        )
    }

    pub fn sub(&self, other: Value<'t>) -> Result<Value<'t>> {
        let (shape, ng) = self.binary_shapes(other)?;
        let data = {
            let nodes = self.tape.nodes.borrow();
            let a = nodes[self.id].value.data();
            let b = nodes[other.id].value.data();
            a.iter().zip(b).map(|(x, y)| x - y).collect()
        };
        self.tape.commit(
            "sub",
            shape,
            data,
            Op::Sub {
                a: self.id,
                b: other.id,
            },
            ng,
        )
    }

    pub fn mul_elem(&self, other: Value<'t>) -> Result<Value<'t>> {
        let (shape, ng) = self.binary_shapes(other)?;
        let data = {
            let nodes = self.tape.nodes.borrow();
            let a = nodes[self.id].value.data();
            let b = nodes[other.id].value.data();
            a.iter().zip(b).map(|(x, y)| x * y).collect()
        };
        self.tape.commit(
            "mul_elem",
            shape,
            data,
            Op::MulElem {
                a: self.id,
                b: other.id,
            },
            ng,
        )
    }

    pub fn scale(&self, c: f64) -> Result<Value<'t>> {
        let (shape, data, ng) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id].value;
            (
                a.shape().to_vec(),
                a.data().iter().map(|x| x * c).collect(),
                nodes[self.id].needs_grad,
            )
        };
        self.tape
            .commit("scale", shape, data, Op::Scale { a: self.id, c }, ng)
    }

    pub fn neg(&self) -> Result<Value<'t>> {
        let (shape, data, ng) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id].value;
            (
                a.shape().to_vec(),
                a.data().iter().map(|x| -x).collect(),
                nodes[self.id].needs_grad,
            )
        };
        self.tape
            .commit("neg", shape, data, Op::Neg { a: self.id }, ng)
    }

    /// Adds a rank-1 row vector to every row of a matrix.
    pub fn add_row(&self, row: Value<'t>) -> Result<Value<'t>> {
        self.tape.same_tape(row.tape)?;
        let (shape, data, ng) = {
            let nodes = self.tape.nodes.borrow();
            let m = &nodes[self.id].value;
            let r = &nodes[row.id].value;
            if m.rank() != 2 || r.rank() != 1 || m.shape()[1] != r.numel() {
                return Err(SmarError::DimMismatch {
                    op: "add_row",
                    lhs: m.shape().to_vec(),
                    rhs: r.shape().to_vec(),
                });
            }
            let cols = m.shape()[1];
            let mut out = m.data().to_vec();
            for chunk in out.chunks_mut(cols) {
                for (o, v) in chunk.iter_mut().zip(r.data()) {
                    *o += v;
                }
            }
            (
                m.shape().to_vec(),
                out,
                nodes[self.id].needs_grad || nodes[row.id].needs_grad,
            )
        };
        self.tape.commit(
            "add_row",
            shape,
            data,
            Op::AddRow {
                m: self.id,
                row: row.id,
            },
            ng,
        )
    }

    /// Numerically stabilized softmax along the last axis (per row).
    pub fn row_softmax(&self) -> Result<Value<'t>> {
        let (shape, data, ng) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id].value;
            if a.rank() > 2 {
                return Err(SmarError::BadShape {
                    op: "softmax",
                    shape: a.shape().to_vec(),
                    detail: "expected rank 1 or 2".into(),
                });
            }
            let cols = a.view_cols();
            let mut out = a.data().to_vec();
            for chunk in out.chunks_mut(cols) {
                softmax_row_in_place(chunk);
            }
            (a.shape().to_vec(), out, nodes[self.id].needs_grad)
        };
        self.tape
            .commit("softmax", shape, data, Op::RowSoftmax { a: self.id }, ng)
    }

    /// log(softmax) along the last axis, computed via the log-sum-exp shift.
    pub fn log_softmax_rows(&self) -> Result<Value<'t>> {
        let (shape, data, ng) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id].value;
            if a.rank() > 2 {
                return Err(SmarError::BadShape {
                    op: "log_softmax",
                    shape: a.shape().to_vec(),
                    detail: "expected rank 1 or 2".into(),
                });
            }
            let cols = a.view_cols();
            let mut out = a.data().to_vec();
            for chunk in out.chunks_mut(cols) {
                let m = chunk.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + chunk.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                for v in chunk.iter_mut() {
                    *v -= lse;
                }
            }
            (a.shape().to_vec(), out, nodes[self.id].needs_grad)
        };
        self.tape.commit(
            "log_softmax",
            shape,
            data,
            Op::LogSoftmaxRows { a: self.id },
            ng,
        )
    }

    /// Per-row layer normalization followed by the affine (gain, bias).
    pub fn layer_norm(&self, gain: Value<'t>, bias: Value<'t>, eps: f64) -> Result<Value<'t>> {
        self.tape.same_tape(gain.tape)?;
        self.tape.same_tape(bias.tape)?;
        if eps <= 0.0 {
            return Err(SmarError::Contract(format!(
                "layer_norm eps must be positive, got {eps}"
            )));
        }
        let (shape, data, ng) = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id].value;
            let g = &nodes[gain.id].value;
            let b = &nodes[bias.id].value;
            let cols = x.view_cols();
            if x.rank() > 2 || g.shape() != [cols] || b.shape() != [cols] {
                return Err(SmarError::DimMismatch {
                    op: "layer_norm",
                    lhs: x.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            let mut out = x.data().to_vec();
            for chunk in out.chunks_mut(cols) {
                let mean = chunk.iter().sum::<f64>() / cols as f64;
                let var = chunk.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
                let inv = 1.0 / (var + eps).sqrt();
                for (j, v) in chunk.iter_mut().enumerate() {
                    *v = (*v - mean) * inv * g.data()[j] + b.data()[j];
                }
            }
            (
                x.shape().to_vec(),
                out,
                nodes[self.id].needs_grad || nodes[gain.id].needs_grad || nodes[bias.id].needs_grad,
            )
        };
        self.tape.commit(
            "layer_norm",
            shape,
            data,
            Op::LayerNorm {
                x: self.id,
                gain: gain.id,
                bias: bias.id,
                eps,
            },
            ng,
        )
    }

    /// GELU activation (tanh form).
    pub fn gelu(&self) -> Result<Value<'t>> {
        let (shape, data, ng) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id].value;
            (
                a.shape().to_vec(),
                a.data().iter().map(|&x| gelu_fwd(x)).collect(),
                nodes[self.id].needs_grad,
            )
        };
        self.tape
            .commit("gelu", shape, data, Op::Gelu { a: self.id }, ng)
    }

    pub fn sigmoid(&self) -> Result<Value<'t>> {
        let (shape, data, ng) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id].value;
            (
                a.shape().to_vec(),
                a.data().iter().map(|&x| sigmoid_fwd(x)).collect(),
                nodes[self.id].needs_grad,
            )
        };
        self.tape
            .commit("sigmoid", shape, data, Op::Sigmoid { a: self.id }, ng)
    }

    /// Elementwise binary cross-entropy on logits, stable for any magnitude:
    /// `max(z,0) - z*y + ln(1 + exp(-|z|))`.
    pub fn sigmoid_bce(&self, targets: &[f64]) -> Result<Value<'t>> {
        let (shape, data, ng) = {
            let nodes = self.tape.nodes.borrow();
            let z = &nodes[self.id].value;
            if z.numel() != targets.len() {
                return Err(SmarError::DimMismatch {
                    op: "sigmoid_bce",
                    lhs: z.shape().to_vec(),
                    rhs: vec![targets.len()],
                });
            }
            let data = z
                .data()
                .iter()
                .zip(targets)
                .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
                .collect();
            (z.shape().to_vec(), data, nodes[self.id].needs_grad)
        };
        self.tape.commit(
            "sigmoid_bce",
            shape,
            data,
            Op::SigmoidBce {
                logits: self.id,
                targets: targets.to_vec(),
            },
            ng,
        )
    }

    /// Scales a rank-1 vector to unit L2 norm. Inputs with norm below 1e-12
    /// are degenerate and rejected.
    pub fn l2_normalize(&self) -> Result<Value<'t>> {
        let (shape, data, ng) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id].value;
            if a.rank() != 1 {
                return Err(SmarError::BadShape {
                    op: "l2_normalize",
                    shape: a.shape().to_vec(),
                    detail: "expected rank-1".into(),
                });
            }
            let norm = a.l2_norm();
            if norm <= 1e-12 {
                return Err(SmarError::DegenerateVector { norm, eps: 1e-12 });
            }
            (
                a.shape().to_vec(),
                a.data().iter().map(|v| v / norm).collect(),
                nodes[self.id].needs_grad,
            )
        };
        self.tape
            .commit("l2_normalize", shape, data, Op::L2Normalize { a: self.id }, ng)
    }

    /// Extracts row `index` of a matrix as a rank-1 vector.
    pub fn row(&self, index: usize) -> Result<Value<'t>> {
        let (data, ng) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id].value;
            if a.rank() != 2 || index >= a.shape()[0] {
                return Err(SmarError::BadShape {
                    op: "row",
                    shape: a.shape().to_vec(),
                    detail: format!("row index {index} out of range"),
                });
            }
            (a.row(index).to_vec(), nodes[self.id].needs_grad)
        };
        let cols = data.len();
        self.tape.commit(
            "row",
            vec![cols],
            data,
            Op::Row {
                a: self.id,
                index,
            },
            ng,
        )
    }

    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Value<'t>> {
        let (cols, data, ng) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id].value;
            if a.rank() != 2 || start + len > a.shape()[0] || len == 0 {
                return Err(SmarError::BadShape {
                    op: "slice_rows",
                    shape: a.shape().to_vec(),
                    detail: format!("rows {start}..{} out of range", start + len),
                });
            }
            let cols = a.shape()[1];
            (
                cols,
                a.data()[start * cols..(start + len) * cols].to_vec(),
                nodes[self.id].needs_grad,
            )
        };
        self.tape.commit(
            "slice_rows",
            vec![len, cols],
            data,
            Op::SliceRows { a: self.id, start },
            ng,
        )
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Value<'t>> {
        let (rows, data, ng) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id].value;
            if a.rank() != 2 || start + len > a.shape()[1] || len == 0 {
                return Err(SmarError::BadShape {
                    op: "slice_cols",
                    shape: a.shape().to_vec(),
                    detail: format!("cols {start}..{} out of range", start + len),
                });
            }
            let rows = a.shape()[0];
            let cols = a.shape()[1];
            let mut out = vec![0.0; rows * len];
            for r in 0..rows {
                out[r * len..(r + 1) * len]
                    .copy_from_slice(&a.data()[r * cols + start..r * cols + start + len]);
            }
            (rows, out, nodes[self.id].needs_grad)
        };
        self.tape.commit(
            "slice_cols",
            vec![rows, len],
            data,
            Op::SliceCols { a: self.id, start },
            ng,
        )
    }

    /// Stacks `self` above `other` (both rank-2, equal column counts).
    pub fn concat_rows(&self, other: Value<'t>) -> Result<Value<'t>> {
        self.tape.same_tape(other.tape)?;
        let (rows, cols, data, ng) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id].value;
            let b = &nodes[other.id].value;
            if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[1] {
                return Err(SmarError::DimMismatch {
                    op: "concat_rows",
                    lhs: a.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                });
            }
            let mut data = a.data().to_vec();
            data.extend_from_slice(b.data());
            (
                a.shape()[0] + b.shape()[0],
                a.shape()[1],
                data,
                nodes[self.id].needs_grad || nodes[other.id].needs_grad,
            )
        };
        self.tape.commit(
            "concat_rows",
            vec![rows, cols],
            data,
            Op::ConcatRows {
                a: self.id,
                b: other.id,
            },
            ng,
        )
    }

    /// Gathers rows of an embedding table by id; backward scatter-adds.
    pub fn gather_rows(&self, ids: &[usize]) -> Result<Value<'t>> {
        let (cols, data, ng) = {
            let nodes = self.tape.nodes.borrow();
            let t = &nodes[self.id].value;
            if t.rank() != 2 {
                return Err(SmarError::BadShape {
                    op: "gather_rows",
                    shape: t.shape().to_vec(),
                    detail: "expected rank-2 table".into(),
                });
            }
            if ids.is_empty() {
                return Err(SmarError::Empty("gather_rows with no ids".into()));
            }
            let rows = t.shape()[0];
            let cols = t.shape()[1];
            let mut data = Vec::with_capacity(ids.len() * cols);
            for &id in ids {
                if id >= rows {
                    return Err(SmarError::VocabId {
                        id: id as u32,
                        vocab_size: rows,
                    });
                }
                data.extend_from_slice(t.row(id));
            }
            (cols, data, nodes[self.id].needs_grad)
        };
        self.tape.commit(
            "gather_rows",
            vec![ids.len(), cols],
            data,
            Op::GatherRows {
                table: self.id,
                ids: ids.to_vec(),
            },
            ng,
        )
    }

    /// Main diagonal of a square matrix.
    pub fn diag(&self) -> Result<Value<'t>> {
        let (n, data, ng) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id].value;
            if a.rank() != 2 || a.shape()[0] != a.shape()[1] {
                return Err(SmarError::BadShape {
                    op: "diag",
                    shape: a.shape().to_vec(),
                    detail: "expected square matrix".into(),
                });
            }
            let n = a.shape()[0];
            (
                n,
                (0..n).map(|i| a.at(i, i)).collect(),
                nodes[self.id].needs_grad,
            )
        };
        self.tape
            .commit("diag", vec![n], data, Op::Diag { a: self.id }, ng)
    }

    pub fn sum(&self) -> Result<Value<'t>> {
        let (s, ng) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id].value;
            (a.data().iter().sum::<f64>(), nodes[self.id].needs_grad)
        };
        self.tape
            .commit("sum", vec![1], vec![s], Op::Sum { a: self.id }, ng)
    }

    pub fn mean(&self) -> Result<Value<'t>> {
        let (s, ng) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id].value;
            (
                a.data().iter().sum::<f64>() / a.numel() as f64,
                nodes[self.id].needs_grad,
            )
        };
        self.tape
            .commit("mean", vec![1], vec![s], Op::Mean { a: self.id }, ng)
    }

    pub fn dot(&self, other: Value<'t>) -> Result<Value<'t>> {
        self.tape.same_tape(other.tape)?;
        let (s, ng) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id].value;
            let b = &nodes[other.id].value;
            if a.rank() != 1 || b.rank() != 1 || a.numel() != b.numel() {
                return Err(SmarError::DimMismatch {
                    op: "dot",
                    lhs: a.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                });
            }
            (
                a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum(),
                nodes[self.id].needs_grad || nodes[other.id].needs_grad,
            )
        };
        self.tape.commit(
            "dot",
            vec![1],
            vec![s],
            Op::Dot {
                a: self.id,
                b: other.id,
            },
            ng,
        )
    }

    pub fn reshape(&self, new_shape: Vec<usize>) -> Result<Value<'t>> {
        let (data, ng) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id].value;
            let numel: usize = new_shape.iter().product();
            if numel != a.numel() {
                return Err(SmarError::BadShape {
                    op: "reshape",
                    shape: new_shape,
                    detail: format!("element count differs from {:?}", a.shape()),
                });
            }
            (a.data().to_vec(), nodes[self.id].needs_grad)
        };
        self.tape
            .commit("reshape", new_shape, data, Op::Reshape { a: self.id }, ng)
    }

    /// Adds `MASK_NEG` to the columns whose mask entry is false; used to
    /// exclude keys from attention. Masked columns end up with exactly zero
    /// softmax weight.
    pub fn mask_cols(&self, key_mask: &[bool]) -> Result<Value<'t>> {
        if key_mask.iter().all(|&m| m) {
            return Ok(*self);
        }
        let row: Vec<f64> = key_mask
            .iter()
            .map(|&m| if m { 0.0 } else { MASK_NEG })
            .collect();
        let mask = self.tape.constant(&Tensor::vector(row)?);
        self.add_row(mask)
    }
}

fn grad_buf<'g>(
    nodes: &[Node],
    grads: &'g mut [Option<Vec<f64>>],
    target: usize,
) -> Option<&'g mut Vec<f64>> {
    if !nodes[target].needs_grad {
        return None;
    }
    let numel = nodes[target].value.numel();
    Some(grads[target].get_or_insert_with(|| vec![0.0; numel]))
}

fn backprop_op(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    macro_rules! into {
        ($target:expr, $body:expr) => {
            if let Some(buf) = grad_buf(nodes, grads, $target) {
                #[allow(clippy::redundant_closure_call)]
                ($body)(buf);
            }
        };
    }

    match &nodes[id].op {
        Op::Leaf | Op::Constant => {}
        Op::Matmul { a, b } => {
            let av = &nodes[*a].value;
            let bv = &nodes[*b].value;
            let (m, n, p) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
            into!(*a, |buf: &mut Vec<f64>| matmul_nt(
                g,
                bv.data(),
                m,
                p,
                n,
                buf
            ));
            into!(*b, |buf: &mut Vec<f64>| matmul_tn(
                av.data(),
                g,
                m,
                n,
                p,
                buf
            ));
        }
        Op::Transpose { a } => {
            let (c, r) = {
                let s = nodes[id].value.shape();
                (s[0], s[1])
            };
            into!(*a, |buf: &mut Vec<f64>| {
                for i in 0..c {
                    for j in 0..r {
                        buf[j * c + i] += g[i * r + j];
                    }
                }
            });
        }
        Op::Add { a, b } => {
            into!(*a, |buf: &mut Vec<f64>| add_assign(buf, g));
            into!(*b, |buf: &mut Vec<f64>| add_assign(buf, g));
        }
        Op::Sub { a, b } => {
            into!(*a, |buf: &mut Vec<f64>| add_assign(buf, g));
            into!(*b, |buf: &mut Vec<f64>| sub_assign(buf, g));
        }
        Op::MulElem { a, b } => {
            let av = nodes[*a].value.data();
            let bv = nodes[*b].value.data();
            into!(*a, |buf: &mut Vec<f64>| {
                for ((o, gi), bi) in buf.iter_mut().zip(g).zip(bv) {
                    *o += gi * bi;
                }
            });
            into!(*b, |buf: &mut Vec<f64>| {
                for ((o, gi), ai) in buf.iter_mut().zip(g).zip(av) {
                    *o += gi * ai;
                }
            });
        }
        Op::Scale { a, c } => {
            into!(*a, |buf: &mut Vec<f64>| {
                for (o, gi) in buf.iter_mut().zip(g) {
                    *o += gi * c;
                }
            });
        }
        Op::Neg { a } => {
            into!(*a, |buf: &mut Vec<f64>| sub_assign(buf, g));
        }
        Op::AddRow { m, row } => {
            let cols = nodes[*row].value.numel();
            into!(*m, |buf: &mut Vec<f64>| add_assign(buf, g));
            into!(*row, |buf: &mut Vec<f64>| {
                for chunk in g.chunks(cols) {
                    add_assign(buf, chunk);
                }
            });
        }
        Op::RowSoftmax { a } => {
            let y = nodes[id].value.data();
            let cols = nodes[id].value.view_cols();
            into!(*a, |buf: &mut Vec<f64>| {
                for r in 0..y.len() / cols {
                    let ys = &y[r * cols..(r + 1) * cols];
                    let gs = &g[r * cols..(r + 1) * cols];
                    let inner: f64 = ys.iter().zip(gs).map(|(yi, gi)| yi * gi).sum();
                    let out = &mut buf[r * cols..(r + 1) * cols];
                    for j in 0..cols {
                        out[j] += ys[j] * (gs[j] - inner);
                    }
                }
            });
        }
        Op::LogSoftmaxRows { a } => {
            let y = nodes[id].value.data();
            let cols = nodes[id].value.view_cols();
            into!(*a, |buf: &mut Vec<f64>| {
                for r in 0..y.len() / cols {
                    let ys = &y[r * cols..(r + 1) * cols];
                    let gs = &g[r * cols..(r + 1) * cols];
                    let gsum: f64 = gs.iter().sum();
                    let out = &mut buf[r * cols..(r + 1) * cols];
                    for j in 0..cols {
                        out[j] += gs[j] - ys[j].exp() * gsum;
                    }
                }
            });
        }
        Op::LayerNorm { x, gain, bias, eps } => {
            let xv = nodes[*x].value.data();
            let gv = nodes[*gain].value.data();
            let cols = nodes[*gain].value.numel();
            let rows = xv.len() / cols;
            for r in 0..rows {
                let xs = &xv[r * cols..(r + 1) * cols];
                let gs = &g[r * cols..(r + 1) * cols];
                let mean = xs.iter().sum::<f64>() / cols as f64;
                let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
                let inv = 1.0 / (var + eps).sqrt();
                let xhat: Vec<f64> = xs.iter().map(|v| (v - mean) * inv).collect();
                into!(*gain, |buf: &mut Vec<f64>| {
                    for j in 0..cols {
                        buf[j] += gs[j] * xhat[j];
                    }
                });
                into!(*bias, |buf: &mut Vec<f64>| add_assign(buf, gs));
                into!(*x, |buf: &mut Vec<f64>| {
                    let d: Vec<f64> = (0..cols).map(|j| gs[j] * gv[j]).collect();
                    let d_mean = d.iter().sum::<f64>() / cols as f64;
                    let dx_mean =
                        d.iter().zip(&xhat).map(|(di, xi)| di * xi).sum::<f64>() / cols as f64;
                    let out = &mut buf[r * cols..(r + 1) * cols];
                    for j in 0..cols {
                        out[j] += inv * (d[j] - d_mean - xhat[j] * dx_mean);
                    }
                });
            }
        }
        Op::Gelu { a } => {
            let xv = nodes[*a].value.data();
            into!(*a, |buf: &mut Vec<f64>| {
                for (i, (&x, &gi)) in xv.iter().zip(g).enumerate() {
                    buf[i] += gi * gelu_grad(x);
                }
            });
        }
        Op::Sigmoid { a } => {
            let y = nodes[id].value.data();
            into!(*a, |buf: &mut Vec<f64>| {
                for ((o, gi), yi) in buf.iter_mut().zip(g).zip(y) {
                    *o += gi * yi * (1.0 - yi);
                }
            });
        }
        Op::SigmoidBce { logits, targets } => {
            let zv = nodes[*logits].value.data();
            into!(*logits, |buf: &mut Vec<f64>| {
                for i in 0..zv.len() {
                    buf[i] += g[i] * (sigmoid_fwd(zv[i]) - targets[i]);
                }
            });
        }
        Op::L2Normalize { a } => {
            let y = nodes[id].value.data();
            let norm = nodes[*a].value.l2_norm();
            into!(*a, |buf: &mut Vec<f64>| {
                let inner: f64 = y.iter().zip(g).map(|(yi, gi)| yi * gi).sum();
                for j in 0..y.len() {
                    buf[j] += (g[j] - y[j] * inner) / norm;
                }
            });
        }
        Op::Row { a, index } => {
            let cols = nodes[id].value.numel();
            into!(*a, |buf: &mut Vec<f64>| {
                add_assign(&mut buf[index * cols..(index + 1) * cols], g);
            });
        }
        Op::SliceRows { a, start } => {
            let cols = nodes[id].value.shape()[1];
            into!(*a, |buf: &mut Vec<f64>| {
                add_assign(&mut buf[start * cols..start * cols + g.len()], g);
            });
        }
        Op::SliceCols { a, start } => {
            let rows = nodes[id].value.shape()[0];
            let len = nodes[id].value.shape()[1];
            let src_cols = nodes[*a].value.shape()[1];
            into!(*a, |buf: &mut Vec<f64>| {
                for r in 0..rows {
                    add_assign(
                        &mut buf[r * src_cols + start..r * src_cols + start + len],
                        &g[r * len..(r + 1) * len],
                    );
                }
            });
        }
        Op::ConcatRows { a, b } => {
            let a_len = nodes[*a].value.numel();
            into!(*a, |buf: &mut Vec<f64>| add_assign(buf, &g[..a_len]));
            into!(*b, |buf: &mut Vec<f64>| add_assign(buf, &g[a_len..]));
        }
        Op::ConcatCols { parts } => {
            let rows = nodes[id].value.shape()[0];
            let total = nodes[id].value.shape()[1];
            let mut off = 0usize;
            for p in parts {
                let c = nodes[*p].value.shape()[1];
                into!(*p, |buf: &mut Vec<f64>| {
                    for r in 0..rows {
                        add_assign(
                            &mut buf[r * c..(r + 1) * c],
                            &g[r * total + off..r * total + off + c],
                        );
                    }
                });
                off += c;
            }
        }
        Op::StackRows { parts } => {
            let cols = nodes[id].value.shape()[1];
            for (r, p) in parts.iter().enumerate() {
                into!(*p, |buf: &mut Vec<f64>| {
                    add_assign(buf, &g[r * cols..(r + 1) * cols]);
                });
            }
        }
        Op::GatherRows { table, ids } => {
            let cols = nodes[id].value.shape()[1];
            into!(*table, |buf: &mut Vec<f64>| {
                for (r, &row_id) in ids.iter().enumerate() {
                    add_assign(
                        &mut buf[row_id * cols..(row_id + 1) * cols],
                        &g[r * cols..(r + 1) * cols],
                    );
                }
            });
        }
        Op::Diag { a } => {
            let n = nodes[id].value.numel();
            into!(*a, |buf: &mut Vec<f64>| {
                for i in 0..n {
                    buf[i * n + i] += g[i];
                }
            });
        }
        Op::Sum { a } => {
            into!(*a, |buf: &mut Vec<f64>| {
                for o in buf.iter_mut() {
                    *o += g[0];
                }
            });
        }
        Op::Mean { a } => {
            let n = nodes[*a].value.numel() as f64;
            into!(*a, |buf: &mut Vec<f64>| {
                for o in buf.iter_mut() {
                    *o += g[0] / n;
                }
            });
        }
        Op::Dot { a, b } => {
            let av = nodes[*a].value.data();
            let bv = nodes[*b].value.data();
            into!(*a, |buf: &mut Vec<f64>| {
                for (o, bi) in buf.iter_mut().zip(bv) {
                    *o += g[0] * bi;
                }
            });
            into!(*b, |buf: &mut Vec<f64>| {
                for (o, ai) in buf.iter_mut().zip(av) {
                    *o += g[0] * ai;
                }
            });
        }
        Op::Reshape { a } => {
            into!(*a, |buf: &mut Vec<f64>| add_assign(buf, g));
        }
    }
}

fn add_assign(out: &mut [f64], src: &[f64]) {
    for (o, s) in out.iter_mut().zip(src) {
        *o += s;
    }
}

fn sub_assign(out: &mut [f64], src: &[f64]) {
    for (o, s) in out.iter_mut().zip(src) {
        *o -= s;
    }
}

/// out[m×p] += a[m×n] · b[n×p]
pub(crate) fn matmul_nn(a: &[f64], b: &[f64], m: usize, n: usize, p: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        let orow = &mut out[i * p..(i + 1) * p];
        for (k, &aik) in arow.iter().enumerate() {
            let brow = &b[k * p..(k + 1) * p];
            for j in 0..p {
                orow[j] += aik * brow[j];
            }
        }
    }
}

/// out[m×n] += c[m×p] · b[n×p]ᵀ
fn matmul_nt(c: &[f64], b: &[f64], m: usize, p: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let crow = &c[i * p..(i + 1) * p];
        let orow = &mut out[i * n..(i + 1) * n];
        for (k, o) in orow.iter_mut().enumerate() {
            let brow = &b[k * p..(k + 1) * p];
            let mut s = 0.0;
            for j in 0..p {
                s += crow[j] * brow[j];
            }
            *o += s;
        }
    }
}

/// out[n×p] += a[m×n]ᵀ · c[m×p]
fn matmul_tn(a: &[f64], c: &[f64], m: usize, n: usize, p: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        let crow = &c[i * p..(i + 1) * p];
        for (k, &aik) in arow.iter().enumerate() {
            let orow = &mut out[k * p..(k + 1) * p];
            for j in 0..p {
                orow[j] += aik * crow[j];
            }
        }
    }
}

fn softmax_row_in_place(row: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

fn sigmoid_fwd(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn gelu_fwd(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}
