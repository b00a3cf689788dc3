//! Dense row-major tensors. Values are immutable after construction; every
//! constructor rejects NaN/Inf and shape/length disagreements.

use crate::error::{Result, SmarError};

/// Dense 64-bit float tensor, row-major. Rank 1 and 2 cover everything the
/// towers and objectives need; higher ranks are rejected by the ops that
/// cannot handle them.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad_enabled: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(SmarError::BadShape {
                op: "tensor_new",
                shape,
                detail: "zero-sized dimension".into(),
            });
        }
        if numel != data.len() {
            return Err(SmarError::BadShape {
                op: "tensor_new",
                shape,
                detail: format!("shape product {numel} != data length {}", data.len()),
            });
        }
        check_finite("tensor_new", &data)?;
        Ok(Tensor {
            shape,
            data,
            grad_enabled: false,
        })
    }

    pub fn scalar(v: f64) -> Result<Self> {
        Tensor::new(vec![1], vec![v])
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        let n = data.len();
        Tensor::new(vec![n], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
            grad_enabled: false,
        }
    }

    /// Internal constructor for data already validated by the caller.
    pub(crate) fn from_raw_unchecked(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            shape,
            data,
            grad_enabled: false,
        }
    }

    pub fn with_grad(mut self) -> Self {
        self.grad_enabled = true;
        self
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Row count when viewed as a matrix; a rank-1 tensor is a single row.
    pub fn view_rows(&self) -> usize {
        match self.shape.len() {
            1 => 1,
            2 => self.shape[0],
            _ => 0,
        }
    }

    /// Column count when viewed as a matrix.
    pub fn view_cols(&self) -> usize {
        match self.shape.len() {
            1 => self.shape[0],
            2 => self.shape[1],
            _ => 0,
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.view_cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.view_cols() + c]
    }

    pub fn get(&self, i: usize) -> f64 {
        self.data[i]
    }

    /// Sole scalar value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(SmarError::Contract(format!(
                "expected scalar tensor, got shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Element perturbation used by the finite-difference checker. Returns a
    /// new tensor; existing values stay immutable.
    pub fn perturbed(&self, index: usize, delta: f64) -> Result<Self> {
        let mut data = self.data.clone();
        data[index] += delta;
        let mut t = Tensor::new(self.shape.clone(), data)?;
        t.grad_enabled = self.grad_enabled;
        Ok(t)
    }
}

pub(crate) fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    for (i, v) in data.iter().enumerate() {
        if !v.is_finite() {
            return Err(SmarError::NonFinite { op, index: i });
        }
    }
    Ok(())
}
