//! Dense row-major f64 tensors. Rank 1 or 2 only; every constructor and op
//! validates shapes and rejects non-finite entries instead of letting NaN
//! propagate.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.len() > 2 {
            return Err(Error::shape(
                "tensor",
                format!("rank must be 1 or 2, got shape {shape:?}"),
            ));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {numel} values, got {}", data.len()),
            ));
        }
        let t = Tensor {
            shape,
            data,
            requires_grad: false,
        };
        t.ensure_finite("tensor")?;
        Ok(t)
    }

    pub fn scalar(v: f64) -> Result<Self> {
        Tensor::new(vec![1, 1], vec![v])
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        let n = data.len();
        Tensor::new(vec![n], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    /// Shape-checked but not finiteness-checked. For graph ops that run
    /// their own finiteness check under the op's name; everything else
    /// should go through `matrix`.
    pub(crate) fn matrix_lenient(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape [{rows}, {cols}] needs {} values, got {}", rows * cols, data.len()),
            ));
        }
        Ok(Tensor {
            shape: vec![rows, cols],
            data,
            requires_grad: false,
        })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            shape: vec![rows, cols],
            data: vec![0.0; rows * cols],
            requires_grad: false,
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::shape("tensor", "from_rows got no rows"));
        }
        let cols = rows[0].len();
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("tensor", "from_rows got ragged rows"));
        }
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            data.extend_from_slice(r);
        }
        Tensor::new(vec![rows.len(), cols], data)
    }

    pub fn with_requires_grad(mut self, yes: bool) -> Self {
        self.requires_grad = yes;
        self
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    /// (rows, cols) view; a rank-1 tensor of length n reads as 1 x n.
    pub fn dims2(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [n] => (1, *n),
            [m, n] => (*m, *n),
            _ => unreachable!("rank validated at construction"),
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access for in-place parameter updates. The caller is
    /// responsible for keeping entries finite.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let (rows, cols) = self.dims2();
        assert!(r < rows, "row {r} out of range ({rows} rows)");
        &self.data[r * cols..(r + 1) * cols]
    }

    pub fn rows_iter(&self) -> impl Iterator<Item = &[f64]> {
        let (_, cols) = self.dims2();
        self.data.chunks_exact(cols)
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor with {} elements", self.data.len());
        self.data[0]
    }

    pub(crate) fn ensure_finite(&self, op: &'static str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite { op })
        }
    }
}
