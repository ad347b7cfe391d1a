//! Dense row-major `f64` arrays and the couple of bulk operations everything
//! else is built from.
//!
//! Accumulation order is fixed (ascending index of the contracted dimension)
//! so seeded runs replay bit-identically regardless of build flags.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense multi-dimensional array, row-major, 64-bit floats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Build a tensor, validating element count and finiteness.
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {:?} holds {} elements, got {}",
                shape,
                expect,
                data.len()
            )));
        }
        let t = Tensor { shape, data };
        t.check_finite("Tensor::new")?;
        Ok(t)
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.shape[axis]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Row `r` of a 2-D tensor.
    pub fn row(&self, r: usize) -> &[f64] {
        debug_assert_eq!(self.ndim(), 2);
        let cols = self.shape[1];
        &self.data[r * cols..(r + 1) * cols]
    }

    /// Number of rows when viewed as `[rows, rest...]`.
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    /// Elements per row when viewed as `[rows, rest...]`.
    pub fn row_len(&self) -> usize {
        if self.shape.is_empty() {
            0
        } else {
            self.shape[1..].iter().product()
        }
    }

    /// Reinterpret the same data under a new shape.
    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        let expect: usize = shape.iter().product();
        if expect != self.data.len() {
            return Err(Error::ShapeMismatch(format!(
                "cannot reshape {} elements into {:?}",
                self.data.len(),
                shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn check_finite(&self, what: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(what.to_string()))
        }
    }

    /// Matrix product of two 2-D tensors. The inner loop accumulates each
    /// output element over the contracted index in ascending order.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        if self.ndim() != 2 || rhs.ndim() != 2 {
            return Err(Error::ShapeMismatch(format!(
                "matmul needs 2-D operands, got {:?} x {:?}",
                self.shape, rhs.shape
            )));
        }
        let (m, k) = (self.shape[0], self.shape[1]);
        let (k2, n) = (rhs.shape[0], rhs.shape[1]);
        if k != k2 {
            return Err(Error::ShapeMismatch(format!(
                "matmul inner dims disagree: {:?} x {:?}",
                self.shape, rhs.shape
            )));
        }
        let a = &self.data;
        let b = &rhs.data;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            let orow = &mut out[i * n..(i + 1) * n];
            for (p, &av) in arow.iter().enumerate() {
                let brow = &b[p * n..(p + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        Tensor::new(vec![m, n], out)
    }

    /// Transpose of a 2-D tensor.
    pub fn transposed(&self) -> Result<Tensor> {
        if self.ndim() != 2 {
            return Err(Error::ShapeMismatch(format!(
                "transpose needs a 2-D tensor, got {:?}",
                self.shape
            )));
        }
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Tensor {
            shape: vec![n, m],
            data: out,
        })
    }

    /// Elementwise sum.
    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        if self.shape != rhs.shape {
            return Err(Error::ShapeMismatch(format!(
                "add: {:?} vs {:?}",
                self.shape, rhs.shape
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&rhs.data)
            .map(|(a, b)| a + b)
            .collect();
        Tensor::new(self.shape.clone(), data)
    }

    /// `self += scale * rhs`, shapes must agree.
    pub fn add_scaled_assign(&mut self, rhs: &Tensor, scale: f64) -> Result<()> {
        if self.shape != rhs.shape {
            return Err(Error::ShapeMismatch(format!(
                "add_scaled_assign: {:?} vs {:?}",
                self.shape, rhs.shape
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&rhs.data) {
            *a += scale * b;
        }
        self.check_finite("add_scaled_assign")
    }

    /// Elementwise scaling, consuming self.
    pub fn scaled(mut self, factor: f64) -> Result<Tensor> {
        for v in &mut self.data {
            *v *= factor;
        }
        self.check_finite("scaled")?;
        Ok(self)
    }

    /// Gather rows of a `[n, rest...]` tensor into a new `[idx.len(), rest...]` tensor.
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Tensor> {
        if self.shape.is_empty() {
            return Err(Error::ShapeMismatch("gather_rows on 0-d tensor".into()));
        }
        let stride = self.row_len();
        let n = self.shape[0];
        let mut data = Vec::with_capacity(idx.len() * stride);
        for &i in idx {
            if i >= n {
                return Err(Error::InvalidArgument(format!(
                    "gather_rows: index {i} out of range 0..{n}"
                )));
            }
            data.extend_from_slice(&self.data[i * stride..(i + 1) * stride]);
        }
        let mut shape = self.shape.clone();
        shape[0] = idx.len();
        Ok(Tensor { shape, data })
    }
}

/// All-pairs squared Euclidean distances between the rows of `x` `[n, d]` and
/// `y` `[m, d]`. Computed by direct subtraction, never the expanded
/// `|x|^2 + |y|^2 - 2xy` form, so entries cannot go negative from round-off.
pub fn pairwise_sq_dist(x: &Tensor, y: &Tensor) -> Result<Tensor> {
    if x.ndim() != 2 || y.ndim() != 2 || x.dim(1) != y.dim(1) {
        return Err(Error::ShapeMismatch(format!(
            "pairwise_sq_dist: {:?} vs {:?}",
            x.shape(),
            y.shape()
        )));
    }
    let (n, d) = (x.dim(0), x.dim(1));
    let m = y.dim(0);
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let xi = x.row(i);
        for j in 0..m {
            let yj = y.row(j);
            let mut acc = 0.0;
            for c in 0..d {
                let diff = xi[c] - yj[c];
                acc += diff * diff;
            }
            out[i * m + j] = acc;
        }
    }
    Tensor::new(vec![n, m], out)
}
