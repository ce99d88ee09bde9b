//! Dense row-major `f64` tensors.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// A dense n-dimensional array of `f64` values in row-major order.
///
/// `dims` may be empty, in which case the tensor is a scalar holding a
/// single value. `grad`, when present, always has the same length as `data`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(dims: &[usize], data: Vec<f64>) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::contract(format!("tensor dims must be positive, got {dims:?}")));
        }
        let numel: usize = dims.iter().product();
        if numel != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                lhs: dims.to_vec(),
                rhs: vec![data.len()],
            });
        }
        Ok(Self {
            dims: dims.to_vec(),
            data,
            grad: None,
        })
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            dims: Vec::new(),
            data: vec![value],
            grad: None,
        }
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Self::full(dims, 0.0)
    }

    pub fn ones(dims: &[usize]) -> Self {
        Self::full(dims, 1.0)
    }

    pub fn full(dims: &[usize], value: f64) -> Self {
        assert!(dims.iter().all(|&d| d > 0), "tensor dims must be positive");
        let numel = dims.iter().product();
        Self {
            dims: dims.to_vec(),
            data: vec![value; numel],
            grad: None,
        }
    }

    /// Samples i.i.d. `Normal(0, std²)` entries.
    pub fn randn<R: Rng + ?Sized>(dims: &[usize], std: f64, rng: &mut R) -> Self {
        let mut t = Self::zeros(dims);
        if std > 0.0 {
            let normal = Normal::new(0.0, std).expect("finite positive std");
            for v in &mut t.data {
                *v = normal.sample(rng);
            }
        }
        t
    }

    /// Samples i.i.d. `Uniform(lo, hi)` entries.
    pub fn uniform<R: Rng + ?Sized>(dims: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let mut t = Self::zeros(dims);
        for v in &mut t.data {
            *v = rng.random_range(lo..hi);
        }
        t
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<f64>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(Error::Shape {
                op: "set_grad",
                lhs: self.dims.clone(),
                rhs: vec![grad.len()],
            });
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Returns the single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor with {} elements", self.data.len());
        self.data[0]
    }

    pub fn reshape(mut self, dims: &[usize]) -> Result<Self> {
        let numel: usize = dims.iter().product();
        if numel != self.data.len() || dims.contains(&0) {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.dims.clone(),
                rhs: dims.to_vec(),
            });
        }
        self.dims = dims.to_vec();
        Ok(self)
    }

    /// Row `index` of a rank-2 tensor as a rank-1 tensor.
    pub fn row(&self, index: usize) -> Result<Tensor> {
        let (rows, cols) = self.as_matrix("row")?;
        if index >= rows {
            return Err(Error::contract(format!("row {index} out of range for {rows} rows")));
        }
        Tensor::new(&[cols], self.data[index * cols..(index + 1) * cols].to_vec())
    }

    /// Interprets the tensor as a `rows × cols` matrix. Rank-1 tensors are
    /// treated as a single row.
    pub fn as_matrix(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.dims.as_slice() {
            [n] => Ok((1, *n)),
            [r, c] => Ok((*r, *c)),
            _ => Err(Error::Shape {
                op,
                lhs: self.dims.clone(),
                rhs: vec![],
            }),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Euclidean norm of `self - other`.
    pub fn l2_distance(&self, other: &Tensor) -> Result<f64> {
        if self.dims != other.dims {
            return Err(Error::Shape {
                op: "l2_distance",
                lhs: self.dims.clone(),
                rhs: other.dims.clone(),
            });
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt())
    }

    /// True when dims and every value match bit-for-bit.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.dims == other.dims
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// `a[m×k] · b[k×n]` on raw row-major buffers.
pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
    c
}

/// `a[m×k] · b[n×k]ᵀ`.
pub(crate) fn matmul_a_bt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            c[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    c
}

/// `a[k×m]ᵀ · b[k×n]`.
pub(crate) fn matmul_at_b(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &aval) in arow.iter().enumerate() {
            if aval == 0.0 {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += aval * bv;
            }
        }
    }
    c
}
