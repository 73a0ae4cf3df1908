use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::scalar::Scalar;

/// Dense row-major array.
///
/// Whether a tensor takes part in differentiation is decided when it is placed
/// on a [`Tape`](super::Tape): [`Tape::param`](super::Tape::param) marks it as
/// requiring gradients, [`Tape::constant`](super::Tape::constant) does not.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(invalid(format!("zero-sized dimension in shape {shape:?}")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); n],
        }
    }

    pub fn filled(shape: &[usize], v: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![v; n],
        }
    }

    pub fn scalar(v: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn vector(data: Vec<T>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// Builds a `[rows.len() × width]` matrix. All rows must share a width.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let width = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != width) {
            return Err(invalid("ragged rows"));
        }
        let data = rows.iter().flatten().copied().collect();
        Self::new(vec![rows.len(), width], data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Leading dimension; 1 for a 1-d tensor.
    pub fn rows(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[0]
        } else {
            1
        }
    }

    /// Trailing dimension.
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("non-empty shape")
    }

    pub fn row(&self, r: usize) -> &[T] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn at(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols() + c]
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.shape,
                rhs: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Selects rows of a matrix (or entries of a vector).
    pub fn select_rows(&self, idx: &[usize]) -> Result<Self> {
        let n = self.rows_for_select();
        let width = self.numel() / n;
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(invalid(format!("row index {bad} out of range for {n} rows")));
        }
        if idx.is_empty() {
            return Err(invalid("empty row selection"));
        }
        let mut data = Vec::with_capacity(idx.len() * width);
        for &i in idx {
            data.extend_from_slice(&self.data[i * width..(i + 1) * width]);
        }
        let mut shape = self.shape.clone();
        shape[0] = idx.len();
        Ok(Self { shape, data })
    }

    pub(crate) fn rows_for_select(&self) -> usize {
        self.shape[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Plain matrix product `[n×k]·[k×m]`.
    pub fn matmul(&self, rhs: &Self) -> Result<Self> {
        if self.shape.len() != 2 || rhs.shape.len() != 2 || self.shape[1] != rhs.shape[0] {
            return Err(Error::Shape {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: rhs.shape.clone(),
            });
        }
        let (n, k, m) = (self.shape[0], self.shape[1], rhs.shape[1]);
        let mut out = vec![T::zero(); n * m];
        matmul_into(&self.data, &rhs.data, &mut out, n, k, m);
        Ok(Self {
            shape: vec![n, m],
            data: out,
        })
    }

    pub fn transpose(&self) -> Result<Self> {
        if self.shape.len() != 2 {
            return Err(invalid(format!("transpose of shape {:?}", self.shape)));
        }
        let (n, m) = (self.shape[0], self.shape[1]);
        let mut data = vec![T::zero(); n * m];
        for i in 0..n {
            for j in 0..m {
                data[j * n + i] = self.data[i * m + j];
            }
        }
        Ok(Self {
            shape: vec![m, n],
            data,
        })
    }
}

/// `out[n×m] += a[n×k] · b[k×m]`, i-k-j loop order.
pub(crate) fn matmul_into<T: Scalar>(a: &[T], b: &[T], out: &mut [T], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}
