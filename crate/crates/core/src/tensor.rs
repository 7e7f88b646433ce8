//! Dense row-major `f32` tensors.
//!
//! Only the handful of operations the encoder and the prompt learner need are
//! provided. Every reduction runs in a fixed left-to-right order so results are
//! bit-identical between runs and independent of thread scheduling.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    /// Builds a tensor from external data, rejecting bad shapes and non-finite values.
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        check_shape(&shape)?;
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(Error::dim(format!("shape {shape:?} needs {expected} values, got {}", data.len())));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!("non-finite value at flat index {pos}")));
        }
        Ok(Self { shape, data })
    }

    /// Internal constructor for values produced by our own arithmetic.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f32>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![0.0; n] }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f32) -> Self {
        let n: usize = shape.iter().product();
        Self { shape: shape.to_vec(), data: (0..n).map(&mut f).collect() }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(&[n, n], |i| if i / n == i % n { 1.0 } else { 0.0 })
    }

    pub fn matrix(rows: &[&[f32]]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::dim("ragged matrix rows"));
        }
        Self::new(vec![r, c], rows.concat())
    }

    pub fn vector(values: &[f32]) -> Result<Self> {
        Self::new(vec![values.len()], values.to_vec())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Number of rows of a matrix (first dimension).
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Row width: product of every dimension after the first.
    pub fn cols(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub(crate) fn row_mut(&mut self, i: usize) -> &mut [f32] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn at(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.cols() + j]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        check_shape(shape)?;
        if shape.iter().product::<usize>() != self.len() {
            return Err(Error::dim(format!("cannot reshape {:?} into {shape:?}", self.shape)));
        }
        Ok(Self { shape: shape.to_vec(), data: self.data.clone() })
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Self> {
        if self.rank() < 1 || start >= end || end > self.rows() {
            return Err(Error::dim(format!("row range {start}..{end} out of {:?}", self.shape)));
        }
        let c = self.cols();
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Ok(Self { shape, data: self.data[start * c..end * c].to_vec() })
    }

    /// Gathers the listed rows into a new matrix.
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::Empty("gather_rows with no indices".into()));
        }
        let n = self.rows();
        let c = self.cols();
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            if i >= n {
                return Err(Error::dim(format!("row {i} out of {n}")));
            }
            data.extend_from_slice(&self.data[i * c..(i + 1) * c]);
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Ok(Self { shape, data })
    }

    /// Stacks matrices with equal row width along the first axis.
    pub fn concat_rows(parts: &[&Tensor]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::Empty("concat of nothing".into()))?;
        let c = first.cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            if p.rank() != 2 || p.cols() != c {
                return Err(Error::dim(format!("cannot stack {:?} under width {c}", p.shape)));
            }
            rows += p.rows();
            data.extend_from_slice(&p.data);
        }
        Ok(Self { shape: vec![rows, c], data })
    }

    pub fn transpose(&self) -> Result<Self> {
        if self.rank() != 2 {
            return Err(Error::dim(format!("transpose needs a matrix, got {:?}", self.shape)));
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Self { shape: vec![c, r], data: out })
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.same_shape(other, "add")?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Ok(Self { shape: self.shape.clone(), data })
    }

    pub fn sub(&self, other: &Tensor) -> Result<Self> {
        self.same_shape(other, "sub")?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Ok(Self { shape: self.shape.clone(), data })
    }

    pub fn scale(&self, alpha: f32) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|v| v * alpha).collect() }
    }

    /// `self += other`, in place.
    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        self.same_shape(other, "add_assign")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// `self += alpha * other`, in place.
    pub fn scaled_add(&mut self, alpha: f32, other: &Tensor) -> Result<()> {
        self.same_shape(other, "scaled_add")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn dot(&self, other: &Tensor) -> Result<f32> {
        if self.len() != other.len() {
            return Err(Error::dim("dot of unequal lengths"));
        }
        Ok(dot(&self.data, &other.data))
    }

    pub fn l2_norm(&self) -> f32 {
        dot(&self.data, &self.data).sqrt()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn same_shape(&self, other: &Tensor, op: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::dim(format!("{op}: {:?} vs {:?}", self.shape, other.shape)));
        }
        Ok(())
    }
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::dim(format!("shape {shape:?} must have positive dimensions")));
    }
    Ok(())
}

pub(crate) fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = 0.0f32;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// A value paired with an accumulated gradient of the same shape.
#[derive(Debug, Clone, PartialEq)]
pub struct DualTensor {
    pub value: Tensor,
    pub grad: Tensor,
}

impl DualTensor {
    pub fn new(value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self { value, grad }
    }

    pub fn accumulate(&mut self, g: &Tensor) -> Result<()> {
        self.grad.add_assign(g)
    }

    pub fn zero_grad(&mut self) {
        self.grad.data.iter_mut().for_each(|v| *v = 0.0);
    }
}

/// `a[m×k] · b[k×n]`, summing over `k` left to right for each output entry.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[0] {
        return Err(Error::dim(format!("matmul {:?} · {:?}", a.shape, b.shape)));
    }
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a.data[i * k + p];
            let b_row = &b.data[p * n..(p + 1) * n];
            for (o, bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// `a[m×k] · b[n×k]ᵀ`.
pub fn matmul_bt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[1] {
        return Err(Error::dim(format!("matmul_bt {:?} · {:?}ᵀ", a.shape, b.shape)));
    }
    let (m, n) = (a.shape[0], b.shape[0]);
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        for j in 0..n {
            out.push(dot(a.row(i), b.row(j)));
        }
    }
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// `a[k×m]ᵀ · b[k×n]`.
pub fn matmul_at(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.shape[0] != b.shape[0] {
        return Err(Error::dim(format!("matmul_at {:?}ᵀ · {:?}", a.shape, b.shape)));
    }
    let (k, m, n) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut out = vec![0.0f32; m * n];
    for p in 0..k {
        let b_row = &b.data[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a.data[p * m + i];
            let out_row = &mut out[i * n..(i + 1) * n];
            for (o, bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// Numerically stable softmax of a vector.
pub fn softmax(x: &Tensor) -> Result<Tensor> {
    if x.is_empty() || x.rank() != 1 {
        return Err(Error::dim(format!("softmax needs a non-empty vector, got {:?}", x.shape)));
    }
    let mut out = x.data.clone();
    softmax_in_place(&mut out);
    Ok(Tensor::from_parts(x.shape.clone(), out))
}

/// Softmax applied independently to each row of a matrix.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    if x.rank() != 2 {
        return Err(Error::dim(format!("softmax_rows needs a matrix, got {:?}", x.shape)));
    }
    let mut out = x.clone();
    let c = out.cols();
    for row in out.data.chunks_mut(c) {
        softmax_in_place(row);
    }
    Ok(out)
}

pub(crate) fn softmax_in_place(v: &mut [f32]) {
    let max = v.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}
