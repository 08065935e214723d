//! Dense row-major matrix kernels and the on-disk tensor format.
//!
//! Storage and inference run in f32; the same kernels instantiate at f64
//! for gradient checking. Summation order is fixed (row-major, ascending
//! inner index) so results are bit-reproducible per build. Every kernel
//! validates that its output is finite and reports `Error::NonFinite`
//! otherwise.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use num_traits::Float;

use crate::error::{Error, Result};

pub const TENSOR_MAGIC: [u8; 8] = *b"GTNV2TEN";
pub const MAX_NDIM: usize = 4;

/// Element types the tensor file can carry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32 = 0,
    F64 = 1,
    U8 = 2,
}

impl Dtype {
    pub fn from_code(code: u8) -> Option<Dtype> {
        match code {
            0 => Some(Dtype::F32),
            1 => Some(Dtype::F64),
            2 => Some(Dtype::U8),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
            Dtype::U8 => 1,
        }
    }
}

/// Scalar element of a `Matrix`. Sealed to f32/f64.
pub trait Scalar: Float + std::fmt::Debug + Copy + 'static {
    const DTYPE: Dtype;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const DTYPE: Dtype = Dtype::F32;
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().unwrap())
    }
}

impl Scalar for f64 {
    const DTYPE: Dtype = Dtype::F64;
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().unwrap())
    }
}

/// Row-major 2-D matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T = f32> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::ShapeMismatch("ragged row lengths".into()));
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data: rows.iter().flatten().copied().collect(),
        })
    }

    pub fn full(rows: usize, cols: usize, value: T) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = T::one();
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<T> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn slice_rows(&self, start: usize, end: usize) -> Matrix<T> {
        Matrix {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    /// Columns [start, end) as a new matrix.
    pub fn slice_cols(&self, start: usize, end: usize) -> Matrix<T> {
        let mut out = Matrix::zeros(self.rows, end - start);
        for r in 0..self.rows {
            out.row_mut(r).copy_from_slice(&self.row(r)[start..end]);
        }
        out
    }

    pub fn transpose(&self) -> Matrix<T> {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Matrix<T> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn check_finite(&self, what: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(what.into()))
        }
    }

    /// Elementwise sum; shapes must match.
    pub fn add(&self, other: &Matrix<T>) -> Result<Matrix<T>> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::ShapeMismatch(format!(
                "add {}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| a + b)
                .collect(),
        })
    }

    pub fn sub(&self, other: &Matrix<T>) -> Result<Matrix<T>> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::ShapeMismatch(format!(
                "sub {}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| a - b)
                .collect(),
        })
    }

    pub fn scale(&self, factor: T) -> Matrix<T> {
        self.map(|v| v * factor)
    }

    /// [self ‖ other] along columns.
    pub fn concat_cols(&self, other: &Matrix<T>) -> Result<Matrix<T>> {
        if self.rows != other.rows {
            return Err(Error::ShapeMismatch(format!(
                "concat_cols {} vs {} rows",
                self.rows, other.rows
            )));
        }
        let mut out = Matrix::zeros(self.rows, self.cols + other.cols);
        for r in 0..self.rows {
            out.row_mut(r)[..self.cols].copy_from_slice(self.row(r));
            out.row_mut(r)[self.cols..].copy_from_slice(other.row(r));
        }
        Ok(out)
    }

    /// Rows in reverse order.
    pub fn reverse_rows(&self) -> Matrix<T> {
        let mut out = Matrix::zeros(self.rows, self.cols);
        for r in 0..self.rows {
            out.row_mut(r).copy_from_slice(self.row(self.rows - 1 - r));
        }
        out
    }

    /// Standard product with fixed summation order (ascending k per output).
    pub fn matmul(&self, other: &Matrix<T>) -> Result<Matrix<T>> {
        if self.cols != other.rows {
            return Err(Error::ShapeMismatch(format!(
                "matmul {}x{} . {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let (m, k, n) = (self.rows, self.cols, other.cols);
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            let o_row = &mut out[i * n..(i + 1) * n];
            for (p, &a) in a_row.iter().enumerate() {
                let b_row = &other.data[p * n..(p + 1) * n];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o = *o + a * b;
                }
            }
        }
        let out = Matrix {
            rows: m,
            cols: n,
            data: out,
        };
        out.check_finite("matmul output")?;
        Ok(out)
    }

    /// Per-row softmax with max subtraction; rows sum to 1.
    pub fn row_softmax(&self) -> Result<Matrix<T>> {
        self.check_finite("row_softmax input")?;
        let mut out = self.clone();
        for r in 0..self.rows {
            softmax_in_place(out.row_mut(r));
        }
        out.check_finite("row_softmax output")?;
        Ok(out)
    }
}

pub fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    if row.is_empty() {
        return;
    }
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// tanh-form GELU, the single nonlinearity used by every forward block.
pub fn gelu<T: Scalar>(x: T) -> T {
    let half = T::from(0.5).unwrap();
    let c = T::from(0.797_884_560_802_865_4).unwrap(); // sqrt(2/pi)
    let k = T::from(0.044_715).unwrap();
    half * x * (T::one() + (c * (x + k * x * x * x)).tanh())
}

pub fn silu<T: Scalar>(x: T) -> T {
    x * sigmoid(x)
}

pub fn softplus<T: Scalar>(x: T) -> T {
    // log1p(exp(x)) with overflow guard
    if x > T::from(30.0).unwrap() {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Row-wise layer normalization without learned parameters.
pub fn layer_norm_rows<T: Scalar>(m: &Matrix<T>, eps: T) -> Matrix<T> {
    let mut out = m.clone();
    let n = T::from(m.cols()).unwrap();
    for r in 0..m.rows() {
        let row = out.row_mut(r);
        let mut mean = T::zero();
        for v in row.iter() {
            mean = mean + *v;
        }
        mean = mean / n;
        let mut var = T::zero();
        for v in row.iter() {
            let d = *v - mean;
            var = var + d * d;
        }
        var = var / n;
        let inv = T::one() / (var + eps).sqrt();
        for v in row.iter_mut() {
            *v = (*v - mean) * inv;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Gelu,
    Identity,
}

impl Activation {
    fn apply<T: Scalar>(self, m: &mut Matrix<T>) {
        if let Activation::Gelu = self {
            for v in m.data_mut() {
                *v = gelu(*v);
            }
        }
    }
}

/// One affine layer of an MLP: x (T×in) · weight (in×out) + bias (out).
#[derive(Debug, Clone)]
pub struct Layer<T = f32> {
    pub weight: Matrix<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> Layer<T> {
    pub fn new(weight: Matrix<T>, bias: Vec<T>) -> Result<Self> {
        if bias.len() != weight.cols() {
            return Err(Error::ShapeMismatch(format!(
                "bias length {} vs weight cols {}",
                bias.len(),
                weight.cols()
            )));
        }
        Ok(Layer { weight, bias })
    }

    pub fn apply(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        let mut out = x.matmul(&self.weight)?;
        for r in 0..out.rows() {
            for (v, b) in out.row_mut(r).iter_mut().zip(&self.bias) {
                *v = *v + *b;
            }
        }
        Ok(out)
    }
}

/// Affine chain with the activation after every layer except the last.
pub fn mlp_forward<T: Scalar>(
    x: &Matrix<T>,
    layers: &[Layer<T>],
    activation: Activation,
) -> Result<Matrix<T>> {
    let mut h = x.clone();
    for (i, layer) in layers.iter().enumerate() {
        h = layer.apply(&h)?;
        if i + 1 < layers.len() {
            activation.apply(&mut h);
        }
    }
    h.check_finite("mlp_forward output")?;
    Ok(h)
}

/// out[0] = 0; out[t] = m[t] - m[t-1].
pub fn frame_diff<T: Scalar>(m: &Matrix<T>) -> Matrix<T> {
    let mut out = Matrix::zeros(m.rows(), m.cols());
    for t in 1..m.rows() {
        let prev = t - 1;
        for c in 0..m.cols() {
            out.set(t, c, m.get(t, c) - m.get(prev, c));
        }
    }
    out
}

/// Raw n-dimensional tensor file contents.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorFile {
    pub dtype: Dtype,
    pub shape: Vec<u64>,
    pub payload: Vec<u8>,
}

impl TensorFile {
    pub fn element_count(&self) -> Option<u64> {
        self.shape.iter().try_fold(1u64, |acc, &d| acc.checked_mul(d))
    }
}

pub fn write_tensor_file(path: &Path, tensor: &TensorFile) -> Result<()> {
    if tensor.shape.len() > MAX_NDIM {
        return Err(Error::BadTensorFile {
            path: path.into(),
            reason: format!("ndim {} exceeds {}", tensor.shape.len(), MAX_NDIM),
        });
    }
    let count = tensor.element_count().ok_or_else(|| Error::BadTensorFile {
        path: path.into(),
        reason: "shape overflow".into(),
    })?;
    let expect = count.checked_mul(tensor.dtype.size() as u64);
    if expect != Some(tensor.payload.len() as u64) {
        return Err(Error::BadTensorFile {
            path: path.into(),
            reason: format!(
                "payload {} bytes, shape wants {:?}",
                tensor.payload.len(),
                expect
            ),
        });
    }
    let mut buf = Vec::with_capacity(10 + 8 * tensor.shape.len() + tensor.payload.len());
    buf.extend_from_slice(&TENSOR_MAGIC);
    buf.push(tensor.dtype as u8);
    buf.push(tensor.shape.len() as u8);
    for d in &tensor.shape {
        buf.extend_from_slice(&d.to_le_bytes());
    }
    buf.extend_from_slice(&tensor.payload);
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&buf).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_tensor_file(path: &Path) -> Result<TensorFile> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .map_err(|e| Error::io(path, e))?
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 10 {
        return Err(Error::BadTensorFile {
            path: path.into(),
            reason: "truncated header".into(),
        });
    }
    if bytes[0..8] != TENSOR_MAGIC {
        return Err(Error::BadMagic { path: path.into() });
    }
    let dtype = Dtype::from_code(bytes[8]).ok_or_else(|| Error::BadTensorFile {
        path: path.into(),
        reason: format!("unknown dtype code {}", bytes[8]),
    })?;
    let ndim = bytes[9] as usize;
    if ndim > MAX_NDIM {
        return Err(Error::BadTensorFile {
            path: path.into(),
            reason: format!("ndim {ndim} exceeds {MAX_NDIM}"),
        });
    }
    let header = 10 + 8 * ndim;
    if bytes.len() < header {
        return Err(Error::BadTensorFile {
            path: path.into(),
            reason: "truncated shape".into(),
        });
    }
    let shape: Vec<u64> = (0..ndim)
        .map(|i| {
            let off = 10 + 8 * i;
            u64::from_le_bytes(bytes[off..off + 8].try_into().unwrap())
        })
        .collect();
    let tensor = TensorFile {
        dtype,
        shape,
        payload: bytes[header..].to_vec(),
    };
    let count = tensor.element_count().ok_or_else(|| Error::BadTensorFile {
        path: path.into(),
        reason: "shape overflow".into(),
    })?;
    if count.checked_mul(dtype.size() as u64) != Some(tensor.payload.len() as u64) {
        return Err(Error::BadTensorFile {
            path: path.into(),
            reason: format!(
                "payload {} bytes does not match shape {:?}",
                tensor.payload.len(),
                tensor.shape
            ),
        });
    }
    Ok(tensor)
}

/// Save a matrix as a 2-D tensor file; round trip is bit-exact.
pub fn save_tensor<T: Scalar>(path: &Path, m: &Matrix<T>) -> Result<()> {
    let mut payload = Vec::with_capacity(m.data().len() * T::DTYPE.size());
    for &v in m.data() {
        v.write_le(&mut payload);
    }
    write_tensor_file(
        path,
        &TensorFile {
            dtype: T::DTYPE,
            shape: vec![m.rows() as u64, m.cols() as u64],
            payload,
        },
    )
}

/// Load a 2-D tensor saved by `save_tensor`.
pub fn load_tensor<T: Scalar>(path: &Path) -> Result<Matrix<T>> {
    let tensor = read_tensor_file(path)?;
    if tensor.dtype != T::DTYPE {
        return Err(Error::BadTensorFile {
            path: path.into(),
            reason: format!("dtype {:?}, expected {:?}", tensor.dtype, T::DTYPE),
        });
    }
    if tensor.shape.len() != 2 {
        return Err(Error::BadTensorFile {
            path: path.into(),
            reason: format!("expected 2-D shape, got {:?}", tensor.shape),
        });
    }
    let (rows, cols) = (tensor.shape[0] as usize, tensor.shape[1] as usize);
    let size = T::DTYPE.size();
    let data = tensor
        .payload
        .chunks_exact(size)
        .map(T::read_le)
        .collect::<Vec<_>>();
    Matrix::from_vec(rows, cols, data)
}

/// Save a 1-D vector (used for biases and per-channel parameters).
pub fn save_vector(path: &Path, v: &[f32]) -> Result<()> {
    let mut payload = Vec::with_capacity(v.len() * 4);
    for x in v {
        payload.extend_from_slice(&x.to_le_bytes());
    }
    write_tensor_file(
        path,
        &TensorFile {
            dtype: Dtype::F32,
            shape: vec![v.len() as u64],
            payload,
        },
    )
}

pub fn load_vector(path: &Path) -> Result<Vec<f32>> {
    let tensor = read_tensor_file(path)?;
    if tensor.dtype != Dtype::F32 || tensor.shape.len() != 1 {
        return Err(Error::BadTensorFile {
            path: path.into(),
            reason: format!("expected 1-D f32, got {:?} {:?}", tensor.dtype, tensor.shape),
        });
    }
    Ok(tensor
        .payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect())
}
