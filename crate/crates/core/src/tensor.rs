//! Dense row-major 64-bit tensors and the raw numeric kernels shared by the
//! forward ops and the reverse-mode backward pass.

use crate::error::{Error, Result};

/// Dense tensor of 64-bit reals, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    pub requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::dimension(format!(
                "shape {:?} implies {} elements, data has {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
            requires_grad: false,
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
            requires_grad: false,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
            requires_grad: false,
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
            requires_grad: false,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map(|x| x.len()).unwrap_or(0);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(Error::dimension("ragged rows".to_string()));
            }
            data.extend_from_slice(row);
        }
        Tensor::new(vec![r, c], data)
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Rows when viewed as a matrix; rank-1 tensors count as a single row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 | 1 => 1,
            _ => self.shape[0],
        }
    }

    /// Columns when viewed as a matrix.
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => self.shape[0],
            _ => self.shape[1..].iter().product(),
        }
    }

    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.numel(), 1);
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Tensor> {
        let mut t = Tensor::new(shape, self.data.clone())?;
        t.requires_grad = self.requires_grad;
        Ok(t)
    }
}

fn check_same_shape(a: &Tensor, b: &Tensor, op: &str) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::dimension(format!(
            "{op}: shapes {:?} and {:?} differ",
            a.shape, b.shape
        )));
    }
    Ok(())
}

pub(crate) fn zip_map(a: &Tensor, b: &Tensor, op: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    check_same_shape(a, b, op)?;
    let data = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape.clone(), data)
}

pub(crate) fn map(a: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().map(|&x| f(x)).collect(),
        requires_grad: false,
    }
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_map(a, b, "add", |x, y| x + y)
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_map(a, b, "sub", |x, y| x - y)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_map(a, b, "mul", |x, y| x * y)
}

/// a[n x p] @ b[p x q], cache-friendly i-k-j loop.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, p) = (a.rows(), a.cols());
    let (pb, q) = (b.rows(), b.cols());
    if p != pb {
        return Err(Error::dimension(format!(
            "matmul: inner dims {:?} x {:?}",
            a.shape, b.shape
        )));
    }
    let mut out = vec![0.0; n * q];
    let ad = &a.data;
    let bd = &b.data;
    for i in 0..n {
        let arow = &ad[i * p..(i + 1) * p];
        let orow = &mut out[i * q..(i + 1) * q];
        for (k, &aik) in arow.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let brow = &bd[k * q..(k + 1) * q];
            for j in 0..q {
                orow[j] += aik * brow[j];
            }
        }
    }
    Tensor::new(vec![n, q], out)
}

/// a[n x k] @ b[m x k]^T -> [n x m].
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, k) = (a.rows(), a.cols());
    let (m, kb) = (b.rows(), b.cols());
    if k != kb {
        return Err(Error::dimension(format!(
            "matmul_nt: inner dims {:?} x {:?}",
            a.shape, b.shape
        )));
    }
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let arow = &a.data[i * k..(i + 1) * k];
        for j in 0..m {
            let brow = &b.data[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for t in 0..k {
                acc += arow[t] * brow[t];
            }
            out[i * m + j] = acc;
        }
    }
    Tensor::new(vec![n, m], out)
}

/// a[k x n]^T @ b[k x m] -> [n x m].
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (k, n) = (a.rows(), a.cols());
    let (kb, m) = (b.rows(), b.cols());
    if k != kb {
        return Err(Error::dimension(format!(
            "matmul_tn: inner dims {:?} x {:?}",
            a.shape, b.shape
        )));
    }
    let mut out = vec![0.0; n * m];
    for t in 0..k {
        let arow = &a.data[t * n..(t + 1) * n];
        let brow = &b.data[t * m..(t + 1) * m];
        for i in 0..n {
            let ati = arow[i];
            if ati == 0.0 {
                continue;
            }
            let orow = &mut out[i * m..(i + 1) * m];
            for j in 0..m {
                orow[j] += ati * brow[j];
            }
        }
    }
    Tensor::new(vec![n, m], out)
}

/// Matrix plus a row vector broadcast over rows.
pub fn add_row(a: &Tensor, row: &Tensor) -> Result<Tensor> {
    let (n, k) = (a.rows(), a.cols());
    if row.numel() != k {
        return Err(Error::dimension(format!(
            "add_row: matrix {:?} vs row {:?}",
            a.shape,
            row.shape()
        )));
    }
    let mut data = a.data.clone();
    for i in 0..n {
        for j in 0..k {
            data[i * k + j] += row.data[j];
        }
    }
    Tensor::new(a.shape.clone(), data)
}

/// Row-wise softmax with per-row max subtraction.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let (n, k) = (x.rows(), x.cols());
    let mut data = vec![0.0; n * k];
    for i in 0..n {
        let row = &x.data[i * k..(i + 1) * k];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for j in 0..k {
            let e = (row[j] - m).exp();
            data[i * k + j] = e;
            sum += e;
        }
        for j in 0..k {
            data[i * k + j] /= sum;
        }
    }
    Tensor {
        shape: x.shape.clone(),
        data,
        requires_grad: false,
    }
}

/// Per-row normalization: (x - mean) / sqrt(var + eps) * gain + bias.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    let (n, d) = (x.rows(), x.cols());
    if gain.numel() != d || bias.numel() != d {
        return Err(Error::dimension(format!(
            "layer_norm: x {:?}, gain {:?}, bias {:?}",
            x.shape,
            gain.shape(),
            bias.shape()
        )));
    }
    let mut data = vec![0.0; n * d];
    for i in 0..n {
        let row = &x.data[i * d..(i + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + eps).sqrt();
        for j in 0..d {
            data[i * d + j] = (row[j] - mean) * inv * gain.data[j] + bias.data[j];
        }
    }
    Tensor::new(x.shape.clone(), data)
}

pub fn relu(x: &Tensor) -> Tensor {
    map(x, |v| if v > 0.0 { v } else { 0.0 })
}

pub fn tanh(x: &Tensor) -> Tensor {
    map(x, f64::tanh)
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    map(x, |v| 1.0 / (1.0 + (-v).exp()))
}

/// ln(1 + e^x), evaluated stably.
pub fn softplus(x: &Tensor) -> Tensor {
    map(x, softplus_scalar)
}

pub fn softplus_scalar(v: f64) -> f64 {
    v.max(0.0) + (-v.abs()).exp().ln_1p()
}

pub fn sum_all(x: &Tensor) -> f64 {
    x.data.iter().sum()
}

pub fn row_sums(x: &Tensor) -> Tensor {
    let (n, k) = (x.rows(), x.cols());
    let mut data = vec![0.0; n];
    for i in 0..n {
        data[i] = x.data[i * k..(i + 1) * k].iter().sum();
    }
    Tensor::vector(data)
}

pub fn scale(x: &Tensor, c: f64) -> Tensor {
    map(x, |v| v * c)
}

/// Column-concatenate matrices with equal row counts.
pub fn concat_cols(parts: &[&Tensor]) -> Result<Tensor> {
    let n = parts
        .first()
        .ok_or_else(|| Error::dimension("concat_cols: empty input".to_string()))?
        .rows();
    let total: usize = parts.iter().map(|p| p.cols()).sum();
    for p in parts {
        if p.rows() != n {
            return Err(Error::dimension("concat_cols: row counts differ".to_string()));
        }
    }
    let mut data = vec![0.0; n * total];
    for i in 0..n {
        let mut off = 0;
        for p in parts {
            let k = p.cols();
            data[i * total + off..i * total + off + k].copy_from_slice(&p.data()[i * k..(i + 1) * k]);
            off += k;
        }
    }
    Tensor::new(vec![n, total], data)
}

pub fn slice_cols(x: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    let (n, k) = (x.rows(), x.cols());
    if start + len > k {
        return Err(Error::dimension(format!(
            "slice_cols: [{start}, {}) out of {k}",
            start + len
        )));
    }
    let mut data = vec![0.0; n * len];
    for i in 0..n {
        data[i * len..(i + 1) * len].copy_from_slice(&x.data[i * k + start..i * k + start + len]);
    }
    Tensor::new(vec![n, len], data)
}

/// Append `count` copies of the last row.
pub fn pad_rows_repeat_last(x: &Tensor, count: usize) -> Result<Tensor> {
    let (n, k) = (x.rows(), x.cols());
    if n == 0 {
        return Err(Error::dimension("pad_rows_repeat_last: empty matrix".to_string()));
    }
    let mut data = Vec::with_capacity((n + count) * k);
    data.extend_from_slice(&x.data);
    let last = x.data[(n - 1) * k..n * k].to_vec();
    for _ in 0..count {
        data.extend_from_slice(&last);
    }
    Tensor::new(vec![n + count, k], data)
}
