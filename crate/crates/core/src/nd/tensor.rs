//! Dense row-major tensors over `f32` or `f64`.
//!
//! Storage is a flat `Vec` plus a shape; there are no strides or views. All
//! shape-changing operations either copy or consume `self`.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, NumAssign};

use crate::error::{dim_err, Error, Result};

/// Element precision tag, used by the checkpoint format and the CLI.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
        }
    }
}

/// Scalar element type. Implemented for `f32` (training default) and `f64`
/// (verification).
pub trait Real: Float + NumAssign + Sum + Debug + Display + Default + Send + Sync + 'static {
    const DTYPE: DType;

    fn of(v: f64) -> Self;

    fn as_f64(self) -> f64;

    fn write_le(self, out: &mut Vec<u8>);

    /// Reads one value from the first `DTYPE.size()` bytes of `bytes`.
    fn read_le(bytes: &[u8]) -> Self;
}

impl Real for f32 {
    const DTYPE: DType = DType::F32;

    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().expect("4 bytes"))
    }
}

impl Real for f64 {
    const DTYPE: DType = DType::F64;

    #[inline]
    fn of(v: f64) -> Self {
        v
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return dim_err(format!("shape {:?} needs {} elements, got {}", shape, expected, data.len()));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn scalar(value: T) -> Self {
        Self { shape: Vec::new(), data: vec![value] }
    }

    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> T) -> Self {
        let n: usize = shape.iter().product();
        Self { shape: shape.to_vec(), data: (0..n).map(f).collect() }
    }

    /// Builds a 2-D tensor from nested rows. Rows must have equal length.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return dim_err("ragged rows");
        }
        let data = rows.iter().flatten().copied().collect();
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn eye(n: usize) -> Self {
        Self::from_fn(&[n, n], |i| if i / n == i % n { T::one() } else { T::zero() })
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data)
    }

    /// Number of leading-axis entries and the flat size of each.
    pub fn rows_cols(&self) -> (usize, usize) {
        match self.shape.first() {
            Some(&n) if n > 0 => (n, self.data.len() / n),
            _ => (0, 0),
        }
    }

    pub fn row(&self, i: usize) -> &[T] {
        let (_, c) = self.rows_cols();
        &self.data[i * c..(i + 1) * c]
    }

    /// Gathers leading-axis entries into a new tensor.
    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let (_, c) = self.rows_cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        let mut shape = self.shape.clone();
        shape[0] = idx.len();
        Self { shape, data }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|v| U::of(v.as_f64())).collect() }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.expect_same_shape(other, "zip_map")?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn expect_same_shape(&self, other: &Self, what: &str) -> Result<()> {
        if self.shape != other.shape {
            return dim_err(format!("{what}: shapes {:?} and {:?} differ", self.shape, other.shape));
        }
        Ok(())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, c: T) -> Self {
        self.map(|v| v * c)
    }

    /// In-place `self += c * other`.
    pub fn axpy(&mut self, c: T, other: &Self) -> Result<()> {
        self.expect_same_shape(other, "axpy")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += c * b;
        }
        Ok(())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        Ok(self.sub(other)?.max_abs())
    }

    pub fn relu(&self) -> Self {
        self.map(|v| v.max(T::zero()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn check_finite(self, what: &str) -> Result<Self> {
        if self.all_finite() {
            Ok(self)
        } else {
            Err(Error::NonFinite(what.to_string()))
        }
    }

    fn dims2(&self, what: &str) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => dim_err(format!("{what}: expected a matrix, got shape {:?}", self.shape)),
        }
    }

    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = self.dims2("transpose")?;
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Self::new(vec![c, r], out)
    }

    /// `self · other` for `[m×k] · [k×n]`.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (m, k) = self.dims2("matmul")?;
        let (k2, n) = other.dims2("matmul")?;
        if k != k2 {
            return dim_err(format!("matmul: inner dims {k} and {k2} disagree"));
        }
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            let o_row = &mut out[i * n..(i + 1) * n];
            for (p, &a) in a_row.iter().enumerate() {
                if a == T::zero() {
                    continue;
                }
                let b_row = &other.data[p * n..(p + 1) * n];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Self::new(vec![m, n], out)
    }

    /// `self · otherᵀ` for `[m×k] · [n×k]ᵀ`.
    pub fn matmul_bt(&self, other: &Self) -> Result<Self> {
        let (m, k) = self.dims2("matmul_bt")?;
        let (n, k2) = other.dims2("matmul_bt")?;
        if k != k2 {
            return dim_err(format!("matmul_bt: inner dims {k} and {k2} disagree"));
        }
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            for j in 0..n {
                let b_row = &other.data[j * k..(j + 1) * k];
                out.push(a_row.iter().zip(b_row).map(|(&a, &b)| a * b).sum());
            }
        }
        Self::new(vec![m, n], out)
    }

    /// `selfᵀ · other` for `[k×m]ᵀ · [k×n]`.
    pub fn matmul_at(&self, other: &Self) -> Result<Self> {
        let (k, m) = self.dims2("matmul_at")?;
        let (k2, n) = other.dims2("matmul_at")?;
        if k != k2 {
            return dim_err(format!("matmul_at: inner dims {k} and {k2} disagree"));
        }
        let mut out = vec![T::zero(); m * n];
        for p in 0..k {
            let a_row = &self.data[p * m..(p + 1) * m];
            let b_row = &other.data[p * n..(p + 1) * n];
            for (i, &a) in a_row.iter().enumerate() {
                if a == T::zero() {
                    continue;
                }
                let o_row = &mut out[i * n..(i + 1) * n];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Self::new(vec![m, n], out)
    }
}

/// Row-wise softmax of a `[B×C]` tensor, stabilized by max subtraction.
pub fn softmax_rows<T: Real>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, c) = logits.dims2("softmax")?;
    let mut out = logits.data.clone();
    for i in 0..b {
        let row = &mut out[i * c..(i + 1) * c];
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let mut z = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
    Tensor::new(vec![b, c], out)
}

/// Row-wise log-softmax, via log-sum-exp.
pub fn log_softmax_rows<T: Real>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, c) = logits.dims2("log_softmax")?;
    let mut out = logits.data.clone();
    for i in 0..b {
        let row = &mut out[i * c..(i + 1) * c];
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    Tensor::new(vec![b, c], out)
}

pub(crate) fn check_labels(labels: &[usize], batch: usize, classes: usize) -> Result<()> {
    if classes < 2 {
        return dim_err(format!("cross-entropy needs at least 2 classes, got {classes}"));
    }
    if labels.len() != batch {
        return dim_err(format!("{} labels for a batch of {batch}", labels.len()));
    }
    if let Some((i, &y)) = labels.iter().enumerate().find(|(_, &y)| y >= classes) {
        return Err(Error::Index(format!("label {y} at position {i} is outside [0, {classes})")));
    }
    Ok(())
}

/// Per-example cross-entropy `−log softmax(logits)ᵢ[yᵢ]`.
pub fn cross_entropy_per_example<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> Result<Vec<T>> {
    let (b, c) = logits.dims2("cross_entropy")?;
    check_labels(labels, b, c)?;
    let logp = log_softmax_rows(logits)?;
    let losses: Vec<T> = labels.iter().enumerate().map(|(i, &y)| -logp.data[i * c + y]).collect();
    if losses.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("cross_entropy".into()));
    }
    Ok(losses)
}

/// Mean softmax cross-entropy over the batch.
pub fn softmax_cross_entropy<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> Result<T> {
    let per = cross_entropy_per_example(logits, labels)?;
    let b = T::of(per.len() as f64);
    Ok(per.into_iter().sum::<T>() / b)
}

/// Argmax per row; ties resolve to the lowest index.
pub fn argmax_rows<T: Real>(t: &Tensor<T>) -> Vec<usize> {
    let (b, c) = t.rows_cols();
    (0..b)
        .map(|i| {
            let row = &t.data[i * c..(i + 1) * c];
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Geometry of a 2-D cross-correlation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeometry {
    pub fn new(x_shape: &[usize], w_shape: &[usize], stride: usize, padding: usize) -> Result<Self> {
        let (&[batch, c_in, h, w], &[c_out, c_in2, kh, kw]) = (x_shape, w_shape) else {
            return dim_err(format!("conv2d: expected 4-D input and kernel, got {x_shape:?} and {w_shape:?}"));
        };
        if c_in != c_in2 {
            return dim_err(format!("conv2d: input has {c_in} channels, kernel expects {c_in2}"));
        }
        if stride == 0 || kh == 0 || kw == 0 {
            return dim_err("conv2d: stride and kernel size must be positive");
        }
        let (hp, wp) = (h + 2 * padding, w + 2 * padding);
        if hp < kh || wp < kw {
            return dim_err(format!("conv2d: kernel {kh}x{kw} larger than padded input {hp}x{wp}"));
        }
        Ok(Self {
            batch,
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            stride,
            padding,
            h_out: (hp - kh) / stride + 1,
            w_out: (wp - kw) / stride + 1,
        })
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.batch, self.c_out, self.h_out, self.w_out]
    }

    /// Input coordinate for output position `o` and kernel offset `k`, if it
    /// falls inside the unpadded input.
    #[inline]
    fn src(&self, o: usize, k: usize, limit: usize) -> Option<usize> {
        (o * self.stride + k).checked_sub(self.padding).filter(|&v| v < limit)
    }
}

/// Cross-correlation of `x: [B,Cin,H,W]` with `w: [Cout,Cin,kh,kw]`, zero padding.
pub fn conv2d<T: Real>(x: &Tensor<T>, w: &Tensor<T>, stride: usize, padding: usize) -> Result<Tensor<T>> {
    let g = ConvGeometry::new(x.shape(), w.shape(), stride, padding)?;
    let mut out = vec![T::zero(); g.batch * g.c_out * g.h_out * g.w_out];
    let xd = x.data();
    let wd = w.data();
    for b in 0..g.batch {
        for co in 0..g.c_out {
            let o_base = (b * g.c_out + co) * g.h_out * g.w_out;
            for ci in 0..g.c_in {
                let x_base = (b * g.c_in + ci) * g.h * g.w;
                let w_base = (co * g.c_in + ci) * g.kh * g.kw;
                for ki in 0..g.kh {
                    for kj in 0..g.kw {
                        let wv = wd[w_base + ki * g.kw + kj];
                        for oi in 0..g.h_out {
                            let Some(ii) = g.src(oi, ki, g.h) else { continue };
                            for oj in 0..g.w_out {
                                let Some(jj) = g.src(oj, kj, g.w) else { continue };
                                out[o_base + oi * g.w_out + oj] += wv * xd[x_base + ii * g.w + jj];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(g.out_shape(), out)
}

/// Gradients of [`conv2d`] with respect to its input and kernel.
pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let g = ConvGeometry::new(x.shape(), w.shape(), stride, padding)?;
    if grad_out.shape() != g.out_shape().as_slice() {
        return dim_err(format!(
            "conv2d backward: gradient shape {:?}, expected {:?}",
            grad_out.shape(),
            g.out_shape()
        ));
    }
    let mut gx = vec![T::zero(); x.len()];
    let mut gw = vec![T::zero(); w.len()];
    let (xd, wd, gd) = (x.data(), w.data(), grad_out.data());
    for b in 0..g.batch {
        for co in 0..g.c_out {
            let o_base = (b * g.c_out + co) * g.h_out * g.w_out;
            for ci in 0..g.c_in {
                let x_base = (b * g.c_in + ci) * g.h * g.w;
                let w_base = (co * g.c_in + ci) * g.kh * g.kw;
                for ki in 0..g.kh {
                    for kj in 0..g.kw {
                        let wv = wd[w_base + ki * g.kw + kj];
                        let mut acc = T::zero();
                        for oi in 0..g.h_out {
                            let Some(ii) = g.src(oi, ki, g.h) else { continue };
                            for oj in 0..g.w_out {
                                let Some(jj) = g.src(oj, kj, g.w) else { continue };
                                let go = gd[o_base + oi * g.w_out + oj];
                                let xi = x_base + ii * g.w + jj;
                                acc += go * xd[xi];
                                gx[xi] += go * wv;
                            }
                        }
                        gw[w_base + ki * g.kw + kj] += acc;
                    }
                }
            }
        }
    }
    Ok((Tensor::new(x.shape().to_vec(), gx)?, Tensor::new(w.shape().to_vec(), gw)?))
}
