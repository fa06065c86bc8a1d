//! Dense row-major tensors over f32/f64 with the kernel set the rest of the
//! stack needs: matmul, shape ops, normalizations, activations, reductions,
//! causal 3D convolution and spatial upsampling.
//!
//! No implicit broadcasting except scalar-tensor; shape errors name both
//! shapes. Buffers are `Arc`-shared so clones are cheap and tensors can move
//! across worker threads.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum DType {
    F32,
    F64,
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DType::F32 => write!(f, "f32"),
            DType::F64 => write!(f, "f64"),
        }
    }
}

/// Element type: f32 for training, f64 for gradient checks.
pub trait Scalar:
    Copy
    + Send
    + Sync
    + PartialOrd
    + fmt::Debug
    + fmt::Display
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
    + 'static
{
    const DTYPE: DType;
    const ZERO: Self;
    const ONE: Self;

    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn tanh(self) -> Self;
    fn abs(self) -> Self;
    fn is_finite(self) -> bool;
    fn maxv(self, other: Self) -> Self;
    fn minv(self, other: Self) -> Self;

    /// C = alpha * A(m,k) . B(k,n) + beta * C, all row-major contiguous.
    ///
    /// # Safety
    /// Buffer lengths must match the given dimensions.
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        b: *const Self,
        beta: Self,
        c: *mut Self,
    );
}

macro_rules! impl_scalar {
    ($t:ty, $dtype:expr, $gemm:path) => {
        impl Scalar for $t {
            const DTYPE: DType = $dtype;
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;

            fn from_f64(x: f64) -> Self {
                x as $t
            }
            fn to_f64(self) -> f64 {
                self as f64
            }
            fn exp(self) -> Self {
                self.exp()
            }
            fn ln(self) -> Self {
                self.ln()
            }
            fn sqrt(self) -> Self {
                self.sqrt()
            }
            fn tanh(self) -> Self {
                self.tanh()
            }
            fn abs(self) -> Self {
                self.abs()
            }
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }
            fn maxv(self, other: Self) -> Self {
                if self > other {
                    self
                } else {
                    other
                }
            }
            fn minv(self, other: Self) -> Self {
                if self < other {
                    self
                } else {
                    other
                }
            }

            unsafe fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: *const Self,
                b: *const Self,
                beta: Self,
                c: *mut Self,
            ) {
                unsafe {
                    $gemm(
                        m, k, n, alpha, a, k as isize, 1, b, n as isize, 1, beta, c, n as isize, 1,
                    )
                }
            }
        }
    };
}

impl_scalar!(f32, DType::F32, matrixmultiply::sgemm);
impl_scalar!(f64, DType::F64, matrixmultiply::dgemm);

#[derive(Clone)]
pub struct Tensor<E: Scalar> {
    shape: Vec<usize>,
    data: Arc<Vec<E>>,
}

impl<E: Scalar> fmt::Debug for Tensor<E> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor<{}>{:?}", E::DTYPE, self.shape)?;
        if self.numel() <= 8 {
            write!(f, " {:?}", self.data())?;
        }
        Ok(())
    }
}

pub fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<E: Scalar> Tensor<E> {
    pub fn from_vec(shape: &[usize], data: Vec<E>) -> Result<Self> {
        if numel_of(shape) != data.len() {
            return Err(Error::InvalidArg(format!(
                "buffer length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::new(data),
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(vec![E::ZERO; numel_of(shape)]),
        }
    }

    pub fn full(shape: &[usize], value: E) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(vec![value; numel_of(shape)]),
        }
    }

    pub fn scalar(value: E) -> Self {
        Tensor {
            shape: vec![],
            data: Arc::new(vec![value]),
        }
    }

    pub fn randn(shape: &[usize], std: f64, rng: &mut Rng) -> Self {
        let data = (0..numel_of(shape))
            .map(|_| E::from_f64(rng.normal() * std))
            .collect();
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(data),
        }
    }

    pub fn rand_uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut Rng) -> Self {
        let data = (0..numel_of(shape))
            .map(|_| E::from_f64(rng.range(lo, hi)))
            .collect();
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(data),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<E> {
        self.data.as_ref().clone()
    }

    pub fn item(&self) -> E {
        debug_assert_eq!(self.numel(), 1);
        self.data[0]
    }

    pub fn dtype(&self) -> DType {
        E::DTYPE
    }

    /// Mutable access, copy-on-write if the buffer is shared.
    pub fn data_mut(&mut self) -> &mut [E] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn cast<F: Scalar>(&self) -> Tensor<F> {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|x| F::from_f64(x.to_f64())).collect()),
        }
    }

    pub fn map(&self, f: impl Fn(E) -> E) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|&x| f(x)).collect()),
        }
    }

    pub fn zip(&self, other: &Self, op: &'static str, f: impl Fn(E, E) -> E) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data: Arc::new(data),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, k: E) -> Self {
        self.map(|x| x * k)
    }

    pub fn add_scalar(&self, k: E) -> Self {
        self.map(|x| x + k)
    }

    pub fn add_into(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        let dst = self.data_mut();
        for (d, s) in dst.iter_mut().zip(other.data.iter()) {
            *d += *s;
        }
    }

    pub fn sum(&self) -> E {
        let mut acc = E::ZERO;
        for &x in self.data.iter() {
            acc += x;
        }
        acc
    }

    pub fn mean(&self) -> E {
        self.sum() / E::from_f64(self.numel() as f64)
    }

    pub fn max_abs(&self) -> f64 {
        self.data
            .iter()
            .map(|x| x.to_f64().abs())
            .fold(0.0, f64::max)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if numel_of(shape) != self.numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::clone(&self.data),
        })
    }

    /// Row-major (m, k) x (k, n) -> (m, n).
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (a_shape, b_shape) = (&self.shape, &other.shape);
        if a_shape.len() != 2 || b_shape.len() != 2 || a_shape[1] != b_shape[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: a_shape.clone(),
                rhs: b_shape.clone(),
            });
        }
        let (m, k, n) = (a_shape[0], a_shape[1], b_shape[1]);
        let mut out = vec![E::ZERO; m * n];
        if m * k != 0 && k * n != 0 {
            unsafe {
                E::gemm(
                    m,
                    k,
                    n,
                    E::ONE,
                    self.data.as_ptr(),
                    other.data.as_ptr(),
                    E::ZERO,
                    out.as_mut_ptr(),
                );
            }
        }
        Tensor::from_vec(&[m, n], out)
    }

    pub fn transpose2d(&self) -> Result<Self> {
        if self.shape.len() != 2 {
            return Err(Error::invalid(format!(
                "transpose2d expects rank 2, got {:?}",
                self.shape
            )));
        }
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut out = vec![E::ZERO; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor::from_vec(&[n, m], out)
    }

    pub fn permute(&self, axes: &[usize]) -> Result<Self> {
        let rank = self.shape.len();
        let mut seen = vec![false; rank];
        let valid = axes.len() == rank
            && axes.iter().all(|&a| {
                if a >= rank || seen[a] {
                    false
                } else {
                    seen[a] = true;
                    true
                }
            });
        if !valid {
            return Err(Error::invalid(format!(
                "permute axes {:?} invalid for shape {:?}",
                axes, self.shape
            )));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| self.shape[a]).collect();
        let in_strides = strides_of(&self.shape);
        let out_strides = strides_of(&out_shape);
        let mut out = vec![E::ZERO; self.numel()];
        let mut idx = vec![0usize; rank];
        for (pos, slot) in out.iter_mut().enumerate() {
            // decompose pos into out coordinates
            let mut rem = pos;
            for d in 0..rank {
                idx[d] = rem / out_strides[d];
                rem %= out_strides[d];
            }
            let mut src = 0;
            for d in 0..rank {
                src += idx[d] * in_strides[axes[d]];
            }
            *slot = self.data[src];
        }
        Tensor::from_vec(&out_shape, out)
    }

    /// Contiguous slice `[start, start+len)` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Self> {
        let rank = self.shape.len();
        if axis >= rank || start + len > self.shape[axis] {
            return Err(Error::BadAxis {
                op: "slice",
                axis,
                extent: start + len,
                shape: self.shape.clone(),
            });
        }
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut out_shape = self.shape.clone();
        out_shape[axis] = len;
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * self.shape[axis] * inner + start * inner;
            out.extend_from_slice(&self.data[base..base + len * inner]);
        }
        Tensor::from_vec(&out_shape, out)
    }

    pub fn concat(parts: &[&Tensor<E>], axis: usize) -> Result<Self> {
        if parts.is_empty() {
            return Err(Error::invalid("concat of zero tensors"));
        }
        let rank = parts[0].shape.len();
        if axis >= rank {
            return Err(Error::BadAxis {
                op: "concat",
                axis,
                extent: 0,
                shape: parts[0].shape.clone(),
            });
        }
        let mut total_axis = 0;
        for p in parts {
            if p.shape.len() != rank
                || p.shape[..axis] != parts[0].shape[..axis]
                || p.shape[axis + 1..] != parts[0].shape[axis + 1..]
            {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: parts[0].shape.clone(),
                    rhs: p.shape.clone(),
                });
            }
            total_axis += p.shape[axis];
        }
        let outer: usize = parts[0].shape[..axis].iter().product();
        let inner: usize = parts[0].shape[axis + 1..].iter().product();
        let mut out_shape = parts[0].shape.clone();
        out_shape[axis] = total_axis;
        let mut out = Vec::with_capacity(outer * total_axis * inner);
        for o in 0..outer {
            for p in parts {
                let rows = p.shape[axis];
                let base = o * rows * inner;
                out.extend_from_slice(&p.data[base..base + rows * inner]);
            }
        }
        Tensor::from_vec(&out_shape, out)
    }

    /// Sum over one axis, removing it.
    pub fn sum_axis(&self, axis: usize) -> Result<Self> {
        let rank = self.shape.len();
        if axis >= rank {
            return Err(Error::BadAxis {
                op: "sum_axis",
                axis,
                extent: 0,
                shape: self.shape.clone(),
            });
        }
        let outer: usize = self.shape[..axis].iter().product();
        let mid = self.shape[axis];
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut out_shape = self.shape.clone();
        out_shape.remove(axis);
        let mut out = vec![E::ZERO; outer * inner];
        for o in 0..outer {
            for m in 0..mid {
                let base = (o * mid + m) * inner;
                for i in 0..inner {
                    out[o * inner + i] += self.data[base + i];
                }
            }
        }
        Tensor::from_vec(&out_shape, out)
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&self) -> Self {
        let cols = *self.shape.last().unwrap_or(&1);
        let rows = self.numel() / cols.max(1);
        let mut out = vec![E::ZERO; self.numel()];
        for r in 0..rows {
            let row = &self.data[r * cols..(r + 1) * cols];
            let mut mx = row[0];
            for &x in row {
                mx = mx.maxv(x);
            }
            let mut denom = E::ZERO;
            for (j, &x) in row.iter().enumerate() {
                let e = (x - mx).exp();
                out[r * cols + j] = e;
                denom += e;
            }
            for j in 0..cols {
                out[r * cols + j] = out[r * cols + j] / denom;
            }
        }
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(out),
        }
    }

    /// Layer norm over the last axis (no affine).
    pub fn layer_norm(&self, eps: f64) -> Self {
        let cols = *self.shape.last().unwrap_or(&1);
        let rows = self.numel() / cols.max(1);
        let mut out = vec![E::ZERO; self.numel()];
        let nf = E::from_f64(cols as f64);
        for r in 0..rows {
            let row = &self.data[r * cols..(r + 1) * cols];
            let mut mean = E::ZERO;
            for &x in row {
                mean += x;
            }
            mean = mean / nf;
            let mut var = E::ZERO;
            for &x in row {
                let d = x - mean;
                var += d * d;
            }
            var = var / nf;
            let inv = E::ONE / (var + E::from_f64(eps)).sqrt();
            for j in 0..cols {
                out[r * cols + j] = (row[j] - mean) * inv;
            }
        }
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(out),
        }
    }

    /// RMS norm over the last axis (no affine).
    pub fn rms_norm(&self, eps: f64) -> Self {
        let cols = *self.shape.last().unwrap_or(&1);
        let rows = self.numel() / cols.max(1);
        let mut out = vec![E::ZERO; self.numel()];
        let nf = E::from_f64(cols as f64);
        for r in 0..rows {
            let row = &self.data[r * cols..(r + 1) * cols];
            let mut ms = E::ZERO;
            for &x in row {
                ms += x * x;
            }
            ms = ms / nf;
            let inv = E::ONE / (ms + E::from_f64(eps)).sqrt();
            for j in 0..cols {
                out[r * cols + j] = row[j] * inv;
            }
        }
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(out),
        }
    }

    /// Select rows of a rank-2 tensor.
    pub fn index_select_rows(&self, indices: &[usize]) -> Result<Self> {
        if self.shape.len() != 2 {
            return Err(Error::invalid(format!(
                "index_select_rows expects rank 2, got {:?}",
                self.shape
            )));
        }
        let (n, d) = (self.shape[0], self.shape[1]);
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            if i >= n {
                return Err(Error::BadAxis {
                    op: "index_select_rows",
                    axis: 0,
                    extent: i,
                    shape: self.shape.clone(),
                });
            }
            out.extend_from_slice(&self.data[i * d..(i + 1) * d]);
        }
        Tensor::from_vec(&[indices.len(), d], out)
    }
}

pub fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1usize; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        strides[d] = strides[d + 1] * shape[d + 1];
    }
    strides
}

// ---------------------------------------------------------------------------
// Causal 3D convolution
// ---------------------------------------------------------------------------

/// Strided 3D convolution over (T, H, W, Cin) with causal temporal padding:
/// the time axis is padded on the left by (kt - 1) and never on the right,
/// so output frame j only reads input frames <= j * stride_t.
#[derive(Debug, Clone, Copy)]
pub struct Conv3dSpec {
    pub stride: (usize, usize, usize),
    pub pad_hw: (usize, usize),
}

impl Conv3dSpec {
    pub fn new(stride: (usize, usize, usize), pad_hw: (usize, usize)) -> Self {
        Conv3dSpec { stride, pad_hw }
    }

    pub fn out_shape(&self, input: &[usize], weight: &[usize]) -> Result<(usize, usize, usize)> {
        let (t, h, w) = (input[0], input[1], input[2]);
        let (kt, kh, kw) = (weight[0], weight[1], weight[2]);
        let (st, sh, sw) = self.stride;
        let (ph, pw) = self.pad_hw;
        if h + 2 * ph < kh || w + 2 * pw < kw {
            return Err(Error::invalid(format!(
                "conv3d: spatial input {:?} smaller than kernel {:?}",
                &input[..3],
                &weight[..3]
            )));
        }
        let _ = kt;
        Ok((
            (t - 1) / st + 1,
            (h + 2 * ph - kh) / sh + 1,
            (w + 2 * pw - kw) / sw + 1,
        ))
    }
}

/// Lower conv3d input into a (positions, kt*kh*kw*cin) patch matrix.
pub fn im2col<E: Scalar>(input: &Tensor<E>, weight_shape: &[usize], spec: Conv3dSpec) -> Tensor<E> {
    let (t, h, w, cin) = (
        input.shape()[0],
        input.shape()[1],
        input.shape()[2],
        input.shape()[3],
    );
    let (kt, kh, kw) = (weight_shape[0], weight_shape[1], weight_shape[2]);
    let (st, sh, sw) = spec.stride;
    let (ph, pw) = spec.pad_hw;
    let (ot, oh, ow) = spec.out_shape(input.shape(), weight_shape).unwrap();
    let k = kt * kh * kw * cin;
    let mut col = vec![E::ZERO; ot * oh * ow * k];
    let data = input.data();
    let mut row = 0usize;
    for o_t in 0..ot {
        // causal: left pad of kt-1 means input frame = o_t*st - (kt-1) + k_t
        let t0 = (o_t * st) as isize - (kt as isize - 1);
        for o_h in 0..oh {
            let h0 = (o_h * sh) as isize - ph as isize;
            for o_w in 0..ow {
                let w0 = (o_w * sw) as isize - pw as isize;
                let dst = &mut col[row * k..(row + 1) * k];
                let mut c = 0usize;
                for k_t in 0..kt {
                    let it = t0 + k_t as isize;
                    for k_h in 0..kh {
                        let ih = h0 + k_h as isize;
                        for k_w in 0..kw {
                            let iw = w0 + k_w as isize;
                            if it >= 0
                                && (it as usize) < t
                                && ih >= 0
                                && (ih as usize) < h
                                && iw >= 0
                                && (iw as usize) < w
                            {
                                let base =
                                    (((it as usize * h) + ih as usize) * w + iw as usize) * cin;
                                dst[c..c + cin].copy_from_slice(&data[base..base + cin]);
                            }
                            c += cin;
                        }
                    }
                }
                row += 1;
            }
        }
    }
    Tensor::from_vec(&[ot * oh * ow, k], col).unwrap()
}

/// Scatter a (positions, k) patch-gradient matrix back onto the input grid.
pub fn col2im<E: Scalar>(
    dcol: &Tensor<E>,
    input_shape: &[usize],
    weight_shape: &[usize],
    spec: Conv3dSpec,
) -> Tensor<E> {
    let (t, h, w, cin) = (
        input_shape[0],
        input_shape[1],
        input_shape[2],
        input_shape[3],
    );
    let (kt, kh, kw) = (weight_shape[0], weight_shape[1], weight_shape[2]);
    let (st, sh, sw) = spec.stride;
    let (ph, pw) = spec.pad_hw;
    let (ot, oh, ow) = spec.out_shape(input_shape, weight_shape).unwrap();
    let k = kt * kh * kw * cin;
    let mut out = vec![E::ZERO; t * h * w * cin];
    let src = dcol.data();
    let mut row = 0usize;
    for o_t in 0..ot {
        let t0 = (o_t * st) as isize - (kt as isize - 1);
        for o_h in 0..oh {
            let h0 = (o_h * sh) as isize - ph as isize;
            for o_w in 0..ow {
                let w0 = (o_w * sw) as isize - pw as isize;
                let patch = &src[row * k..(row + 1) * k];
                let mut c = 0usize;
                for k_t in 0..kt {
                    let it = t0 + k_t as isize;
                    for k_h in 0..kh {
                        let ih = h0 + k_h as isize;
                        for k_w in 0..kw {
                            let iw = w0 + k_w as isize;
                            if it >= 0
                                && (it as usize) < t
                                && ih >= 0
                                && (ih as usize) < h
                                && iw >= 0
                                && (iw as usize) < w
                            {
                                let base =
                                    (((it as usize * h) + ih as usize) * w + iw as usize) * cin;
                                for ci in 0..cin {
                                    out[base + ci] += patch[c + ci];
                                }
                            }
                            c += cin;
                        }
                    }
                }
                row += 1;
            }
        }
    }
    Tensor::from_vec(input_shape, out).unwrap()
}

/// conv3d forward. Weight layout (kt, kh, kw, cin, cout), bias (cout).
pub fn conv3d<E: Scalar>(
    input: &Tensor<E>,
    weight: &Tensor<E>,
    bias: Option<&Tensor<E>>,
    spec: Conv3dSpec,
) -> Result<Tensor<E>> {
    if input.shape().len() != 4 || weight.shape().len() != 5 {
        return Err(Error::ShapeMismatch {
            op: "conv3d",
            lhs: input.shape().to_vec(),
            rhs: weight.shape().to_vec(),
        });
    }
    let cin = input.shape()[3];
    if weight.shape()[3] != cin {
        return Err(Error::ShapeMismatch {
            op: "conv3d channels",
            lhs: input.shape().to_vec(),
            rhs: weight.shape().to_vec(),
        });
    }
    let cout = weight.shape()[4];
    let (ot, oh, ow) = spec.out_shape(input.shape(), weight.shape())?;
    let k = weight.shape()[..4].iter().product::<usize>();
    let col = im2col(input, weight.shape(), spec);
    let w2 = weight.reshape(&[k, cout])?;
    let mut out = col.matmul(&w2)?;
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return Err(Error::ShapeMismatch {
                op: "conv3d bias",
                lhs: vec![cout],
                rhs: b.shape().to_vec(),
            });
        }
        let data = out.data_mut();
        for row in 0..ot * oh * ow {
            for c in 0..cout {
                data[row * cout + c] += b.data()[c];
            }
        }
    }
    out.reshape(&[ot, oh, ow, cout])
}

// ---------------------------------------------------------------------------
// Upsampling
// ---------------------------------------------------------------------------

/// Causal temporal upsample: frame 0 stays single, every later frame is
/// repeated `r` times, so (T+1) frames become (T*r + 1).
pub fn upsample_time_causal<E: Scalar>(input: &Tensor<E>, r: usize) -> Result<Tensor<E>> {
    if input.shape().len() != 4 {
        return Err(Error::invalid("upsample_time_causal expects (T,H,W,C)"));
    }
    let (t, h, w, c) = (
        input.shape()[0],
        input.shape()[1],
        input.shape()[2],
        input.shape()[3],
    );
    let frame = h * w * c;
    let t_out = 1 + (t - 1) * r;
    let mut out = Vec::with_capacity(t_out * frame);
    out.extend_from_slice(&input.data()[..frame]);
    for j in 1..t {
        for _ in 0..r {
            out.extend_from_slice(&input.data()[j * frame..(j + 1) * frame]);
        }
    }
    Tensor::from_vec(&[t_out, h, w, c], out)
}

/// Gradient of `upsample_time_causal`: sum over replicated frames.
pub fn upsample_time_causal_back<E: Scalar>(dout: &Tensor<E>, t_in: usize, r: usize) -> Tensor<E> {
    let (h, w, c) = (dout.shape()[1], dout.shape()[2], dout.shape()[3]);
    let frame = h * w * c;
    let mut out = vec![E::ZERO; t_in * frame];
    out[..frame].copy_from_slice(&dout.data()[..frame]);
    for j in 1..t_in {
        for k in 0..r {
            let src = (1 + (j - 1) * r + k) * frame;
            for i in 0..frame {
                out[j * frame + i] += dout.data()[src + i];
            }
        }
    }
    Tensor::from_vec(&[t_in, h, w, c], out).unwrap()
}

/// Nearest-neighbour spatial upsample by integer factors.
pub fn upsample_nearest_hw<E: Scalar>(input: &Tensor<E>, fh: usize, fw: usize) -> Result<Tensor<E>> {
    if input.shape().len() != 4 {
        return Err(Error::invalid("upsample_nearest_hw expects (T,H,W,C)"));
    }
    let (t, h, w, c) = (
        input.shape()[0],
        input.shape()[1],
        input.shape()[2],
        input.shape()[3],
    );
    let (ho, wo) = (h * fh, w * fw);
    let mut out = vec![E::ZERO; t * ho * wo * c];
    for ti in 0..t {
        for y in 0..ho {
            for x in 0..wo {
                let src = ((ti * h + y / fh) * w + x / fw) * c;
                let dst = ((ti * ho + y) * wo + x) * c;
                out[dst..dst + c].copy_from_slice(&input.data()[src..src + c]);
            }
        }
    }
    Tensor::from_vec(&[t, ho, wo, c], out)
}

pub fn upsample_nearest_hw_back<E: Scalar>(dout: &Tensor<E>, fh: usize, fw: usize) -> Tensor<E> {
    let (t, ho, wo, c) = (
        dout.shape()[0],
        dout.shape()[1],
        dout.shape()[2],
        dout.shape()[3],
    );
    let (h, w) = (ho / fh, wo / fw);
    let mut out = vec![E::ZERO; t * h * w * c];
    for ti in 0..t {
        for y in 0..ho {
            for x in 0..wo {
                let dst = ((ti * h + y / fh) * w + x / fw) * c;
                let src = ((ti * ho + y) * wo + x) * c;
                for ci in 0..c {
                    out[dst + ci] += dout.data()[src + ci];
                }
            }
        }
    }
    Tensor::from_vec(&[t, h, w, c], out).unwrap()
}

/// Bilinear spatial upsample by integer factors (half-pixel centers).
pub fn upsample_linear_hw<E: Scalar>(input: &Tensor<E>, fh: usize, fw: usize) -> Result<Tensor<E>> {
    if input.shape().len() != 4 {
        return Err(Error::invalid("upsample_linear_hw expects (T,H,W,C)"));
    }
    let (t, h, w, c) = (
        input.shape()[0],
        input.shape()[1],
        input.shape()[2],
        input.shape()[3],
    );
    let (ho, wo) = (h * fh, w * fw);
    let mut out = vec![E::ZERO; t * ho * wo * c];
    for ti in 0..t {
        for y in 0..ho {
            let (y0, y1, wy) = linear_taps(y, fh, h);
            for x in 0..wo {
                let (x0, x1, wx) = linear_taps(x, fw, w);
                let dst = ((ti * ho + y) * wo + x) * c;
                for ci in 0..c {
                    let g = |yy: usize, xx: usize| input.data()[((ti * h + yy) * w + xx) * c + ci];
                    let top = g(y0, x0).to_f64() * (1.0 - wx) + g(y0, x1).to_f64() * wx;
                    let bot = g(y1, x0).to_f64() * (1.0 - wx) + g(y1, x1).to_f64() * wx;
                    out[dst + ci] = E::from_f64(top * (1.0 - wy) + bot * wy);
                }
            }
        }
    }
    Tensor::from_vec(&[t, ho, wo, c], out)
}

pub fn upsample_linear_hw_back<E: Scalar>(dout: &Tensor<E>, fh: usize, fw: usize) -> Tensor<E> {
    let (t, ho, wo, c) = (
        dout.shape()[0],
        dout.shape()[1],
        dout.shape()[2],
        dout.shape()[3],
    );
    let (h, w) = (ho / fh, wo / fw);
    let mut out = vec![E::ZERO; t * h * w * c];
    for ti in 0..t {
        for y in 0..ho {
            let (y0, y1, wy) = linear_taps(y, fh, h);
            for x in 0..wo {
                let (x0, x1, wx) = linear_taps(x, fw, w);
                let src = ((ti * ho + y) * wo + x) * c;
                for ci in 0..c {
                    let g = dout.data()[src + ci].to_f64();
                    let mut acc = |yy: usize, xx: usize, wgt: f64| {
                        out[((ti * h + yy) * w + xx) * c + ci] += E::from_f64(g * wgt);
                    };
                    acc(y0, x0, (1.0 - wy) * (1.0 - wx));
                    acc(y0, x1, (1.0 - wy) * wx);
                    acc(y1, x0, wy * (1.0 - wx));
                    acc(y1, x1, wy * wx);
                }
            }
        }
    }
    Tensor::from_vec(&[t, h, w, c], out).unwrap()
}

fn linear_taps(dst: usize, factor: usize, src_len: usize) -> (usize, usize, f64) {
    let pos = (dst as f64 + 0.5) / factor as f64 - 0.5;
    let p0 = pos.floor();
    let frac = pos - p0;
    let i0 = (p0.max(0.0) as usize).min(src_len - 1);
    let i1 = ((p0 as isize + 1).max(0) as usize).min(src_len - 1);
    (i0, i1, if i0 == i1 { 0.0 } else { frac })
}
