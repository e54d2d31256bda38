//! Dense tensors and the lowering primitives the layers are built on.
//!
//! Storage is contiguous and row-major. Activations use the channels-last
//! order `[m, h, w, c]`, convolution filters use `[kh, kw, c_in, c_out]`,
//! so a single feature map of one sample is the strided slice `[i, :, :, c]`.

use std::cmp::Ordering;
use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floating-point element type. Implemented for `f32` (training) and `f64`
/// (gradient checks).
pub trait Scalar:
    Float
    + FromPrimitive
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Width in bytes of the little-endian encoding.
    const BYTES: usize;

    /// Converts an `f64` literal or statistic into this type.
    fn of(v: f64) -> Self;

    fn write_le(self, out: &mut Vec<u8>);

    /// Decodes from exactly `Self::BYTES` bytes.
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const BYTES: usize = 4;

    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4-byte slice"))
    }
}

impl Scalar for f64 {
    const BYTES: usize = 8;

    #[inline]
    fn of(v: f64) -> Self {
        v
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8-byte slice"))
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Debug> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        const PREVIEW: usize = 8;
        let head = &self.data[..self.data.len().min(PREVIEW)];
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &head)
            .field("len", &self.data.len())
            .finish()
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} holds {expected} elements but {} were supplied",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    /// Builds a tensor from `f64` values, converting each element.
    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| T::of(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Dimension(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Row-major offset of a multi-index.
    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &d)| acc * d + i)
    }

    pub fn get(&self, index: &[usize]) -> T {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: T) {
        let o = self.offset(index);
        self.data[o] = value;
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Number of entries that are not exactly zero.
    pub fn nnz(&self) -> usize {
        self.data.iter().filter(|v| !v.is_zero()).count()
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    /// Frobenius inner product.
    pub fn dot(&self, other: &Self) -> Result<T> {
        if self.shape != other.shape {
            return Err(Error::Dimension(format!(
                "inner product of {:?} and {:?}",
                self.shape, other.shape
            )));
        }
        let mut acc = T::zero();
        for (&a, &b) in self.data.iter().zip(&other.data) {
            acc += a * b;
        }
        Ok(acc)
    }

    pub fn l2_norm(&self) -> f64 {
        self.data
            .iter()
            .map(|v| {
                let v = v.to_f64().unwrap_or(f64::NAN);
                v * v
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Fails with [`Error::NonFinite`] if any element is NaN or infinite.
    pub fn check_finite(&self, what: &str) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => Err(Error::NonFinite(format!(
                "{what}: element {i} of tensor {:?} is {}",
                self.shape, self.data[i]
            ))),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::of(v.to_f64().unwrap_or(f64::NAN)))
                .collect(),
        }
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(&self) -> Result<Self> {
        let (p, q) = self.dims2("transpose")?;
        let mut out = vec![T::zero(); p * q];
        for i in 0..p {
            for j in 0..q {
                out[j * p + i] = self.data[i * q + j];
            }
        }
        Ok(Self {
            shape: vec![q, p],
            data: out,
        })
    }

    pub(crate) fn dims2(&self, op: &str) -> Result<(usize, usize)> {
        match self.shape[..] {
            [p, q] => Ok((p, q)),
            _ => Err(Error::Dimension(format!(
                "{op} expects a rank-2 tensor, got {:?}",
                self.shape
            ))),
        }
    }

    pub(crate) fn dims4(&self, op: &str) -> Result<[usize; 4]> {
        match self.shape[..] {
            [m, h, w, c] => Ok([m, h, w, c]),
            _ => Err(Error::Dimension(format!(
                "{op} expects a rank-4 [m, h, w, c] tensor, got {:?}",
                self.shape
            ))),
        }
    }
}

/// `out += alpha * x`, elementwise.
#[inline]
pub(crate) fn axpy<T: Scalar>(out: &mut [T], alpha: T, x: &[T]) {
    debug_assert_eq!(out.len(), x.len());
    for (o, &v) in out.iter_mut().zip(x) {
        *o += alpha * v;
    }
}

/// Matrix product of `[p, q] x [q, r]`.
///
/// Loop order is fixed (row, inner, column) so the summation order of every
/// output element is the inner index in ascending order. Zero entries of `a`
/// are skipped, which leaves results unchanged for finite inputs.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (p, q) = a.dims2("matmul")?;
    let (q2, r) = b.dims2("matmul")?;
    if q != q2 {
        return Err(Error::Dimension(format!(
            "matmul inner extents disagree: {:?} x {:?}",
            a.shape, b.shape
        )));
    }
    let mut out = vec![T::zero(); p * r];
    for i in 0..p {
        let row = &mut out[i * r..(i + 1) * r];
        for k in 0..q {
            let av = a.data[i * q + k];
            if av.is_zero() {
                continue;
            }
            axpy(row, av, &b.data[k * r..(k + 1) * r]);
        }
    }
    Tensor::new(&[p, r], out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    /// Zero padding so that `out = ceil(in / stride)`; extra padding goes after.
    Same,
    /// No padding; the kernel must fit inside the input.
    Valid,
}

/// Spatial bookkeeping for one convolution or its im2col lowering.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_h: usize,
    pub in_w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(
        in_h: usize,
        in_w: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        padding: Padding,
    ) -> Result<Self> {
        if stride == 0 {
            return Err(Error::Argument("stride must be at least 1".into()));
        }
        if kh == 0 || kw == 0 {
            return Err(Error::Argument("kernel extents must be positive".into()));
        }
        let axis = |input: usize, k: usize| -> Result<(usize, usize)> {
            match padding {
                Padding::Same => {
                    let out = input.div_ceil(stride);
                    let total = ((out.saturating_sub(1)) * stride + k).saturating_sub(input);
                    Ok((out, total / 2))
                }
                Padding::Valid => {
                    if k > input {
                        return Err(Error::Dimension(format!(
                            "kernel {kh}x{kw} larger than unpadded input {in_h}x{in_w}"
                        )));
                    }
                    Ok(((input - k) / stride + 1, 0))
                }
            }
        };
        let (out_h, pad_top) = axis(in_h, kh)?;
        let (out_w, pad_left) = axis(in_w, kw)?;
        Ok(Self {
            in_h,
            in_w,
            kh,
            kw,
            stride,
            pad_top,
            pad_left,
            out_h,
            out_w,
        })
    }

    /// Input coordinate read by output `(oy, ox)` at kernel tap `(ky, kx)`,
    /// or `None` when it falls into the zero padding.
    #[inline]
    pub fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let y = (oy * self.stride + ky).checked_sub(self.pad_top)?;
        let x = (ox * self.stride + kx).checked_sub(self.pad_left)?;
        (y < self.in_h && x < self.in_w).then_some((y, x))
    }
}

/// Lowers `x: [m, h, w, c]` to patch rows `[m * out_h * out_w, kh * kw * c]`.
///
/// Columns are ordered `(ky, kx, c)`, matching a `[kh, kw, c_in, c_out]`
/// filter reshaped to `[kh * kw * c_in, c_out]`.
pub fn im2col<T: Scalar>(
    x: &Tensor<T>,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: Padding,
) -> Result<Tensor<T>> {
    let [_, h, w, _] = x.dims4("im2col")?;
    let geom = ConvGeometry::new(h, w, kh, kw, stride, padding)?;
    Ok(im2col_geom(x, &geom))
}

pub(crate) fn im2col_geom<T: Scalar>(x: &Tensor<T>, g: &ConvGeometry) -> Tensor<T> {
    let [m, h, w, c] = [x.shape[0], x.shape[1], x.shape[2], x.shape[3]];
    let k = g.kh * g.kw * c;
    let rows = m * g.out_h * g.out_w;
    let mut out = vec![T::zero(); rows * k];
    let mut r = 0;
    for i in 0..m {
        let sample = &x.data[i * h * w * c..(i + 1) * h * w * c];
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let row = &mut out[r * k..(r + 1) * k];
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        if let Some((y, xx)) = g.source(oy, ox, ky, kx) {
                            let dst = (ky * g.kw + kx) * c;
                            let src = (y * w + xx) * c;
                            row[dst..dst + c].copy_from_slice(&sample[src..src + c]);
                        }
                    }
                }
                r += 1;
            }
        }
    }
    Tensor {
        shape: vec![rows, k],
        data: out,
    }
}

/// Scatter-add adjoint of [`im2col`]: each patch entry is accumulated back
/// onto the input position it was read from.
pub fn col2im<T: Scalar>(
    cols: &Tensor<T>,
    target: [usize; 4],
    kh: usize,
    kw: usize,
    stride: usize,
    padding: Padding,
) -> Result<Tensor<T>> {
    let [_, h, w, _] = target;
    let geom = ConvGeometry::new(h, w, kh, kw, stride, padding)?;
    col2im_geom(cols, target, &geom)
}

pub(crate) fn col2im_geom<T: Scalar>(
    cols: &Tensor<T>,
    target: [usize; 4],
    g: &ConvGeometry,
) -> Result<Tensor<T>> {
    let [m, h, w, c] = target;
    let k = g.kh * g.kw * c;
    let rows = m * g.out_h * g.out_w;
    let (r_have, k_have) = cols.dims2("col2im")?;
    if r_have != rows || k_have != k || h != g.in_h || w != g.in_w {
        return Err(Error::Dimension(format!(
            "col2im: columns {:?} inconsistent with target {target:?} and {}x{} kernel \
             (expected [{rows}, {k}])",
            cols.shape, g.kh, g.kw
        )));
    }
    let mut out = vec![T::zero(); m * h * w * c];
    let mut r = 0;
    for i in 0..m {
        let sample = &mut out[i * h * w * c..(i + 1) * h * w * c];
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let row = &cols.data[r * k..(r + 1) * k];
                r += 1;
                if row.iter().all(|v| v.is_zero()) {
                    continue;
                }
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        if let Some((y, xx)) = g.source(oy, ox, ky, kx) {
                            let src = (ky * g.kw + kx) * c;
                            let dst = (y * w + xx) * c;
                            for (d, &s) in sample[dst..dst + c].iter_mut().zip(&row[src..src + c])
                            {
                                *d += s;
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&target, out)
}

/// Indices of the `k` largest-magnitude entries, in ascending index order.
///
/// Ties in magnitude go to the lower index, so the result is a pure function
/// of the input values.
pub fn topk_indices<T: Scalar>(v: &[T], k: usize) -> Result<Vec<usize>> {
    if k > v.len() {
        return Err(Error::Argument(format!(
            "top-k with k = {k} exceeds slice length {}",
            v.len()
        )));
    }
    if k == v.len() {
        return Ok((0..v.len()).collect());
    }
    if k == 0 {
        return Ok(Vec::new());
    }
    let mut idx: Vec<usize> = (0..v.len()).collect();
    let by_rank = |&a: &usize, &b: &usize| -> Ordering {
        v[b].abs()
            .partial_cmp(&v[a].abs())
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    };
    idx.select_nth_unstable_by(k - 1, by_rank);
    idx.truncate(k);
    idx.sort_unstable();
    Ok(idx)
}

/// Binary mask (same shape as `v`) with ones at the [`topk_indices`] of `v`.
pub fn topk_mask<T: Scalar>(v: &Tensor<T>, k: usize) -> Result<Tensor<T>> {
    let mut mask = Tensor::zeros(v.shape());
    for i in topk_indices(v.data(), k)? {
        mask.data[i] = T::one();
    }
    Ok(mask)
}
