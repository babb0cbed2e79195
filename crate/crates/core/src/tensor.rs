//! Dense row-major tensors and the handful of primitives the block is built
//! from.
//!
//! Feature blobs use the axis order `(N, C, H, W)`: RoIs outermost, then
//! channels, then the aligned spatial grid. Every operation is a pure
//! function returning a fresh tensor, and loops run in a fixed order so that
//! results are bit-identical from run to run.

use std::fmt::{self, Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign};
use rand::Rng;

use crate::error::{Error, Result};

/// Element precision of a tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DType::F32 => "binary32",
            DType::F64 => "binary64",
        }
    }
}

impl Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// IEEE-754 scalar usable as a tensor element.
pub trait Real:
    Float + FromPrimitive + NumAssign + Sum + Default + Debug + Display + Send + Sync + 'static
{
    const DTYPE: DType;

    fn write_le(self, out: &mut Vec<u8>);

    /// Decodes one element from exactly `DTYPE.size()` bytes.
    fn read_le(bytes: &[u8]) -> Self;

    fn from_f64_lossy(v: f64) -> Self;

    fn to_f64_lossless(self) -> f64;

    /// Bit pattern widened to 64 bits, for exact comparisons.
    fn to_bits_u64(self) -> u64;
}

impl Real for f32 {
    const DTYPE: DType = DType::F32;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4-byte element"))
    }

    fn from_f64_lossy(v: f64) -> Self {
        v as f32
    }

    fn to_f64_lossless(self) -> f64 {
        self as f64
    }

    fn to_bits_u64(self) -> u64 {
        self.to_bits() as u64
    }
}

impl Real for f64 {
    const DTYPE: DType = DType::F64;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8-byte element"))
    }

    fn from_f64_lossy(v: f64) -> Self {
        v
    }

    fn to_f64_lossless(self) -> f64 {
        self
    }

    fn to_bits_u64(self) -> u64 {
        self.to_bits()
    }
}

/// Dense n-dimensional array, row-major with the last axis fastest.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Debug> Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOWN: usize = 16;
        let mut s = f.debug_struct("Tensor");
        s.field("shape", &self.shape);
        if self.data.len() <= SHOWN {
            s.field("data", &self.data);
        } else {
            s.field("data", &format_args!("{:?}.. ({} total)", &self.data[..SHOWN], self.data.len()));
        }
        s.finish()
    }
}

impl<T: Real> Tensor<T> {
    /// Builds a tensor from a shape and row-major data. Extents may be zero
    /// (an empty channel block is a valid concat operand), but the rank must
    /// be at least one.
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        if shape.is_empty() {
            return Err(Error::invalid("tensor", "rank must be at least 1"));
        }
        let expected = checked_volume(&shape)
            .ok_or_else(|| Error::invalid("tensor", format!("shape {shape:?} overflows")))?;
        if expected != data.len() {
            return Err(Error::invalid(
                "tensor",
                format!("shape {shape:?} needs {expected} elements, got {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        assert!(!shape.is_empty(), "rank must be at least 1");
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    /// Fills a tensor by evaluating `f` at each flat index.
    pub fn from_fn(shape: impl Into<Vec<usize>>, f: impl FnMut(usize) -> T) -> Self {
        let shape = shape.into();
        assert!(!shape.is_empty(), "rank must be at least 1");
        let n = shape.iter().product();
        Self {
            shape,
            data: (0..n).map(f).collect(),
        }
    }

    /// Samples every element i.i.d. from `uniform(lo, hi)`. Values are drawn
    /// in binary64 and rounded, so f32 and f64 tensors from the same stream
    /// agree up to rounding.
    pub fn uniform<R: Rng + ?Sized>(shape: impl Into<Vec<usize>>, lo: f64, hi: f64, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| T::from_f64_lossy(rng.random_range(lo..hi)))
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn([n, n], |k| if k / n == k % n { T::one() } else { T::zero() })
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

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn dtype(&self) -> DType {
        T::DTYPE
    }

    /// Element at a multi-index. Panics when out of bounds.
    pub fn at(&self, index: &[usize]) -> T {
        assert_eq!(index.len(), self.shape.len(), "index rank");
        let mut flat = 0;
        for (&i, &extent) in index.iter().zip(&self.shape) {
            assert!(i < extent, "index {index:?} out of bounds for {:?}", self.shape);
            flat = flat * extent + i;
        }
        self.data[flat]
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if checked_volume(&shape) != Some(self.data.len()) || shape.is_empty() {
            return Err(Error::shape("reshape", &self.shape, &shape));
        }
        Ok(Self {
            shape,
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape("zip_map", &self.shape, &other.shape));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn scale(&self, factor: T) -> Self {
        self.map(|v| v * factor)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|&v| U::from_f64_lossy(v.to_f64_lossless()))
                .collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Bitwise equality, distinguishing `0.0` from `-0.0`.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits_u64() == b.to_bits_u64())
    }

    /// Largest `|a - b| / max(1, |a|, |b|)` over all elements.
    pub fn max_rel_diff(&self, other: &Self) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::shape("max_rel_diff", &self.shape, &other.shape));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| rel_err(a.to_f64_lossless(), b.to_f64_lossless()))
            .fold(0.0, f64::max))
    }

    /// Matrix transpose of a 2-D tensor.
    pub fn transpose(&self) -> Result<Self> {
        let [rows, cols] = dims2("transpose", self)?;
        let mut data = Vec::with_capacity(self.data.len());
        for c in 0..cols {
            for r in 0..rows {
                data.push(self.data[r * cols + c]);
            }
        }
        Ok(Self {
            shape: vec![cols, rows],
            data,
        })
    }

    /// Channels `[start, end)` of an `(N, C, H, W)` blob.
    pub fn slice_channels(&self, start: usize, end: usize) -> Result<Self> {
        let [n, c, h, w] = dims4("slice_channels", self)?;
        if start > end || end > c {
            return Err(Error::invalid(
                "slice_channels",
                format!("range {start}..{end} outside {c} channels"),
            ));
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(n * (end - start) * plane);
        for roi in 0..n {
            let base = roi * c * plane;
            data.extend_from_slice(&self.data[base + start * plane..base + end * plane]);
        }
        Ok(Self {
            shape: vec![n, end - start, h, w],
            data,
        })
    }

    /// Reorders the leading (RoI) axis: row `k` of the result is row
    /// `perm[k]` of `self`.
    pub fn permute_rois(&self, perm: &[usize]) -> Result<Self> {
        let n = self.shape[0];
        if perm.len() != n || !is_permutation(perm) {
            return Err(Error::invalid(
                "permute_rois",
                format!("{perm:?} is not a permutation of 0..{n}"),
            ));
        }
        let row = self.data.len() / n.max(1);
        let mut data = Vec::with_capacity(self.data.len());
        for &src in perm {
            data.extend_from_slice(&self.data[src * row..(src + 1) * row]);
        }
        Ok(Self {
            shape: self.shape.clone(),
            data,
        })
    }
}

/// Mixed absolute/relative error used throughout: `|a - b| / max(1, |a|, |b|)`.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1f64.max(a.abs()).max(b.abs())
}

fn checked_volume(shape: &[usize]) -> Option<usize> {
    shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d))
}

fn is_permutation(perm: &[usize]) -> bool {
    let mut seen = vec![false; perm.len()];
    perm.iter().all(|&p| p < perm.len() && !std::mem::replace(&mut seen[p], true))
}

pub(crate) fn dims2<T: Real>(op: &'static str, t: &Tensor<T>) -> Result<[usize; 2]> {
    t.shape()
        .try_into()
        .map_err(|_| Error::invalid(op, format!("expected a 2-D tensor, got shape {:?}", t.shape())))
}

pub(crate) fn dims4<T: Real>(op: &'static str, t: &Tensor<T>) -> Result<[usize; 4]> {
    t.shape().try_into().map_err(|_| {
        Error::invalid(op, format!("expected an (N, C, H, W) tensor, got shape {:?}", t.shape()))
    })
}

fn check_bias<T: Real>(op: &'static str, b: Option<&Tensor<T>>, out_channels: usize) -> Result<()> {
    match b {
        Some(b) if b.shape() != [out_channels] => Err(Error::shape(op, b.shape(), &[out_channels])),
        _ => Ok(()),
    }
}

/// Pointwise channel mixing: `out[n,o,h,w] = sum_d w[o,d] * x[n,d,h,w] + b[o]`.
pub fn conv1x1<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let [n, d_in, h, wd] = dims4("conv1x1", x)?;
    let [d_out, w_in] = dims2("conv1x1", w)?;
    if w_in != d_in {
        return Err(Error::shape("conv1x1", x.shape(), w.shape()));
    }
    check_bias("conv1x1", b, d_out)?;
    let plane = h * wd;
    let xs = x.data();
    let ws = w.data();
    let mut out = vec![T::zero(); n * d_out * plane];
    for roi in 0..n {
        let x_roi = &xs[roi * d_in * plane..(roi + 1) * d_in * plane];
        for o in 0..d_out {
            let dst = &mut out[(roi * d_out + o) * plane..(roi * d_out + o + 1) * plane];
            if let Some(b) = b {
                dst.fill(b.data()[o]);
            }
            for d in 0..d_in {
                let coef = ws[o * d_in + d];
                let src = &x_roi[d * plane..(d + 1) * plane];
                for (acc, &v) in dst.iter_mut().zip(src) {
                    *acc += coef * v;
                }
            }
        }
    }
    Tensor::new([n, d_out, h, wd], out)
}

/// 3x3 convolution, stride 1, zero padding 1: the spatial size is preserved.
pub fn conv3x3<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let [n, d_in, h, wd] = dims4("conv3x3", x)?;
    let shape = w.shape();
    if shape.len() != 4 || shape[1] != d_in || shape[2] != 3 || shape[3] != 3 {
        return Err(Error::shape("conv3x3", x.shape(), w.shape()));
    }
    let d_out = shape[0];
    check_bias("conv3x3", b, d_out)?;
    let plane = h * wd;
    let xs = x.data();
    let ws = w.data();
    let mut out = vec![T::zero(); n * d_out * plane];
    for roi in 0..n {
        for o in 0..d_out {
            let dst = &mut out[(roi * d_out + o) * plane..(roi * d_out + o + 1) * plane];
            if let Some(b) = b {
                dst.fill(b.data()[o]);
            }
            for d in 0..d_in {
                let src = &xs[(roi * d_in + d) * plane..(roi * d_in + d + 1) * plane];
                let kernel = &ws[(o * d_in + d) * 9..(o * d_in + d + 1) * 9];
                for ky in 0..3 {
                    for kx in 0..3 {
                        let coef = kernel[ky * 3 + kx];
                        // Output rows/cols whose tap (row + ky - 1, col + kx - 1) is in bounds.
                        let (r0, r1) = tap_range(ky, h);
                        let (c0, c1) = tap_range(kx, wd);
                        for r in r0..r1 {
                            let sr = r + ky - 1;
                            for c in c0..c1 {
                                dst[r * wd + c] += coef * src[sr * wd + c + kx - 1];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new([n, d_out, h, wd], out)
}

/// Output positions `[lo, hi)` for which `pos + k - 1` lies in `[0, extent)`.
pub(crate) fn tap_range(k: usize, extent: usize) -> (usize, usize) {
    match k {
        0 => (1.min(extent), extent),
        1 => (0, extent),
        _ => (0, extent.saturating_sub(1)),
    }
}

pub fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// `(N, C, H, W) -> (N, C*H*W)`; each row is the row-major flattening of one RoI.
pub fn flatten_rois<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = dims4("flatten_rois", x)?;
    x.reshape([n, c * h * w])
}

pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let [m, k] = dims2("matmul", a)?;
    let [kb, p] = dims2("matmul", b)?;
    if k != kb {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![T::zero(); m * p];
    for i in 0..m {
        let row = &mut out[i * p..(i + 1) * p];
        for kk in 0..k {
            let coef = ad[i * k + kk];
            for (acc, &v) in row.iter_mut().zip(&bd[kk * p..(kk + 1) * p]) {
                *acc += coef * v;
            }
        }
    }
    Tensor::new([m, p], out)
}

/// Softmax over each row of a 2-D tensor, computed after subtracting the row
/// maximum. Entries are floored at the smallest positive normal value so the
/// result stays strictly positive when a logit gap exceeds the exponent range.
pub fn row_softmax<T: Real>(s: &Tensor<T>) -> Result<Tensor<T>> {
    let [rows, cols] = dims2("row_softmax", s)?;
    if cols == 0 {
        return Err(Error::invalid("row_softmax", "rows must be non-empty"));
    }
    let floor = T::min_positive_value();
    let mut out = Vec::with_capacity(rows * cols);
    for row in s.data().chunks_exact(cols) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let start = out.len();
        let mut total = T::zero();
        for &v in row {
            let e = (v - max).exp();
            total += e;
            out.push(e);
        }
        for p in &mut out[start..] {
            *p = (*p / total).max(floor);
        }
    }
    Tensor::new([rows, cols], out)
}

/// Mean over the spatial plane: `(N, C, H, W) -> (N, C)`.
pub fn global_avg_pool<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = dims4("global_avg_pool", x)?;
    let plane = h * w;
    if plane == 0 {
        return Err(Error::invalid("global_avg_pool", "spatial extent must be non-empty"));
    }
    let count = T::from_usize(plane).expect("plane size fits in a float");
    let data = x
        .data()
        .chunks_exact(plane)
        .map(|p| p.iter().copied().sum::<T>() / count)
        .collect();
    Tensor::new([n, c], data)
}

/// Broadcasts each `(n, c)` value across an `h x w` plane.
pub fn tile_spatial<T: Real>(v: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let [n, c] = dims2("tile_spatial", v)?;
    if h == 0 || w == 0 {
        return Err(Error::invalid("tile_spatial", format!("tile extent {h}x{w} must be positive")));
    }
    let mut data = Vec::with_capacity(n * c * h * w);
    for &value in v.data() {
        data.extend(std::iter::repeat_n(value, h * w));
    }
    Tensor::new([n, c, h, w], data)
}

/// Stacks `b`'s channels after `a`'s.
pub fn concat_channels<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c1, h, w] = dims4("concat_channels", a)?;
    let [nb, c2, hb, wb] = dims4("concat_channels", b)?;
    if (n, h, w) != (nb, hb, wb) {
        return Err(Error::shape("concat_channels", a.shape(), b.shape()));
    }
    let (ra, rb) = (c1 * h * w, c2 * h * w);
    let mut data = Vec::with_capacity(n * (ra + rb));
    for roi in 0..n {
        data.extend_from_slice(&a.data()[roi * ra..(roi + 1) * ra]);
        data.extend_from_slice(&b.data()[roi * rb..(roi + 1) * rb]);
    }
    Tensor::new([n, c1 + c2, h, w], data)
}
