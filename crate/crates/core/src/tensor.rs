//! Dense row-major tensors.
//!
//! `Tensor` is deliberately minimal: a shape plus a flat buffer. Feature maps use
//! the `[B, C, H, W]` layout and token sequences use `[B, T, C]` with `T = H * W`
//! flattened row-major.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use crate::error::{Error, Result};

/// Floating-point element type. Training runs in `f32`; gradient checks in `f64`.
pub trait Real:
    num_traits::Float
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    fn cst(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    #[inline(always)]
    fn cst(v: f64) -> Self {
        v as f32
    }
    #[inline(always)]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline(always)]
    fn cst(v: f64) -> Self {
        v
    }
    #[inline(always)]
    fn as_f64(self) -> f64 {
        self
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor<F = f32> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Debug> Debug for Tensor<F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let head: Vec<_> = self.data.iter().take(8).collect();
        write!(f, "Tensor{:?} {:?}", self.shape, head)?;
        if self.data.len() > 8 {
            write!(f, "..")?;
        }
        Ok(())
    }
}

impl<F: Real> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim("Tensor::new", format!("shape {shape:?} needs {n} elements, got {}", data.len())));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, F::zero())
    }

    pub fn full(shape: &[usize], v: F) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![v; n] }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> F) -> Self {
        let n: usize = shape.iter().product();
        Self { shape: shape.to_vec(), data: (0..n).map(&mut f).collect() }
    }

    pub fn scalar(v: F) -> Self {
        Self { shape: vec![1], data: vec![v] }
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    #[inline]
    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    #[inline]
    pub fn numel(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn data(&self) -> &[F] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    /// Interprets the tensor as `[B, C, H, W]`.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [b, c, h, w] => Ok((b, c, h, w)),
            _ => Err(Error::dim("dims4", format!("expected rank-4 tensor, got shape {:?}", self.shape))),
        }
    }

    /// Interprets the tensor as `[B, T, C]`.
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [b, t, c] => Ok((b, t, c)),
            _ => Err(Error::dim("dims3", format!("expected rank-3 tensor, got shape {:?}", self.shape))),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::dim("reshape", format!("cannot view {:?} as {shape:?}", self.shape)));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn ensure_shape(&self, op: &'static str, expected: &[usize]) -> Result<()> {
        if self.shape != expected {
            return Err(Error::Shape { op, expected: expected.to_vec(), actual: self.shape.clone() });
        }
        Ok(())
    }

    pub fn same_shape(&self, op: &'static str, other: &Self) -> Result<()> {
        self.ensure_shape(op, &other.shape)
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    /// Elementwise combination; shapes must already agree.
    pub fn zip_map(&self, other: &Self, f: impl Fn(F, F) -> F) -> Self {
        debug_assert_eq!(self.shape, other.shape);
        Self { shape: self.shape.clone(), data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect() }
    }

    pub fn add(&self, other: &Self) -> Self {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Self {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, s: F) -> Self {
        self.map(|v| v * s)
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> F {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> F {
        self.sum() / F::cst(self.data.len() as f64)
    }

    pub fn norm_sq(&self) -> F {
        self.data.iter().map(|&v| v * v).sum()
    }

    pub fn max_abs(&self) -> F {
        self.data.iter().fold(F::zero(), |m, &v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Self) -> F {
        self.data.iter().zip(&other.data).fold(F::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<G: Real>(&self) -> Tensor<G> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| G::cst(v.as_f64())).collect() }
    }

    /// `[B, C, H, W]` -> `[B, H*W, C]`.
    pub fn to_tokens(&self) -> Result<Self> {
        let (b, c, h, w) = self.dims4()?;
        let t = h * w;
        let mut out = vec![F::zero(); self.data.len()];
        for bi in 0..b {
            let src = &self.data[bi * c * t..(bi + 1) * c * t];
            let dst = &mut out[bi * c * t..(bi + 1) * c * t];
            for ci in 0..c {
                for ti in 0..t {
                    dst[ti * c + ci] = src[ci * t + ti];
                }
            }
        }
        Tensor::new(vec![b, t, c], out)
    }

    /// `[B, H*W, C]` -> `[B, C, H, W]`.
    pub fn to_map(&self, height: usize, width: usize) -> Result<Self> {
        let (b, t, c) = self.dims3()?;
        if t != height * width {
            return Err(Error::dim("to_map", format!("{t} tokens cannot form a {height}x{width} grid")));
        }
        let mut out = vec![F::zero(); self.data.len()];
        for bi in 0..b {
            let src = &self.data[bi * c * t..(bi + 1) * c * t];
            let dst = &mut out[bi * c * t..(bi + 1) * c * t];
            for ti in 0..t {
                for ci in 0..c {
                    dst[ci * t + ti] = src[ti * c + ci];
                }
            }
        }
        Tensor::new(vec![b, c, height, width], out)
    }

    /// Concatenates `[B, C_i, H, W]` maps along the channel axis.
    pub fn concat_channels(parts: &[&Self]) -> Result<Self> {
        let (b, _, h, w) = parts.first().ok_or_else(|| Error::dim("concat_channels", "no inputs"))?.dims4()?;
        let mut total = 0;
        for p in parts {
            let (pb, pc, ph, pw) = p.dims4()?;
            if (pb, ph, pw) != (b, h, w) {
                return Err(Error::Shape {
                    op: "concat_channels",
                    expected: vec![b, pc, h, w],
                    actual: p.shape.clone(),
                });
            }
            total += pc;
        }
        let hw = h * w;
        let mut data = Vec::with_capacity(b * total * hw);
        for bi in 0..b {
            for p in parts {
                let pc = p.shape[1];
                data.extend_from_slice(&p.data[bi * pc * hw..(bi + 1) * pc * hw]);
            }
        }
        Tensor::new(vec![b, total, h, w], data)
    }

    /// Channels `[start, start + len)` of a `[B, C, H, W]` map.
    pub fn slice_channels(&self, start: usize, len: usize) -> Result<Self> {
        let (b, c, h, w) = self.dims4()?;
        if start + len > c {
            return Err(Error::dim("slice_channels", format!("range {start}..{} exceeds {c} channels", start + len)));
        }
        let hw = h * w;
        let mut data = Vec::with_capacity(b * len * hw);
        for bi in 0..b {
            let base = (bi * c + start) * hw;
            data.extend_from_slice(&self.data[base..base + len * hw]);
        }
        Tensor::new(vec![b, len, h, w], data)
    }

    /// Concatenates tensors along the leading batch axis.
    pub fn stack_batch(parts: &[&Self]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::dim("stack_batch", "no inputs"))?;
        let inner = &first.shape[1..];
        let mut b = 0;
        let mut data = Vec::new();
        for p in parts {
            if &p.shape[1..] != inner {
                return Err(Error::Shape { op: "stack_batch", expected: first.shape.clone(), actual: p.shape.clone() });
            }
            b += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = vec![b];
        shape.extend_from_slice(inner);
        Tensor::new(shape, data)
    }

    /// Sample `i` of a batched tensor, keeping a leading axis of size 1.
    pub fn batch_item(&self, i: usize) -> Result<Self> {
        let b = self.shape[0];
        if i >= b {
            return Err(Error::dim("batch_item", format!("index {i} >= batch {b}")));
        }
        let per = self.data.len() / b;
        let mut shape = self.shape.clone();
        shape[0] = 1;
        Tensor::new(shape, self.data[i * per..(i + 1) * per].to_vec())
    }
}
