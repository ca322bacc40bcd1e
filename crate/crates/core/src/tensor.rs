//! Dense 4-D `f32` tensors in (batch, channel, row, col) layout.

use std::fmt;

use rand::Rng;

use crate::error::{Error, Result};

#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape4 {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape4 {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self { n, c, h, w }
    }

    pub const fn scalar() -> Self {
        Self::new(1, 1, 1, 1)
    }

    pub const fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Elements in one (h, w) plane.
    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    /// Elements in one batch item.
    pub const fn item(&self) -> usize {
        self.c * self.h * self.w
    }

    pub const fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.c + c) * self.h + y) * self.w + x
    }

    pub const fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }
}

impl fmt::Debug for Shape4 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

impl From<[usize; 4]> for Shape4 {
    fn from(d: [usize; 4]) -> Self {
        Self::new(d[0], d[1], d[2], d[3])
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor4 {
    shape: Shape4,
    data: Vec<f32>,
}

impl fmt::Debug for Tensor4 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor4")
            .field("shape", &self.shape)
            .field("len", &self.data.len())
            .finish()
    }
}

impl Tensor4 {
    pub fn zeros(shape: impl Into<Shape4>) -> Self {
        let shape = shape.into();
        Self {
            shape,
            data: vec![0.0; shape.len()],
        }
    }

    pub fn full(shape: impl Into<Shape4>, value: f32) -> Self {
        let shape = shape.into();
        Self {
            shape,
            data: vec![value; shape.len()],
        }
    }

    pub fn scalar(value: f32) -> Self {
        Self::full(Shape4::scalar(), value)
    }

    pub fn from_vec(shape: impl Into<Shape4>, data: Vec<f32>) -> Result<Self> {
        let shape = shape.into();
        if data.len() != shape.len() {
            return Err(Error::dim("Tensor4::from_vec", shape, data.len()));
        }
        Ok(Self { shape, data })
    }

    /// Uniform samples in `[lo, hi)`.
    pub fn uniform<R: Rng + ?Sized>(shape: impl Into<Shape4>, lo: f32, hi: f32, rng: &mut R) -> Self {
        let shape = shape.into();
        let data = (0..shape.len()).map(|_| rng.random_range(lo..hi)).collect();
        Self { shape, data }
    }

    pub fn shape(&self) -> Shape4 {
        self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
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

    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.shape.index(n, c, y, x)]
    }

    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: f32) {
        let i = self.shape.index(n, c, y, x);
        self.data[i] = v;
    }

    /// Borrow batch item `n` as a flat (c, h, w) slice.
    pub fn item(&self, n: usize) -> &[f32] {
        let len = self.shape.item();
        &self.data[n * len..(n + 1) * len]
    }

    /// Value of a single-element tensor.
    pub fn item_value(&self) -> Option<f32> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    pub fn reshape(self, shape: impl Into<Shape4>) -> Result<Self> {
        let shape = shape.into();
        if shape.len() != self.data.len() {
            return Err(Error::dim("Tensor4::reshape", self.shape, shape));
        }
        Ok(Self {
            shape,
            data: self.data,
        })
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn fill(&mut self, value: f32) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    /// `self += other`, elementwise.
    pub fn add_assign(&mut self, other: &Tensor4) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::dim("Tensor4::add_assign", self.shape, other.shape));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
        Ok(())
    }

    /// Channels `[start, start + count)` of every batch item.
    pub fn channels(&self, start: usize, count: usize) -> Result<Self> {
        let s = self.shape;
        if start + count > s.c {
            return Err(Error::dim("Tensor4::channels", s, (start, count)));
        }
        let plane = s.plane();
        let mut data = Vec::with_capacity(s.n * count * plane);
        for n in 0..s.n {
            let base = s.index(n, start, 0, 0);
            data.extend_from_slice(&self.data[base..base + count * plane]);
        }
        Ok(Self {
            shape: Shape4::new(s.n, count, s.h, s.w),
            data,
        })
    }
}

/// Row-major `c = alpha * a(m×k) · b(k×n) + beta * c`, with explicit strides so
/// transposed operands need no copies.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f32,
    a: &[f32],
    a_strides: (isize, isize),
    b: &[f32],
    b_strides: (isize, isize),
    beta: f32,
    c: &mut [f32],
) {
    debug_assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the strides describe in-bounds views of `a` (m×k), `b` (k×n)
    // and `c` (m×n, row-major contiguous), which callers size accordingly.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
