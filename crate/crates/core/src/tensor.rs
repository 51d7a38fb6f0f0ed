//! Dense rank-4 tensors in `(batch, channels, rows, cols)` row-major order.

use std::fmt;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;

use crate::error::{Error, Result};

/// On-disk element type code.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32 = 0,
    F64 = 1,
}

impl DType {
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
}

/// Scalar type of a tensor. Training runs in `f32`; `f64` exists for gradient checks.
pub trait Real:
    Float
    + Default
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + 'static
{
    const DTYPE: DType;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Real for f32 {
    const DTYPE: DType = DType::F32;

    #[inline]
    fn from_f64(v: f64) -> Self {
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
    fn from_f64(v: f64) -> Self {
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

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Shape4 {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape4 {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape4 { n, c, h, w }
    }

    pub const fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    pub const fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    #[inline]
    pub const fn index(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.c + c) * self.h + h) * self.w + w
    }

    pub(crate) fn check(&self, op: &'static str) -> Result<()> {
        for (dim, v) in [("n", self.n), ("c", self.c), ("h", self.h), ("w", self.w)] {
            if v == 0 {
                return Err(Error::arg(op, format!("dimension {dim} must be >= 1")));
            }
        }
        Ok(())
    }

    /// Errors naming the first dimension that differs from `expected`.
    pub(crate) fn expect(&self, op: &'static str, expected: Shape4) -> Result<()> {
        let names = ["n", "c", "h", "w"];
        for ((name, e), a) in names.iter().zip(expected.dims()).zip(self.dims()) {
            if e != a {
                return Err(Error::shape(op, name, e, a));
            }
        }
        Ok(())
    }
}

impl fmt::Display for Shape4 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor4<T> {
    shape: Shape4,
    data: Vec<T>,
}

impl<T: fmt::Debug> fmt::Debug for Tensor4<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor4")
            .field("shape", &self.shape)
            .field("len", &self.data.len())
            .finish()
    }
}

impl<T: Real> Tensor4<T> {
    /// Zero-filled tensor. Panics on a zero dimension.
    pub fn zeros(shape: Shape4) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: Shape4, value: T) -> Self {
        assert!(!shape.is_empty(), "tensor dimensions must be >= 1, got {shape}");
        Tensor4 {
            shape,
            data: vec![value; shape.len()],
        }
    }

    pub fn from_vec(shape: Shape4, data: Vec<T>) -> Result<Self> {
        shape.check("Tensor4::from_vec")?;
        if data.len() != shape.len() {
            return Err(Error::shape(
                "Tensor4::from_vec",
                "data length",
                shape.len(),
                data.len(),
            ));
        }
        Ok(Tensor4 { shape, data })
    }

    pub fn from_fn(shape: Shape4, mut f: impl FnMut(usize) -> T) -> Self {
        assert!(!shape.is_empty(), "tensor dimensions must be >= 1, got {shape}");
        Tensor4 {
            shape,
            data: (0..shape.len()).map(&mut f).collect(),
        }
    }

    #[inline]
    pub fn shape(&self) -> Shape4 {
        self.shape
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        self.data[self.shape.index(n, c, h, w)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, v: T) {
        let i = self.shape.index(n, c, h, w);
        self.data[i] = v;
    }

    /// The `h × w` plane at batch `n`, channel `c`.
    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &self.data[start..start + p]
    }

    /// Same data under a new shape of equal length.
    pub fn reshape(self, shape: Shape4) -> Result<Self> {
        Self::from_vec(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor4 {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn fill(&mut self, v: T) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    /// `self += other`, element by element.
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        other.shape.expect("add_assign", self.shape)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Elementwise equality on the bit level (distinguishes `-0.0` from `0.0`).
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.as_f64().to_bits() == b.as_f64().to_bits())
    }

    pub fn cast<U: Real>(&self) -> Tensor4<U> {
        Tensor4 {
            shape: self.shape,
            data: self.data.iter().map(|&v| U::from_f64(v.as_f64())).collect(),
        }
    }

    /// Stacks `a` and `b` along the channel axis.
    pub fn concat_channels(a: &Self, b: &Self) -> Result<Self> {
        let (sa, sb) = (a.shape, b.shape);
        if sa.n != sb.n {
            return Err(Error::shape("concat_channels", "n", sa.n, sb.n));
        }
        if sa.h != sb.h {
            return Err(Error::shape("concat_channels", "h", sa.h, sb.h));
        }
        if sa.w != sb.w {
            return Err(Error::shape("concat_channels", "w", sa.w, sb.w));
        }
        let shape = Shape4::new(sa.n, sa.c + sb.c, sa.h, sa.w);
        let (ca, cb) = (sa.c * sa.plane(), sb.c * sb.plane());
        let mut data = Vec::with_capacity(shape.len());
        for n in 0..sa.n {
            data.extend_from_slice(&a.data[n * ca..(n + 1) * ca]);
            data.extend_from_slice(&b.data[n * cb..(n + 1) * cb]);
        }
        Ok(Tensor4 { shape, data })
    }

    /// Inverse of [`Tensor4::concat_channels`]: the first `c_first` channels and the rest.
    pub fn split_channels(&self, c_first: usize) -> Result<(Self, Self)> {
        let s = self.shape;
        if c_first == 0 || c_first >= s.c {
            return Err(Error::arg(
                "split_channels",
                format!("split point {c_first} outside 1..{}", s.c),
            ));
        }
        let p = s.plane();
        let mut a = Vec::with_capacity(s.n * c_first * p);
        let mut b = Vec::with_capacity(s.n * (s.c - c_first) * p);
        for n in 0..s.n {
            let base = n * s.c * p;
            a.extend_from_slice(&self.data[base..base + c_first * p]);
            b.extend_from_slice(&self.data[base + c_first * p..base + s.c * p]);
        }
        Ok((
            Tensor4 {
                shape: Shape4::new(s.n, c_first, s.h, s.w),
                data: a,
            },
            Tensor4 {
                shape: Shape4::new(s.n, s.c - c_first, s.h, s.w),
                data: b,
            },
        ))
    }

    /// Debug-build guard: panics when a forward produced NaN or infinity.
    #[inline]
    pub(crate) fn debug_assert_finite(&self, op: &str) {
        debug_assert!(self.all_finite(), "{op} produced a non-finite value");
        let _ = op;
    }
}
