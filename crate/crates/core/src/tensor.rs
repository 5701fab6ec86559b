//! Dense four-dimensional tensors.
//!
//! Every tensor in the engine is an `n × w × h × c` block stored contiguously
//! in n-major order: the channel index varies fastest, then `y`, then `x`,
//! then the image index. [`Dims::index`] is the single place where that
//! mapping is written down; every kernel goes through it or through the
//! equivalent stride arithmetic it documents.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::Float;

use crate::error::{arg_err, shape_err, Result};

/// Floating point element type of a network. `f32` for training runs, `f64`
/// for derivative conformance checks.
pub trait Scalar:
    Float + Default + Debug + Display + Sum + Send + Sync + 'static
{
    /// Width of one element in bytes, as stored in checkpoints.
    const BYTES: usize;

    fn of(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const BYTES: usize = 4;

    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().expect("4 bytes"))
    }
}

impl Scalar for f64 {
    const BYTES: usize = 8;

    #[inline]
    fn of(v: f64) -> Self {
        v
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"))
    }
}

/// Extent of a [`Tensor4`]: image count, width, height, channels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Dims {
    pub n: usize,
    pub w: usize,
    pub h: usize,
    pub c: usize,
}

impl Dims {
    pub const fn new(n: usize, w: usize, h: usize, c: usize) -> Self {
        Dims { n, w, h, c }
    }

    pub fn len(&self) -> usize {
        self.n * self.w * self.h * self.c
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Elements per image.
    pub fn per_image(&self) -> usize {
        self.w * self.h * self.c
    }

    /// Linear offset of `(n, x, y, c)`.
    #[inline(always)]
    pub fn index(&self, n: usize, x: usize, y: usize, c: usize) -> usize {
        debug_assert!(n < self.n && x < self.w && y < self.h && c < self.c);
        ((n * self.w + x) * self.h + y) * self.c + c
    }

    /// Inverse of [`Dims::index`].
    pub fn unflatten(&self, mut i: usize) -> (usize, usize, usize, usize) {
        let c = i % self.c;
        i /= self.c;
        let y = i % self.h;
        i /= self.h;
        let x = i % self.w;
        (i / self.w, x, y, c)
    }

    pub fn with_n(self, n: usize) -> Self {
        Dims { n, ..self }
    }

    pub fn with_c(self, c: usize) -> Self {
        Dims { c, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.w == 0 || self.h == 0 || self.c == 0 {
            return Err(shape_err!("all dimensions must be >= 1, got {self}"));
        }
        Ok(())
    }
}

impl Display for Dims {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.w, self.h, self.c)
    }
}

/// Dense `n × w × h × c` tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor4<T> {
    dims: Dims,
    data: Vec<T>,
}

impl<T: Scalar> Tensor4<T> {
    pub fn zeros(dims: Dims) -> Self {
        Self::filled(dims, T::zero())
    }

    pub fn ones(dims: Dims) -> Self {
        Self::filled(dims, T::one())
    }

    pub fn filled(dims: Dims, v: T) -> Self {
        Tensor4 { dims, data: vec![v; dims.len()] }
    }

    pub fn from_vec(dims: Dims, data: Vec<T>) -> Result<Self> {
        dims.validate()?;
        if data.len() != dims.len() {
            return Err(shape_err!(
                "data length {} does not match dims {dims} ({})",
                data.len(),
                dims.len()
            ));
        }
        Ok(Tensor4 { dims, data })
    }

    pub fn from_fn(dims: Dims, mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(dims.len());
        for n in 0..dims.n {
            for x in 0..dims.w {
                for y in 0..dims.h {
                    for c in 0..dims.c {
                        data.push(f(n, x, y, c));
                    }
                }
            }
        }
        Tensor4 { dims, data }
    }

    #[inline]
    pub fn dims(&self) -> Dims {
        self.dims
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

    #[inline]
    pub fn at(&self, n: usize, x: usize, y: usize, c: usize) -> T {
        self.data[self.dims.index(n, x, y, c)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, x: usize, y: usize, c: usize, v: T) {
        let i = self.dims.index(n, x, y, c);
        self.data[i] = v;
    }

    /// Same data viewed with different dims of equal length.
    pub fn reshape(self, dims: Dims) -> Result<Self> {
        Self::from_vec(dims, self.data)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor4 { dims: self.dims, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.dims != other.dims {
            return Err(shape_err!("elementwise op on {} and {}", self.dims, other.dims));
        }
        Ok(Tensor4 {
            dims: self.dims,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, k: T) -> Self {
        self.map(|v| v * k)
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.dims != other.dims {
            return Err(shape_err!("accumulate {} into {}", other.dims, self.dims));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
        Ok(())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn abs_sum(&self) -> T {
        self.data.iter().map(|v| v.abs()).sum()
    }

    pub fn dot(&self, other: &Self) -> Result<T> {
        if self.dims != other.dims {
            return Err(shape_err!("dot of {} and {}", self.dims, other.dims));
        }
        Ok(self.data.iter().zip(&other.data).map(|(&a, &b)| a * b).sum())
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max)
    }

    /// Extract image `n` as a single-image tensor.
    pub fn image(&self, n: usize) -> Tensor4<T> {
        let per = self.dims.per_image();
        Tensor4 {
            dims: self.dims.with_n(1),
            data: self.data[n * per..(n + 1) * per].to_vec(),
        }
    }

    /// Stack single-image tensors of identical dims along `n`.
    pub fn stack(images: &[Tensor4<T>]) -> Result<Self> {
        let first = images.first().ok_or_else(|| arg_err!("cannot stack zero images"))?;
        let d = first.dims;
        let mut data = Vec::with_capacity(d.len() * images.len());
        for img in images {
            if img.dims.with_n(d.n) != d {
                return Err(shape_err!("stack of {} with {}", img.dims, d));
            }
            data.extend_from_slice(&img.data);
        }
        let n = data.len() / d.per_image();
        Ok(Tensor4 { dims: d.with_n(n), data })
    }

    pub fn cast<U: Scalar>(&self) -> Tensor4<U> {
        Tensor4 { dims: self.dims, data: self.data.iter().map(|&v| U::of(Scalar::to_f64(v))).collect() }
    }
}

/// `out[n,x,y,c] = a[n,x,y,0] · b[n,x,y,c]`, where `a` has a single channel.
pub fn entrywise_mul_broadcast<T: Scalar>(a: &Tensor4<T>, b: &Tensor4<T>) -> Result<Tensor4<T>> {
    let (da, db) = (a.dims(), b.dims());
    if da.c != 1 || da.with_c(db.c) != db {
        return Err(shape_err!("broadcast multiply needs a = n×w×h×1 matching b, got {da} and {db}"));
    }
    let c = db.c;
    let mut out = Vec::with_capacity(db.len());
    for (i, &m) in a.data().iter().enumerate() {
        for &v in &b.data()[i * c..(i + 1) * c] {
            out.push(m * v);
        }
    }
    Tensor4::from_vec(db, out)
}

/// Order of a vector norm.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QNorm {
    Finite(u32),
    Infinity,
}

impl QNorm {
    pub fn validate(self) -> Result<Self> {
        match self {
            QNorm::Finite(0) => Err(arg_err!("q-norm order must be >= 1 or infinity")),
            q => Ok(q),
        }
    }

    pub fn norm<T: Scalar>(self, values: &[T]) -> T {
        match self {
            QNorm::Infinity => values.iter().fold(T::zero(), |m, v| m.max(v.abs())),
            QNorm::Finite(1) => values.iter().map(|v| v.abs()).sum(),
            QNorm::Finite(2) => values.iter().map(|&v| v * v).sum::<T>().sqrt(),
            QNorm::Finite(q) => {
                // scale by the max to keep large q from overflowing
                let m = values.iter().fold(T::zero(), |m, v| m.max(v.abs()));
                if m == T::zero() {
                    return m;
                }
                let qi = q as i32;
                let s: T = values.iter().map(|&v| (v.abs() / m).powi(qi)).sum();
                m * s.powf(T::one() / T::of(q as f64))
            }
        }
    }
}

impl std::str::FromStr for QNorm {
    type Err = crate::error::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "inf" | "infinity" | "∞" => Ok(QNorm::Infinity),
            t => t
                .parse::<u32>()
                .map_err(|_| arg_err!("bad q-norm order {t:?}"))
                .and_then(|q| QNorm::Finite(q).validate()),
        }
    }
}

impl Display for QNorm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            QNorm::Infinity => write!(f, "inf"),
            QNorm::Finite(q) => write!(f, "{q}"),
        }
    }
}

/// Per-pixel q-norm across channels; the result has one channel.
pub fn channel_q_norm<T: Scalar>(t: &Tensor4<T>, q: QNorm) -> Result<Tensor4<T>> {
    let q = q.validate()?;
    let d = t.dims();
    let data = t.data().chunks_exact(d.c).map(|px| q.norm(px)).collect();
    Tensor4::from_vec(d.with_c(1), data)
}
