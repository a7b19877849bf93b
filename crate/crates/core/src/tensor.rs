//! Dense 4-D tensors over `(x, y, z, channel)`.
//!
//! Storage is a single contiguous `Vec<f64>` with the channel axis varying
//! fastest, then x, then y, with z slowest:
//!
//! ```text
//! offset(x, y, z, c) = c + C * (x + X * (y + Y * z))
//! ```
//!
//! Every operation in the crate reads and writes this order directly; there
//! are no strided views and no hidden transposes.

use std::fmt;

use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape4 {
    pub x: usize,
    pub y: usize,
    pub z: usize,
    pub c: usize,
}

impl Shape4 {
    pub fn new(x: usize, y: usize, z: usize, c: usize) -> Result<Self> {
        let shape = Shape4 { x, y, z, c };
        shape.validate()?;
        Ok(shape)
    }

    pub fn validate(&self) -> Result<()> {
        let dims = self.dims();
        if dims.contains(&0) {
            return Err(Error::EmptyExtent(dims));
        }
        dims.iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or(Error::ShapeOverflow(dims))?;
        Ok(())
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.x, self.y, self.z, self.c]
    }

    pub fn spatial(&self) -> [usize; 3] {
        [self.x, self.y, self.z]
    }

    pub fn voxels(&self) -> usize {
        self.x * self.y * self.z
    }

    pub fn len(&self) -> usize {
        self.voxels() * self.c
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn offset(&self, x: usize, y: usize, z: usize, c: usize) -> usize {
        debug_assert!(x < self.x && y < self.y && z < self.z && c < self.c);
        c + self.c * (x + self.x * (y + self.y * z))
    }

    #[inline]
    pub fn voxel_index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.x * (y + self.y * z)
    }

    pub fn with_channels(&self, c: usize) -> Shape4 {
        Shape4 { c, ..*self }
    }

    pub fn same_spatial(&self, other: &Shape4) -> bool {
        self.spatial() == other.spatial()
    }
}

impl fmt::Display for Shape4 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.x, self.y, self.z, self.c)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    shape: Shape4,
    data: Vec<f64>,
}

impl Tensor4 {
    pub fn zeros(shape: Shape4) -> Result<Self> {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: Shape4, value: f64) -> Result<Self> {
        shape.validate()?;
        Ok(Tensor4 {
            shape,
            data: vec![value; shape.len()],
        })
    }

    pub fn from_vec(shape: Shape4, data: Vec<f64>) -> Result<Self> {
        shape.validate()?;
        if data.len() != shape.len() {
            return Err(Error::InvalidShape(format!(
                "buffer of {} elements does not fit shape {shape}",
                data.len()
            )));
        }
        Ok(Tensor4 { shape, data })
    }

    /// Fills the tensor with `f(x, y, z, c)` in layout order.
    pub fn from_fn(shape: Shape4, mut f: impl FnMut(usize, usize, usize, usize) -> f64) -> Result<Self> {
        shape.validate()?;
        let mut data = Vec::with_capacity(shape.len());
        for z in 0..shape.z {
            for y in 0..shape.y {
                for x in 0..shape.x {
                    for c in 0..shape.c {
                        data.push(f(x, y, z, c));
                    }
                }
            }
        }
        Ok(Tensor4 { shape, data })
    }

    /// Elements `0, 1, 2, ...` in layout order.
    pub fn arange(shape: Shape4) -> Result<Self> {
        shape.validate()?;
        Ok(Tensor4 {
            shape,
            data: (0..shape.len()).map(|i| i as f64).collect(),
        })
    }

    pub fn scalar(value: f64) -> Self {
        Tensor4 {
            shape: Shape4 { x: 1, y: 1, z: 1, c: 1 },
            data: vec![value],
        }
    }

    /// I.i.d. normal samples drawn in layout order.
    pub fn gaussian(shape: Shape4, mu: f64, sigma: f64, rng: &mut Rng) -> Result<Self> {
        if !(sigma.is_finite() && sigma >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "gaussian sigma must be finite and non-negative, got {sigma}"
            )));
        }
        shape.validate()?;
        let data = (0..shape.len()).map(|_| mu + sigma * rng.standard_normal()).collect();
        Ok(Tensor4 { shape, data })
    }

    pub fn uniform(shape: Shape4, lo: f64, hi: f64, rng: &mut Rng) -> Result<Self> {
        shape.validate()?;
        let data = (0..shape.len()).map(|_| rng.uniform(lo, hi)).collect();
        Ok(Tensor4 { shape, data })
    }

    pub fn shape(&self) -> Shape4 {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize, c: usize) -> f64 {
        self.data[self.shape.offset(x, y, z, c)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, c: usize, v: f64) {
        let o = self.shape.offset(x, y, z, c);
        self.data[o] = v;
    }

    /// Channel fiber at one voxel.
    pub fn fiber(&self, x: usize, y: usize, z: usize) -> &[f64] {
        let start = self.shape.offset(x, y, z, 0);
        &self.data[start..start + self.shape.c]
    }

    pub fn reshape(self, shape: Shape4) -> Result<Self> {
        Self::from_vec(shape, self.data)
    }

    fn check_same(&self, other: &Tensor4) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                expected: self.shape,
                actual: other.shape,
            });
        }
        Ok(())
    }

    pub fn zip_map(&self, other: &Tensor4, f: impl Fn(f64, f64) -> f64) -> Result<Tensor4> {
        self.check_same(other)?;
        Ok(Tensor4 {
            shape: self.shape,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add(&self, other: &Tensor4) -> Result<Tensor4> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor4) -> Result<Tensor4> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor4) -> Result<Tensor4> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, s: f64) -> Tensor4 {
        self.map(|v| v * s)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor4 {
        Tensor4 {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor4) -> Result<()> {
        self.check_same(other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// `self += s * other`
    pub fn axpy(&mut self, s: f64, other: &Tensor4) -> Result<()> {
        self.check_same(other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    /// Population variance.
    pub fn variance(&self) -> f64 {
        let m = self.mean();
        self.data.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / self.data.len() as f64
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn dot(&self, other: &Tensor4) -> Result<f64> {
        self.check_same(other)?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Channels of `a` followed by channels of `b`.
    pub fn concat_channels(a: &Tensor4, b: &Tensor4) -> Result<Tensor4> {
        if !a.shape.same_spatial(&b.shape) {
            return Err(Error::InvalidShape(format!(
                "concat_channels needs equal spatial extents, got {} and {}",
                a.shape, b.shape
            )));
        }
        let (ca, cb) = (a.shape.c, b.shape.c);
        let shape = a.shape.with_channels(ca + cb);
        let mut data = Vec::with_capacity(shape.len());
        for (fa, fb) in a.data.chunks_exact(ca).zip(b.data.chunks_exact(cb)) {
            data.extend_from_slice(fa);
            data.extend_from_slice(fb);
        }
        Ok(Tensor4 { shape, data })
    }

    /// Concatenation where either side may be absent (zero channels).
    pub fn concat_optional(a: Option<&Tensor4>, b: Option<&Tensor4>) -> Result<Option<Tensor4>> {
        match (a, b) {
            (Some(a), Some(b)) => Tensor4::concat_channels(a, b).map(Some),
            (Some(t), None) | (None, Some(t)) => Ok(Some(t.clone())),
            (None, None) => Ok(None),
        }
    }

    /// Splits channels `[0, at)` and `[at, C)`.
    pub fn split_channels(&self, at: usize) -> Result<(Tensor4, Tensor4)> {
        let c = self.shape.c;
        if at == 0 || at >= c {
            return Err(Error::InvalidArgument(format!(
                "split point {at} must lie strictly inside 0..{c}"
            )));
        }
        let mut a = Vec::with_capacity(self.shape.voxels() * at);
        let mut b = Vec::with_capacity(self.shape.voxels() * (c - at));
        for fiber in self.data.chunks_exact(c) {
            a.extend_from_slice(&fiber[..at]);
            b.extend_from_slice(&fiber[at..]);
        }
        Ok((
            Tensor4 { shape: self.shape.with_channels(at), data: a },
            Tensor4 { shape: self.shape.with_channels(c - at), data: b },
        ))
    }

    /// Copies the spatial window `[origin, origin + size)` over all channels.
    /// `size.c` must equal the tensor's channel count.
    pub fn crop(&self, origin: [usize; 3], size: Shape4) -> Result<Tensor4> {
        size.validate()?;
        let s = self.shape;
        if size.c != s.c {
            return Err(Error::InvalidShape(format!(
                "crop keeps all {} channels, requested {}",
                s.c, size.c
            )));
        }
        let ext = s.spatial();
        let want = size.spatial();
        for a in 0..3 {
            if origin[a] + want[a] > ext[a] {
                return Err(Error::InvalidArgument(format!(
                    "crop window {:?}+{:?} exceeds extents {:?}",
                    origin, want, ext
                )));
            }
        }
        let row = size.x * s.c;
        let mut data = Vec::with_capacity(size.len());
        for z in 0..size.z {
            for y in 0..size.y {
                let start = s.offset(origin[0], origin[1] + y, origin[2] + z, 0);
                data.extend_from_slice(&self.data[start..start + row]);
            }
        }
        Ok(Tensor4 { shape: size, data })
    }

    /// Writes `patch` into `self` at `origin`, replacing existing values.
    pub fn paste(&mut self, origin: [usize; 3], patch: &Tensor4) -> Result<()> {
        let s = self.shape;
        let p = patch.shape;
        if p.c != s.c {
            return Err(Error::ShapeMismatch { expected: s.with_channels(s.c), actual: p });
        }
        let (ext, want) = (s.spatial(), p.spatial());
        if (0..3).any(|a| origin[a] + want[a] > ext[a]) {
            return Err(Error::InvalidArgument(format!(
                "paste window {origin:?}+{want:?} exceeds extents {ext:?}"
            )));
        }
        let row = p.x * p.c;
        for z in 0..p.z {
            for y in 0..p.y {
                let dst = s.offset(origin[0], origin[1] + y, origin[2] + z, 0);
                let src = p.offset(0, y, z, 0);
                self.data[dst..dst + row].copy_from_slice(&patch.data[src..src + row]);
            }
        }
        Ok(())
    }

    /// Zero-pads spatially to at least `extent` per axis (padding at the high end).
    pub fn pad_to(&self, extent: [usize; 3]) -> Result<Tensor4> {
        let s = self.shape;
        let target = Shape4::new(
            extent[0].max(s.x),
            extent[1].max(s.y),
            extent[2].max(s.z),
            s.c,
        )?;
        if target == s {
            return Ok(self.clone());
        }
        let mut out = Tensor4::zeros(target)?;
        out.paste([0, 0, 0], self)?;
        Ok(out)
    }
}
