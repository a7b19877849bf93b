//! Periodic down-shuffling (PDS) and its inverse, periodic up-shuffling (PUS).
//!
//! PDS maps a `(nx*d, ny*h, nz*w, C)` tensor onto `(d, h, w, C*nx*ny*nz)`:
//!
//! ```text
//! out(x', y', z', c') = in(x'*nx + ix, y'*ny + iy, z'*nz + iz, c)
//!   where c' = c + C*(ix + nx*(iy + ny*iz))
//! ```
//!
//! i.e. `c = c' mod C`, `ix = (c' mod nx*C) / C`, `iy = (c' mod nx*ny*C) / (nx*C)`
//! and `iz = c' / (nx*ny*C)`. The original channel varies fastest, then the x
//! phase, then y, then z.
//!
//! Because the layout is channel-fastest, the `nx` input fibers that share
//! `(iy, iz)` for one output voxel sit next to each other in memory, so both
//! directions reduce to copying `nx*C`-element runs. PUS is defined as the
//! exact inverse permutation, and since a permutation matrix is orthogonal it
//! is also the adjoint of PDS.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::{Shape4, Tensor4};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ShuffleFactors {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
}

impl ShuffleFactors {
    pub const IDENTITY: ShuffleFactors = ShuffleFactors { nx: 1, ny: 1, nz: 1 };

    pub fn new(nx: usize, ny: usize, nz: usize) -> Result<Self> {
        if nx == 0 || ny == 0 || nz == 0 {
            return Err(Error::InvalidArgument(format!(
                "shuffle factors must be positive, got ({nx}, {ny}, {nz})"
            )));
        }
        Ok(ShuffleFactors { nx, ny, nz })
    }

    pub fn product(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    pub fn as_array(&self) -> [usize; 3] {
        [self.nx, self.ny, self.nz]
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::IDENTITY
    }

    /// Shape produced by [`pds`] on an input of shape `s`.
    pub fn down_shape(&self, s: Shape4) -> Result<Shape4> {
        for (axis, extent, factor) in [('x', s.x, self.nx), ('y', s.y, self.ny), ('z', s.z, self.nz)] {
            if extent % factor != 0 {
                return Err(Error::NotDivisible { axis, extent, factor });
            }
        }
        Shape4::new(s.x / self.nx, s.y / self.ny, s.z / self.nz, s.c * self.product())
    }

    /// Shape produced by [`pus`] on an input of shape `s`.
    pub fn up_shape(&self, s: Shape4) -> Result<Shape4> {
        let p = self.product();
        if !s.c.is_multiple_of(p) {
            return Err(Error::InvalidShape(format!(
                "{} channels are not divisible by the factor product {p}",
                s.c
            )));
        }
        Shape4::new(s.x * self.nx, s.y * self.ny, s.z * self.nz, s.c / p)
    }
}

impl fmt::Display for ShuffleFactors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{}", self.nx, self.ny, self.nz)
    }
}

impl FromStr for ShuffleFactors {
    type Err = Error;

    /// Parses `"nx,ny,nz"`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        if parts.len() != 3 {
            return Err(Error::Config(format!("expected three factors 'nx,ny,nz', got '{s}'")));
        }
        let mut v = [0usize; 3];
        for (slot, p) in v.iter_mut().zip(&parts) {
            *slot = p
                .parse()
                .map_err(|_| Error::Config(format!("invalid shuffle factor '{p}' in '{s}'")))?;
        }
        ShuffleFactors::new(v[0], v[1], v[2]).map_err(|e| Error::Config(e.to_string()))
    }
}

/// Runs `f(low_offset, high_offset)` for every `nx*C`-element run shared by
/// the two layouts.
fn for_each_run(low: Shape4, high: Shape4, f: ShuffleFactors, mut visit: impl FnMut(usize, usize)) {
    let c = high.c;
    let run = f.nx * c;
    let mut dst = 0;
    for zo in 0..low.z {
        for yo in 0..low.y {
            for xo in 0..low.x {
                for iz in 0..f.nz {
                    for iy in 0..f.ny {
                        let src = high.offset(xo * f.nx, yo * f.ny + iy, zo * f.nz + iz, 0);
                        visit(dst, src);
                        dst += run;
                    }
                }
            }
        }
    }
}

/// Periodic down-shuffling.
pub fn pds(t: &Tensor4, f: ShuffleFactors) -> Result<Tensor4> {
    let high = t.shape();
    let low = f.down_shape(high)?;
    if f.is_identity() {
        return Ok(t.clone());
    }
    let run = f.nx * high.c;
    let src = t.data();
    let mut out = vec![0.0; low.len()];
    for_each_run(low, high, f, |lo, hi| {
        out[lo..lo + run].copy_from_slice(&src[hi..hi + run]);
    });
    Tensor4::from_vec(low, out)
}

/// Periodic up-shuffling: the inverse permutation of [`pds`].
pub fn pus(t: &Tensor4, f: ShuffleFactors) -> Result<Tensor4> {
    let low = t.shape();
    let high = f.up_shape(low)?;
    if f.is_identity() {
        return Ok(t.clone());
    }
    let run = f.nx * high.c;
    let src = t.data();
    let mut out = vec![0.0; high.len()];
    for_each_run(low, high, f, |lo, hi| {
        out[hi..hi + run].copy_from_slice(&src[lo..lo + run]);
    });
    Tensor4::from_vec(high, out)
}

/// Backward pass of [`pds`]: the transpose of a permutation is its inverse.
pub fn pds_adjoint(grad_out: &Tensor4, f: ShuffleFactors) -> Result<Tensor4> {
    pus(grad_out, f)
}

/// Backward pass of [`pus`].
pub fn pus_adjoint(grad_out: &Tensor4, f: ShuffleFactors) -> Result<Tensor4> {
    pds(grad_out, f)
}

/// Literal per-element transcription of the index formula, kept independent
/// of [`pds`] for cross-checking. Loops over every output coordinate and
/// evaluates the source coordinate with the floor/mod expressions.
pub fn pds_oracle(t: &Tensor4, f: ShuffleFactors) -> Result<Tensor4> {
    let high = t.shape();
    let low = f.down_shape(high)?;
    let (nx, ny) = (f.nx, f.ny);
    let c_in = high.c;
    let mut out = Tensor4::zeros(low)?;
    for zp in 0..low.z {
        for yp in 0..low.y {
            for xp in 0..low.x {
                for cp in 0..low.c {
                    let sx = xp * nx + (cp % (nx * c_in)) / c_in;
                    let sy = yp * ny + (cp % (nx * ny * c_in)) / (nx * c_in);
                    let sz = zp * f.nz + cp / (nx * ny * c_in);
                    let sc = cp % c_in;
                    out.set(xp, yp, zp, cp, t.get(sx, sy, sz, sc));
                }
            }
        }
    }
    Ok(out)
}
