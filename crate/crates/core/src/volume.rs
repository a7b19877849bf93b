//! Volumes and the VVOL container.
//!
//! VVOL layout, all little-endian:
//!
//! | bytes | field                                             |
//! |-------|---------------------------------------------------|
//! | 4     | magic `VVOL`                                      |
//! | 4     | u32 version = 1                                   |
//! | 4     | u32 dtype: 0 = f64 image, 1 = u8 labels           |
//! | 4     | u32 class_count (0 for plain images)              |
//! | 16    | 4 x u32 extents x, y, z, c                        |
//! | 24    | 3 x f64 voxel spacing in mm                       |
//! | ...   | payload in tensor layout order (channel fastest)  |

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Shape4, Tensor4};

pub const VVOL_MAGIC: &[u8; 4] = b"VVOL";
pub const VVOL_VERSION: u32 = 1;
pub const VVOL_HEADER_LEN: usize = 56;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VolumeKind {
    /// Real-valued data; `class_count` is non-zero for probability maps.
    Image { class_count: u32 },
    Labels { class_count: u32 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub tensor: Tensor4,
    pub spacing: [f64; 3],
    pub kind: VolumeKind,
}

impl Volume {
    pub fn image(tensor: Tensor4, spacing: [f64; 3]) -> Self {
        Volume { tensor, spacing, kind: VolumeKind::Image { class_count: 0 } }
    }

    pub fn probabilities(tensor: Tensor4, spacing: [f64; 3]) -> Self {
        let class_count = tensor.shape().c as u32;
        Volume { tensor, spacing, kind: VolumeKind::Image { class_count } }
    }

    /// Integer-coded label map (`c = 1`). Fails if any value is not an
    /// integer in `[0, class_count)`.
    pub fn labels(tensor: Tensor4, spacing: [f64; 3], class_count: u32) -> Result<Self> {
        if class_count == 0 || class_count > 256 {
            return Err(Error::Data(format!("label class count must be in 1..=256, got {class_count}")));
        }
        if let Some(bad) = tensor
            .data()
            .iter()
            .find(|&&v| v.fract() != 0.0 || v < 0.0 || v >= class_count as f64)
        {
            return Err(Error::Data(format!("label value {bad} outside 0..{class_count}")));
        }
        Ok(Volume { tensor, spacing, kind: VolumeKind::Labels { class_count } })
    }

    pub fn shape(&self) -> Shape4 {
        self.tensor.shape()
    }

    pub fn is_labels(&self) -> bool {
        matches!(self.kind, VolumeKind::Labels { .. })
    }

    pub fn class_count(&self) -> u32 {
        match self.kind {
            VolumeKind::Image { class_count } | VolumeKind::Labels { class_count } => class_count,
        }
    }

    pub fn expect_labels(self) -> Result<Volume> {
        if !self.is_labels() {
            return Err(Error::Format { what: "VVOL", reason: "expected a u8 label volume, found f64 data".into() });
        }
        Ok(self)
    }

    pub fn expect_image(self) -> Result<Volume> {
        if self.is_labels() {
            return Err(Error::Format { what: "VVOL", reason: "expected an f64 image volume, found u8 labels".into() });
        }
        Ok(self)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let s = self.shape();
        let (dtype, elem) = if self.is_labels() { (1u32, 1) } else { (0u32, 8) };
        let mut out = Vec::with_capacity(VVOL_HEADER_LEN + s.len() * elem);
        out.extend_from_slice(VVOL_MAGIC);
        out.extend_from_slice(&VVOL_VERSION.to_le_bytes());
        out.extend_from_slice(&dtype.to_le_bytes());
        out.extend_from_slice(&self.class_count().to_le_bytes());
        for d in s.dims() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for sp in self.spacing {
            out.extend_from_slice(&sp.to_le_bytes());
        }
        if self.is_labels() {
            out.extend(self.tensor.data().iter().map(|&v| v as u8));
        } else {
            for v in self.tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Volume> {
        let fail = |reason: String| Error::Format { what: "VVOL", reason };
        if bytes.len() < VVOL_HEADER_LEN {
            return Err(fail(format!("truncated header: {} of {VVOL_HEADER_LEN} bytes", bytes.len())));
        }
        if &bytes[..4] != VVOL_MAGIC {
            return Err(fail(format!("bad magic {:?}", &bytes[..4])));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
        let f64_at = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().expect("8 bytes"));
        let version = u32_at(4);
        if version != VVOL_VERSION {
            return Err(fail(format!("unsupported version {version}")));
        }
        let dtype = u32_at(8);
        let class_count = u32_at(12);
        let dims = [u32_at(16), u32_at(20), u32_at(24), u32_at(28)].map(|d| d as usize);
        let shape = Shape4::new(dims[0], dims[1], dims[2], dims[3]).map_err(|e| fail(e.to_string()))?;
        let spacing = [f64_at(32), f64_at(40), f64_at(48)];
        if spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(fail(format!("invalid spacing {spacing:?}")));
        }
        let elem = match dtype {
            0 => 8,
            1 => 1,
            other => return Err(fail(format!("unknown dtype {other}"))),
        };
        let payload = &bytes[VVOL_HEADER_LEN..];
        let expected = shape
            .len()
            .checked_mul(elem)
            .ok_or_else(|| fail("payload size overflows".into()))?;
        if payload.len() != expected {
            return Err(fail(format!(
                "header declares {shape} ({expected} payload bytes) but file has {} payload bytes",
                payload.len()
            )));
        }
        if dtype == 1 {
            let data = payload.iter().map(|&b| b as f64).collect();
            Volume::labels(Tensor4::from_vec(shape, data)?, spacing, class_count)
        } else {
            let data = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            Ok(Volume { tensor: Tensor4::from_vec(shape, data)?, spacing, kind: VolumeKind::Image { class_count } })
        }
    }
}

pub fn read_vvol(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Volume::from_bytes(&bytes)
}

pub fn write_vvol(volume: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, volume.to_bytes()).map_err(|e| Error::io(path, e))
}
