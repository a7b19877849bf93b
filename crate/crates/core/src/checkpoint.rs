//! The VCKP parameter file.
//!
//! All little-endian: magic `VCKP`, u32 version = 1, u32 record count, then
//! per record a u32 name length, the UTF-8 name, 4 x u32 shape (x, y, z, c)
//! and the values as f64 in tensor layout order.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::{Shape4, Tensor4};

pub const VCKP_MAGIC: &[u8; 4] = b"VCKP";
pub const VCKP_VERSION: u32 = 1;

pub fn to_bytes(params: &ParamStore) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(VCKP_MAGIC);
    out.extend_from_slice(&VCKP_VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        for d in t.shape().dims() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| Error::Format {
            what: "VCKP",
            reason: format!("truncated at byte {} (needed {n} more)", self.pos),
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<ParamStore> {
    let fail = |reason: String| Error::Format { what: "VCKP", reason };
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != VCKP_MAGIC {
        return Err(fail("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VCKP_VERSION {
        return Err(fail(format!("unsupported version {version}")));
    }
    let count = r.u32()?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?).map_err(|_| fail("parameter name is not UTF-8".into()))?;
        if store.get(name).is_ok() {
            return Err(fail(format!("duplicate parameter '{name}'")));
        }
        let d = [r.u32()?, r.u32()?, r.u32()?, r.u32()?].map(|v| v as usize);
        let shape = Shape4::new(d[0], d[1], d[2], d[3]).map_err(|e| fail(e.to_string()))?;
        let raw = r.take(shape.len().checked_mul(8).ok_or_else(|| fail("tensor size overflows".into()))?)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        store.insert(name, Tensor4::from_vec(shape, data)?);
    }
    if r.pos != bytes.len() {
        return Err(fail(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(store)
}

pub fn save(params: &ParamStore, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_bytes(params)).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<ParamStore> {
    let path = path.as_ref();
    from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
}
