//! "PXN1" tensor container.
//!
//! Layout: the 4 magic bytes `PXN1`, then one record per tensor until end of
//! file. A record is the name length (u64), the UTF-8 name, the rank (u64),
//! each dimension (u64), then the values as f64. Integers and floats are
//! little-endian. Records are written in name order.

use std::fs;
use std::path::Path;

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"PXN1";

pub fn to_bytes(tensors: &ParamStore) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u64).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u64).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Reader<'_> {
    fn fail(&self, reason: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            reason: format!("{} (offset {})", reason.into(), self.pos),
        }
    }

    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.fail("truncated record"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Parses a container; `origin` only labels errors.
pub fn from_bytes(buf: &[u8], origin: &Path) -> Result<ParamStore> {
    let mut r = Reader {
        buf,
        pos: 0,
        path: origin,
    };
    if r.take(4).ok() != Some(MAGIC.as_slice()) {
        return Err(Error::Format {
            path: origin.to_path_buf(),
            reason: "missing PXN1 magic".into(),
        });
    }
    let mut out = ParamStore::new();
    while r.pos < buf.len() {
        let len = r.u64()? as usize;
        if len > buf.len() {
            return Err(r.fail("name length out of range"));
        }
        let name = match std::str::from_utf8(r.take(len)?) {
            Ok(s) => s.to_string(),
            Err(_) => return Err(r.fail("name is not UTF-8")),
        };
        let rank = r.u64()? as usize;
        if rank > 16 {
            return Err(r.fail(format!("implausible rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut count: usize = 1;
        for _ in 0..rank {
            let d = r.u64()? as usize;
            count = count
                .checked_mul(d)
                .filter(|&c| c <= buf.len() / 8)
                .ok_or_else(|| r.fail("tensor larger than file"))?;
            shape.push(d);
        }
        let data = r
            .take(count * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if out.insert(name.clone(), Tensor::new(&shape, data)?).is_some() {
            return Err(r.fail(format!("duplicate tensor {name}")));
        }
    }
    Ok(out)
}

pub fn save(tensors: &ParamStore, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, to_bytes(tensors))?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<ParamStore> {
    let path = path.as_ref();
    let buf = fs::read(path)?;
    from_bytes(&buf, path)
}

/// [`from_bytes`] for buffers that did not come from a file.
pub fn decode(buf: &[u8]) -> Result<ParamStore> {
    from_bytes(buf, Path::new("<memory>"))
}
