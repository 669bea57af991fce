//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic  b"ORCH"
//! u32    format version (1)
//! u32+.. kind (UTF-8)
//! u32+.. metadata (UTF-8 JSON)
//! u32    array count
//! per array: u32+.. name, u32 ndim, u64 × ndim dims, f64 × product(dims)
//! ```
//!
//! Arrays are stored as `f64` so a save/load round trip is bit-exact.

use std::path::Path;

use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"ORCH";
const VERSION: u32 = 1;

pub type NamedArray = (String, Vec<usize>, Vec<f64>);

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub kind: String,
    pub metadata: serde_json::Value,
    pub arrays: Vec<NamedArray>,
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let b = self.take(n)?;
        String::from_utf8(b.to_vec()).map_err(|_| Error::Checkpoint("invalid UTF-8 string".into()))
    }
}

impl Container {
    pub fn new(kind: impl Into<String>, metadata: serde_json::Value, arrays: Vec<NamedArray>) -> Self {
        Container {
            kind: kind.into(),
            metadata,
            arrays,
        }
    }

    pub fn array(&self, name: &str) -> Option<&NamedArray> {
        self.arrays.iter().find(|(n, _, _)| n == name)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut out, &self.kind);
        put_str(&mut out, &self.metadata.to_string());
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for (name, shape, data) in &self.arrays {
            put_str(&mut out, name);
            out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for &d in shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let kind = r.string()?;
        let metadata = serde_json::from_str(&r.string()?)?;
        let count = r.u32()? as usize;
        let mut arrays = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let name = r.string()?;
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim.min(8));
            for _ in 0..ndim {
                shape.push(r.u64()? as usize);
            }
            let len = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let Some(len) = len.filter(|&l| l <= (bytes.len() - r.pos) / 8) else {
                return Err(Error::Checkpoint(format!("array {name} larger than file")));
            };
            let raw = r.take(len * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            arrays.push((name, shape, data));
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Container { kind, metadata, arrays })
    }

    /// Checks the kind tag before returning.
    pub fn from_bytes_of_kind(bytes: &[u8], kind: &str) -> Result<Self> {
        let c = Self::from_bytes(bytes)?;
        if c.kind != kind {
            return Err(Error::Checkpoint(format!("expected a {kind} checkpoint, found {}", c.kind)));
        }
        Ok(c)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>, kind: &str) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes_of_kind(&bytes, kind)
    }
}
