//! Named-tensor binary container.
//!
//! Layout, all integers little-endian:
//! `"DCTC"`, `u32` version, `u32` entry count, then per entry
//! `u16` name length, UTF-8 name, `u8` dtype (0 = f32), `u8` ndim,
//! `u32` dims, row-major `f32` payload.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{DcerError, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"DCTC";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

/// Ordered `(name, tensor)` entries with unique names.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorContainer {
    entries: Vec<(String, Tensor)>,
}

impl TensorContainer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if name.len() > u16::MAX as usize {
            return Err(DcerError::Input(format!("tensor name too long ({} bytes)", name.len())));
        }
        if tensor.shape().len() > u8::MAX as usize || tensor.shape().iter().any(|&d| d > u32::MAX as usize) {
            return Err(DcerError::Input(format!("tensor {name} has unsupported shape")));
        }
        if self.get(&name).is_some() {
            return Err(DcerError::Input(format!("duplicate tensor name {name}")));
        }
        self.entries.push((name, tensor));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(DTYPE_F32);
            out.push(t.shape().len() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Parses a whole buffer; `origin` names the source in errors.
    pub fn decode(bytes: &[u8], origin: &Path) -> Result<Self> {
        let fail = |reason: String| DcerError::Format {
            path: origin.to_path_buf(),
            reason,
        };
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4).ok_or_else(|| fail("truncated header".into()))?;
        if magic != MAGIC {
            return Err(fail(format!("bad magic {magic:?}")));
        }
        let version = r.u32().ok_or_else(|| fail("truncated header".into()))?;
        if version != VERSION {
            return Err(fail(format!("unsupported version {version}")));
        }
        let count = r.u32().ok_or_else(|| fail("truncated header".into()))?;
        let mut c = TensorContainer::new();
        for i in 0..count {
            let truncated = || fail(format!("truncated in entry {i}"));
            let len = r.u16().ok_or_else(truncated)? as usize;
            let name = std::str::from_utf8(r.take(len).ok_or_else(truncated)?)
                .map_err(|_| fail(format!("entry {i} name is not UTF-8")))?
                .to_string();
            let dtype = r.u8().ok_or_else(truncated)?;
            if dtype != DTYPE_F32 {
                return Err(fail(format!("entry {name}: unknown dtype {dtype}")));
            }
            let ndim = r.u8().ok_or_else(truncated)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u32().ok_or_else(truncated)? as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| fail(format!("entry {name}: shape overflows")))?;
            let payload = r
                .take(n.checked_mul(4).ok_or_else(truncated)?)
                .ok_or_else(truncated)?;
            let data = payload
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            c.insert(name, Tensor::new(shape, data)?)
                .map_err(|e| fail(e.to_string()))?;
        }
        if r.pos != bytes.len() {
            return Err(fail(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(c)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u8(&mut self) -> Option<u8> {
        self.take(1).map(|b| b[0])
    }

    fn u16(&mut self) -> Option<u16> {
        self.take(2).map(|b| u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Writes through a sibling temporary file and renames it into place, so
/// readers never observe a partial container.
pub fn write_container(path: &Path, c: &TensorContainer) -> Result<()> {
    let tmp = path.with_extension("dctc.tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| DcerError::io(&tmp, e))?;
    f.write_all(&c.encode()).map_err(|e| DcerError::io(&tmp, e))?;
    f.sync_all().map_err(|e| DcerError::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| DcerError::io(path, e))
}

pub fn read_container(path: &Path) -> Result<TensorContainer> {
    let bytes = fs::read(path).map_err(|e| DcerError::io(path, e))?;
    TensorContainer::decode(&bytes, path)
}

/// Single-tensor convenience: stores `t` under `name`.
pub fn write_tensor(path: &Path, name: &str, t: &Tensor) -> Result<()> {
    let mut c = TensorContainer::new();
    c.insert(name, t.clone())?;
    write_container(path, &c)
}

pub fn read_tensor(path: &Path, name: &str) -> Result<Tensor> {
    read_container(path)?.get(name).cloned().ok_or_else(|| DcerError::Format {
        path: path.to_path_buf(),
        reason: format!("no tensor named {name}"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_bit_exactly() {
        let mut c = TensorContainer::new();
        let data: Vec<f32> = (0..24).map(|i| (i as f32 * 0.37).sin() * 1e-3 + f32::MIN_POSITIVE).collect();
        c.insert("a", Tensor::new(vec![2, 3, 4], data).unwrap()).unwrap();
        c.insert("b", Tensor::new(vec![1], vec![-0.0]).unwrap()).unwrap();
        let back = TensorContainer::decode(&c.encode(), Path::new("mem")).unwrap();
        for ((n1, t1), (n2, t2)) in c.iter().zip(back.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape(), t2.shape());
            let bits1: Vec<u32> = t1.data().iter().map(|v| v.to_bits()).collect();
            let bits2: Vec<u32> = t2.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits1, bits2);
        }
        let empty = TensorContainer::new();
        assert_eq!(TensorContainer::decode(&empty.encode(), Path::new("mem")).unwrap(), empty);
    }

    #[test]
    fn rejects_corruption() {
        let mut c = TensorContainer::new();
        c.insert("x", Tensor::full(vec![3, 3], 1.5)).unwrap();
        let good = c.encode();
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(TensorContainer::decode(&bad, Path::new("m")), Err(DcerError::Format { .. })));
        let mut ver = good.clone();
        ver[4] = 9;
        assert!(TensorContainer::decode(&ver, Path::new("m")).is_err());
        for cut in [3, 10, good.len() - 1] {
            assert!(TensorContainer::decode(&good[..cut], Path::new("m")).is_err());
        }
        let mut extra = good.clone();
        extra.push(0);
        assert!(TensorContainer::decode(&extra, Path::new("m")).is_err());
    }
}
