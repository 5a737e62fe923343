//! Flat binary snapshots of named arrays.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    4 bytes  "SSFL"
//! version  u32      1
//! count    u32
//! count × { name_len u32, name utf-8, rank u32, dims u64 × rank, data f64 × Π dims }
//! ```
//!
//! The same layout stores model parameters and prototype banks.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::DenseArray;

pub const MAGIC: &[u8; 4] = b"SSFL";
pub const VERSION: u32 = 1;

/// An ordered list of named arrays.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Snapshot {
    pub entries: Vec<(String, DenseArray)>,
}

impl Snapshot {
    pub fn new(entries: Vec<(String, DenseArray)>) -> Self {
        Self { entries }
    }

    pub fn get(&self, name: &str) -> Option<&DenseArray> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, a)| a)
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|(_, a)| a.len()).sum()
    }

    pub fn encoded_len(&self) -> usize {
        12 + self
            .entries
            .iter()
            .map(|(n, a)| 8 + n.len() + 8 * a.shape().len() + 8 * a.len())
            .sum::<usize>()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, a) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(a.shape().len() as u32).to_le_bytes());
            for &d in a.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in a.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|e| Error::Format(e.to_string()))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            entries.push((name, DenseArray::new(shape, data).map_err(|e| Error::Format(e.to_string()))?));
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { entries })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip(rows in 1usize..4, cols in 1usize..5, seed in any::<u64>()) {
            let data: Vec<f64> = (0..rows * cols).map(|i| (seed.wrapping_mul(i as u64 + 1) % 1000) as f64 / 7.0 - 50.0).collect();
            let s = Snapshot::new(vec![
                ("w".into(), DenseArray::new(vec![rows, cols], data).unwrap()),
                ("bias/é".into(), DenseArray::scalar(-0.0)),
            ]);
            let bytes = s.to_bytes();
            prop_assert_eq!(bytes.len(), s.encoded_len());
            prop_assert_eq!(Snapshot::from_bytes(&bytes).unwrap(), s);
        }
    }

    #[test]
    fn rejects_corruption() {
        let s = Snapshot::new(vec![("a".into(), DenseArray::scalar(1.0))]);
        let mut b = s.to_bytes();
        assert!(Snapshot::from_bytes(&b[..b.len() - 1]).is_err());
        b[0] = b'X';
        assert!(Snapshot::from_bytes(&b).is_err());
    }
}
