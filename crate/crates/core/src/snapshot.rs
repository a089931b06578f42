//! Flat binary parameter container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "KUDA"                magic, 4 bytes
//! u32                   format version (currently 1)
//! repeated until EOF:
//!   u32                 name length in bytes
//!   [u8]                UTF-8 name
//!   u32                 rank
//!   [u64; rank]         dims
//!   [f64; prod(dims)]   payload, row-major
//! ```

use std::fs;
use std::path::Path;

use crate::error::{KudaError, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"KUDA";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Snapshot {
    pub entries: Vec<(String, Tensor)>,
}

impl Snapshot {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(KudaError::Snapshot("bad magic bytes".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(KudaError::Snapshot(format!(
                "unsupported format version {version}"
            )));
        }
        let mut entries = Vec::new();
        while r.pos < bytes.len() {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| KudaError::Snapshot("parameter name is not UTF-8".into()))?
                .to_owned();
            let rank = r.u32()? as usize;
            let dims = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel: usize = dims.iter().product();
            let payload = r.take(numel * 8)?;
            let data = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(&dims, data)
                .map_err(|e| KudaError::Snapshot(format!("{name}: {e}")))?;
            entries.push((name, t));
        }
        Ok(Self { entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| KudaError::Snapshot(format!("truncated at byte {}", self.pos)))?;
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
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let snap = Snapshot {
            entries: vec![("w".into(), Tensor::new(&[2], vec![1.0, -2.5]).unwrap())],
        };
        let b = snap.to_bytes();
        assert_eq!(&b[..4], b"KUDA");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 1);
        assert_eq!(b[12], b'w');
        assert_eq!(b.len(), 8 + 4 + 1 + 4 + 8 + 16);
    }

    #[test]
    fn rejects_corruption() {
        assert!(Snapshot::from_bytes(b"KUDB\x01\0\0\0").is_err());
        assert!(Snapshot::from_bytes(b"KUDA\x02\0\0\0").is_err());
        let mut b = Snapshot {
            entries: vec![("w".into(), Tensor::zeros(&[3]))],
        }
        .to_bytes();
        b.pop();
        assert!(Snapshot::from_bytes(&b).is_err());
    }

    proptest! {
        #[test]
        fn roundtrip_is_bit_exact(
            shapes in proptest::collection::vec(proptest::collection::vec(1usize..4, 1..=3), 0..5),
            seed in any::<u64>(),
        ) {
            let mut state = seed;
            let entries: Vec<(String, Tensor)> = shapes.iter().enumerate().map(|(i, s)| {
                let n: usize = s.iter().product();
                let data = (0..n).map(|_| {
                    state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                    f64::from_bits(state >> 2)
                }).collect();
                (format!("p{i}.wé"), Tensor::new(s, data).unwrap())
            }).collect();
            let snap = Snapshot { entries };
            let back = Snapshot::from_bytes(&snap.to_bytes()).unwrap();
            prop_assert_eq!(snap.entries.len(), back.entries.len());
            for ((n1, t1), (n2, t2)) in snap.entries.iter().zip(&back.entries) {
                prop_assert_eq!(n1, n2);
                prop_assert_eq!(t1.shape(), t2.shape());
                let b1: Vec<u64> = t1.data().iter().map(|v| v.to_bits()).collect();
                let b2: Vec<u64> = t2.data().iter().map(|v| v.to_bits()).collect();
                prop_assert_eq!(b1, b2);
            }
        }
    }
}
