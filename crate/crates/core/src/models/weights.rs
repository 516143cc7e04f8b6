//! Binary weight file.
//!
//! Layout (little-endian): magic `MSNW`, version `u16`, architecture
//! fingerprint `u64`, tensor count `u32`, then per tensor: name length `u16`,
//! UTF-8 name, rank `u8`, `rank` dims as `u32`, and the values as `f32`.

use std::path::Path;

use crate::error::{io_err, Error, Result};
use crate::models::spec::NetworkSpec;

pub const MAGIC: &[u8; 4] = b"MSNW";
pub const FORMAT_VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WeightStore {
    pub fingerprint: u64,
    pub tensors: Vec<NamedTensor>,
}

impl WeightStore {
    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.fingerprint.to_le_bytes());
        let count = u32::try_from(self.tensors.len()).map_err(|_| Error::CorruptWeights("too many tensors".into()))?;
        out.extend_from_slice(&count.to_le_bytes());
        for t in &self.tensors {
            let name = t.name.as_bytes();
            let len = u16::try_from(name.len()).map_err(|_| Error::CorruptWeights(format!("name too long: {}", t.name)))?;
            let rank = u8::try_from(t.shape.len()).map_err(|_| Error::CorruptWeights(format!("rank too high: {}", t.name)))?;
            if t.shape.iter().product::<usize>() != t.values.len() {
                return Err(Error::CorruptWeights(format!("{}: shape {:?} vs {} values", t.name, t.shape, t.values.len())));
            }
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name);
            out.push(rank);
            for &d in &t.shape {
                let d = u32::try_from(d).map_err(|_| Error::CorruptWeights(format!("{}: extent too large", t.name)))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            for v in &t.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::CorruptWeights("bad magic".into()));
        }
        let version = u16::from_le_bytes(r.array()?);
        if version != FORMAT_VERSION {
            return Err(Error::VersionMismatch { found: version, expected: FORMAT_VERSION });
        }
        let fingerprint = u64::from_le_bytes(r.array()?);
        let count = u32::from_le_bytes(r.array()?) as usize;
        let mut tensors: Vec<NamedTensor> = Vec::new();
        for _ in 0..count {
            let len = u16::from_le_bytes(r.array()?) as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::CorruptWeights("tensor name is not UTF-8".into()))?
                .to_string();
            if tensors.iter().any(|t| t.name == name) {
                return Err(Error::CorruptWeights(format!("duplicate tensor {name}")));
            }
            let rank = r.take(1)?[0] as usize;
            let shape = (0..rank)
                .map(|_| Ok(u32::from_le_bytes(r.array()?) as usize))
                .collect::<Result<Vec<_>>>()?;
            let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| {
                Error::CorruptWeights(format!("{name}: extent overflow"))
            })?;
            let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::CorruptWeights("size overflow".into()))?)?;
            let values = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            tensors.push(NamedTensor { name, shape, values });
        }
        if r.pos != bytes.len() {
            return Err(Error::CorruptWeights(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { fingerprint, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(io_err(path))
    }

    /// Reads a file without checking which architecture it belongs to.
    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path).map_err(io_err(path))?)
    }

    pub fn check_fingerprint(&self, spec: &NetworkSpec) -> Result<()> {
        let expected = spec.fingerprint();
        if self.fingerprint == expected {
            Ok(())
        } else {
            Err(Error::FingerprintMismatch { found: self.fingerprint, expected })
        }
    }
}

pub fn save_weights(store: &WeightStore, path: &Path) -> Result<()> {
    store.save(path)
}

/// Reads a weight file and verifies it was written for `spec`.
pub fn load_weights(path: &Path, spec: &NetworkSpec) -> Result<WeightStore> {
    let store = WeightStore::load(path)?;
    store.check_fingerprint(spec)?;
    Ok(store)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::CorruptWeights(format!("truncated at byte {} (needed {n} more)", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
}
