//! Flat binary parameter container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "SEVT" | version: u32
//! repeated until EOF:
//!   name_len: u32 | name: utf-8 | rank: u32 | dims: u64 × rank | payload: f64 × Π dims
//! ```
//!
//! Architecture hyperparameters ride along as rank-0 records named
//! `manifest.<key>`.

use std::io::Read;
use std::path::Path;

use crate::error::{Error, Result};
use crate::fsutil;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SEVT";
pub const VERSION: u32 = 1;
const MANIFEST_PREFIX: &str = "manifest.";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub records: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: &Tensor) {
        self.records.push((name.into(), tensor.clone().frozen()));
    }

    pub fn set_manifest(&mut self, key: &str, value: f64) {
        self.records
            .push((format!("{MANIFEST_PREFIX}{key}"), Tensor::scalar(value)));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.records.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Fetches a tensor and checks its shape.
    pub fn expect(&self, name: &str, shape: &[usize]) -> Result<Tensor> {
        let t = self
            .get(name)
            .ok_or_else(|| Error::Validation(format!("checkpoint is missing tensor {name}")))?;
        if t.shape != shape {
            return Err(Error::Validation(format!(
                "tensor {name} has shape {:?}, expected {shape:?}",
                t.shape
            )));
        }
        Ok(t.clone())
    }

    pub fn manifest(&self, key: &str) -> Option<f64> {
        self.get(&format!("{MANIFEST_PREFIX}{key}"))
            .map(|t| t.data[0])
    }

    pub fn manifest_usize(&self, key: &str) -> Result<usize> {
        let v = self
            .manifest(key)
            .ok_or_else(|| Error::Validation(format!("checkpoint manifest lacks {key}")))?;
        if v < 0.0 || v.fract() != 0.0 {
            return Err(Error::Validation(format!(
                "manifest {key} = {v} is not a count"
            )));
        }
        Ok(v as usize)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        for (name, t) in &self.records {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let mut r = ByteReader {
            bytes,
            pos: 0,
            origin,
        };
        if r.take(4)? != MAGIC {
            return Err(Error::format(origin, "bad magic, expected SEVT"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format(
                origin,
                format!("unsupported version {version}"),
            ));
        }
        let mut records = Vec::new();
        while !r.at_end() {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::format(origin, "tensor name is not utf-8"))?
                .to_string();
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::format(origin, format!("tensor {name} too large")))?;
            let payload = r.take(
                numel
                    .checked_mul(8)
                    .ok_or_else(|| Error::format(origin, "overflow"))?,
            )?;
            let data = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            records.push((name, Tensor::new(shape, data)?));
        }
        Ok(Checkpoint { records })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes();
        fsutil::atomic_write(path, |w| w.write_all(&bytes))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::fs::File::open(path).map_err(|e| fsutil::open_error(path, e))?;
        let mut bytes = Vec::new();
        f.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

pub(crate) struct ByteReader<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
    pub origin: &'a Path,
}

impl<'a> ByteReader<'a> {
    pub fn at_end(&self) -> bool {
        self.pos >= self.bytes.len()
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.origin,
                format!("truncated at byte {} (wanted {n} more)", self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        Ok(self
            .take(n * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        std::str::from_utf8(self.take(n)?)
            .map(str::to_string)
            .map_err(|_| Error::format(self.origin, "string is not utf-8"))
    }
}
