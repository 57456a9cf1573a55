//! Checkpoint serialization: a versioned little-endian container of named
//! f64 tensors plus the run counters and the config digest, so resuming can
//! refuse a mismatched configuration. The trainer owns the mapping between
//! model structs and tensor names; this module is pure byte layout.
//!
//! Layout (all integers little-endian):
//! `"HPG1" | version u32 | digest [32] | step u64 | images_seen u64 |
//!  count u32 | { name_len u32 | name | ndim u32 | dims u64... | data f64... }*`

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::ArrayD;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"HPG1";
pub const VERSION: u32 = 1;

/// A checkpoint: counters, the config digest, and an ordered set of
/// uniquely named tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_digest: [u8; 32],
    pub step: u64,
    pub images_seen: u64,
    tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new(config_digest: [u8; 32], step: u64, images_seen: u64) -> Self {
        Checkpoint {
            config_digest,
            step,
            images_seen,
            tensors: Vec::new(),
        }
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        if self.tensors.iter().any(|(n, _)| n == name) {
            return Err(Error::Checkpoint(format!("duplicate tensor name '{name}'")));
        }
        self.tensors.push((name.to_string(), tensor));
        Ok(())
    }

    /// Stores a scalar counter as a one-element tensor.
    pub fn insert_scalar(&mut self, name: &str, value: f64) -> Result<()> {
        self.insert(name, ArrayD::from_elem(ndarray::IxDyn(&[1]), value))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor '{name}'")))
    }

    pub fn get_scalar(&self, name: &str) -> Result<f64> {
        let t = self.get(name)?;
        t.iter()
            .next()
            .copied()
            .ok_or_else(|| Error::Checkpoint(format!("empty scalar tensor '{name}'")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ensure_digest(&self, expected: &[u8; 32]) -> Result<()> {
        if &self.config_digest != expected {
            return Err(Error::Checkpoint(
                "config digest mismatch: checkpoint was written by a different configuration"
                    .into(),
            ));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.config_digest);
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.images_seen.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, tensor) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(tensor.ndim() as u32).to_le_bytes());
            for &d in tensor.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in tensor.as_standard_layout().iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor { bytes, pos: 0 };
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(Error::Checkpoint(format!(
                "bad magic {magic:02x?}, expected {MAGIC:02x?}"
            )));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {version}, expected {VERSION}"
            )));
        }
        let mut config_digest = [0u8; 32];
        config_digest.copy_from_slice(r.take(32)?);
        let step = r.u64()?;
        let images_seen = r.u64()?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
                .to_string();
            let ndim = r.u32()? as usize;
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                dims.push(r.u64()? as usize);
            }
            let n: usize = dims.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                data.push(r.f64()?);
            }
            let tensor = ArrayD::from_shape_vec(ndarray::IxDyn(&dims), data)
                .map_err(|e| Error::Checkpoint(format!("tensor '{name}': {e}")))?;
            if tensors.iter().any(|(existing, _): &(String, Tensor)| existing == &name) {
                return Err(Error::Checkpoint(format!("duplicate tensor name '{name}'")));
            }
            tensors.push((name, tensor));
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after checkpoint payload",
                bytes.len() - r.pos
            )));
        }
        Ok(Checkpoint {
            config_digest,
            step,
            images_seen,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(&self.to_bytes())?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
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
