//! Versioned binary parameter dumps.
//!
//! Layout (little endian):
//!
//! ```text
//! magic     8 bytes  "DBSDECKP"
//! version   u32      currently 1
//! seed      u64
//! metadata  u32 length + UTF-8 bytes (JSON, free-form)
//! count     u32
//! entries   count x { u32 name length, name, u32 rank, rank x u64 dims,
//!                     numel x f64 }
//! ```
//!
//! Values are stored as `f64`, so `f64` and `f32` tensors both round-trip
//! bit for bit.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"DBSDECKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub seed: u64,
    pub metadata: String,
    pub entries: Vec<(String, Tensor<f64>)>,
}

impl Checkpoint {
    pub fn from_tensors<T: Scalar>(seed: u64, metadata: String, tensors: &[(String, &Tensor<T>)]) -> Self {
        Self {
            seed,
            metadata,
            entries: tensors.iter().map(|(n, t)| (n.clone(), t.cast())).collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f64>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&self.seed.to_le_bytes())?;
        write_str(w, &self.metadata)?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for (name, t) in &self.entries {
            write_str(w, name)?;
            w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for &v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = read_u32(r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {version}, expected {CHECKPOINT_VERSION}"
            )));
        }
        let seed = read_u64(r)?;
        let metadata = read_str(r)?;
        let count = read_u32(r)? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = read_str(r)?;
            let rank = read_u32(r)? as usize;
            let shape = (0..rank).map(|_| read_u64(r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            let mut buf = [0u8; 8];
            for _ in 0..numel {
                r.read_exact(&mut buf)?;
                data.push(f64::from_le_bytes(buf));
            }
            entries.push((name, Tensor::new(shape, data)?));
        }
        Ok(Self {
            seed,
            metadata,
            entries,
        })
    }
}

fn write_str<W: Write>(w: &mut W, s: &str) -> Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_str<R: Read>(r: &mut R) -> Result<String> {
    let len = read_u32(r)? as usize;
    let mut b = vec![0u8; len];
    r.read_exact(&mut b)?;
    String::from_utf8(b).map_err(|e| Error::Checkpoint(format!("invalid UTF-8: {e}")))
}
