//! Flat binary container shared by backbone, PET, map and endpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic     8 bytes   "SBPETSNP"
//! version   u32       1
//! kind      u32 len + UTF-8 bytes     ("backbone", "pet", "map", "endpoints")
//! header    u64 len + UTF-8 JSON      (configuration for the kind)
//! count     u32
//! count × record:
//!   name    u32 len + UTF-8 bytes
//!   rank    u32
//!   dims    rank × u64
//!   data    prod(dims) × f64
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"SBPETSNP";
pub const VERSION: u32 = 1;

/// Guards against absurd lengths in corrupt files.
const MAX_STRING: usize = 1 << 24;

#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    pub kind: String,
    pub header: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Snapshot {
    pub fn new(kind: &str, header: serde_json::Value, tensors: Vec<(String, Tensor)>) -> Self {
        Snapshot {
            kind: kind.to_string(),
            header,
            tensors,
        }
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        write_str32(w, &self.kind)?;
        let header = serde_json::to_vec(&self.header)?;
        w.write_all(&(header.len() as u64).to_le_bytes())?;
        w.write_all(&header)?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (name, t) in &self.tensors {
            write_str32(w, name)?;
            w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Snapshot("bad magic bytes".into()));
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(Error::Snapshot(format!("unsupported version {version}")));
        }
        let kind = read_str32(r)?;
        let header_len = read_u64(r)? as usize;
        if header_len > MAX_STRING {
            return Err(Error::Snapshot(format!("header length {header_len} too large")));
        }
        let mut header = vec![0u8; header_len];
        r.read_exact(&mut header)?;
        let header = serde_json::from_slice(&header)?;
        let count = read_u32(r)? as usize;
        let mut tensors = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let name = read_str32(r)?;
            let rank = read_u32(r)? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(read_u64(r)? as usize);
            }
            let numel = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
            let numel = numel.filter(|&n| n <= MAX_STRING).ok_or_else(|| Error::Snapshot(format!("tensor {name} too large")))?;
            let mut bytes = vec![0u8; numel * 8];
            r.read_exact(&mut bytes)?;
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            tensors.push((name, Tensor::new(shape, data)?));
        }
        Ok(Snapshot { kind, header, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }

    /// Loads and checks the kind tag.
    pub fn load_kind(path: &Path, kind: &str) -> Result<Self> {
        let snap = Self::load(path)?;
        if snap.kind != kind {
            return Err(Error::Snapshot(format!(
                "{} holds a {} snapshot, expected {kind}",
                path.display(),
                snap.kind
            )));
        }
        Ok(snap)
    }

    pub fn header_as<T: serde::de::DeserializeOwned>(&self) -> Result<T> {
        Ok(serde_json::from_value(self.header.clone())?)
    }
}

fn write_str32<W: Write>(w: &mut W, s: &str) -> Result<()> {
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

fn read_str32<R: Read>(r: &mut R) -> Result<String> {
    let len = read_u32(r)? as usize;
    if len > MAX_STRING {
        return Err(Error::Snapshot(format!("string length {len} too large")));
    }
    let mut b = vec![0u8; len];
    r.read_exact(&mut b)?;
    String::from_utf8(b).map_err(|e| Error::Snapshot(e.to_string()))
}
