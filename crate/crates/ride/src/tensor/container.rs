//! Named-tensor container file.
//!
//! A flat little-endian format for checkpoints and descriptor dumps:
//!
//! ```text
//! magic    8 bytes  "RIDETNSR"
//! version  u32      currently 1
//! count    u32
//! entry*   name_len u32, name bytes (utf-8),
//!          rank u32, dims rank*u32,
//!          data prod(dims)*f32
//! ```
//!
//! Entries keep their written order, so writers that emit a fixed order
//! produce byte-identical files for identical contents.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

pub const MAGIC: &[u8; 8] = b"RIDETNSR";
pub const VERSION: u32 = 1;

/// Guard against absurd allocations from corrupt headers.
const MAX_ELEMENTS: u64 = 1 << 31;

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("bad magic: not a tensor container")]
    BadMagic,
    #[error("unsupported container version {0}")]
    UnsupportedVersion(u32),
    #[error("corrupt container: {0}")]
    Corrupt(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl NamedTensor {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Self {
        let name = name.into();
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        NamedTensor { name, shape, data }
    }
}

pub fn save(path: &Path, tensors: &[NamedTensor]) -> Result<(), ContainerError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for t in tensors {
        let name = t.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&(t.shape.len() as u32).to_le_bytes())?;
        for &d in &t.shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        let n: usize = t.shape.iter().product();
        if n != t.data.len() {
            return Err(ContainerError::Corrupt(format!(
                "tensor {} shape {:?} does not match {} data elements",
                t.name,
                t.shape,
                t.data.len()
            )));
        }
        for &v in &t.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Vec<NamedTensor>, ContainerError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(ContainerError::BadMagic);
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(ContainerError::UnsupportedVersion(version));
    }
    let count = read_u32(&mut r)? as usize;
    let mut out = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        if name_len > 4096 {
            return Err(ContainerError::Corrupt(format!("name length {name_len} too large")));
        }
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| ContainerError::Corrupt("tensor name is not utf-8".into()))?;
        let rank = read_u32(&mut r)? as usize;
        if rank > 8 {
            return Err(ContainerError::Corrupt(format!("rank {rank} too large")));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut numel: u64 = 1;
        for _ in 0..rank {
            let d = read_u32(&mut r)? as u64;
            numel = numel.saturating_mul(d);
            shape.push(d as usize);
        }
        if numel > MAX_ELEMENTS {
            return Err(ContainerError::Corrupt(format!(
                "tensor {name} claims {numel} elements"
            )));
        }
        let n = numel as usize;
        let mut bytes = vec![0u8; n * 4];
        r.read_exact(&mut bytes)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        out.push(NamedTensor { name, shape, data });
    }
    let mut probe = [0u8; 1];
    if r.read(&mut probe)? != 0 {
        return Err(ContainerError::Corrupt("trailing bytes after last tensor".into()));
    }
    Ok(out)
}

/// First tensor with the given name, if present.
pub fn find<'a>(tensors: &'a [NamedTensor], name: &str) -> Option<&'a NamedTensor> {
    tensors.iter().find(|t| t.name == name)
}

fn read_u32(r: &mut impl Read) -> Result<u32, ContainerError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}
