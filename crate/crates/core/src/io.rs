//! `CAPT` tensor container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "CAPT"  u16 version  u32 tensor_count
//! repeat tensor_count:
//!     u16 name_len  name (UTF-8)  u8 rank  rank × u32 dims  payload (f32 LE)
//! ```
//!
//! Tensors are written in insertion order, so the byte image is a pure
//! function of the contents.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{CapaError, Result};

pub const MAGIC: &[u8; 4] = b"CAPT";
pub const FORMAT_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl NamedTensor {
    pub fn new(name: impl Into<String>, dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let name = name.into();
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(CapaError::Format(format!(
                "tensor {name}: dims {dims:?} need {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { name, dims, data })
    }
}

/// Ordered collection of named tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorFile {
    tensors: Vec<NamedTensor>,
}

impl TensorFile {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, t: NamedTensor) {
        self.tensors.push(t);
    }

    pub fn tensors(&self) -> &[NamedTensor] {
        &self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn require(&self, name: &str) -> Result<&NamedTensor> {
        self.get(name)
            .ok_or_else(|| CapaError::Format(format!("missing tensor {name}")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        self.write_to(&mut out)?;
        Ok(out)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        let count = u32::try_from(self.tensors.len())
            .map_err(|_| CapaError::Format("too many tensors".into()))?;
        w.write_all(&count.to_le_bytes())?;
        for t in &self.tensors {
            let name = t.name.as_bytes();
            let len = u16::try_from(name.len())
                .map_err(|_| CapaError::Format(format!("name too long: {}", t.name)))?;
            w.write_all(&len.to_le_bytes())?;
            w.write_all(name)?;
            let rank = u8::try_from(t.dims.len())
                .map_err(|_| CapaError::Format(format!("rank too large: {}", t.name)))?;
            w.write_all(&[rank])?;
            for &d in &t.dims {
                let d = u32::try_from(d)
                    .map_err(|_| CapaError::Format(format!("dim too large: {}", t.name)))?;
                w.write_all(&d.to_le_bytes())?;
            }
            for v in &t.data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self> {
        let r = &mut bytes;
        let mut magic = [0u8; 4];
        read_exact(r, &mut magic)?;
        if &magic != MAGIC {
            return Err(CapaError::Format("bad magic".into()));
        }
        let version = u16::from_le_bytes(read_array(r)?);
        if version != FORMAT_VERSION {
            return Err(CapaError::Format(format!("unsupported version {version}")));
        }
        let count = u32::from_le_bytes(read_array(r)?) as usize;
        let mut file = TensorFile::new();
        for _ in 0..count {
            let len = u16::from_le_bytes(read_array(r)?) as usize;
            let mut name = vec![0u8; len];
            read_exact(r, &mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| CapaError::Format("tensor name is not UTF-8".into()))?;
            let [rank] = read_array::<1>(r)?;
            let mut dims = Vec::with_capacity(rank as usize);
            for _ in 0..rank {
                dims.push(u32::from_le_bytes(read_array(r)?) as usize);
            }
            let n: usize = dims.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                data.push(f32::from_le_bytes(read_array(r)?));
            }
            file.push(NamedTensor { name, dims, data });
        }
        if !r.is_empty() {
            return Err(CapaError::Format(format!("{} trailing bytes", r.len())));
        }
        Ok(file)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| CapaError::Format("unexpected end of file".into()))
}

fn read_array<const N: usize>(r: &mut &[u8]) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    read_exact(r, &mut buf)?;
    Ok(buf)
}
