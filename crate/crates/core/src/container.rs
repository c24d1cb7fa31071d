//! The `KMTF` tensor container: a flat list of named, typed, shaped arrays.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "KMTF" | u32 version | u32 record count
//! per record: u32 name length | utf-8 name | u8 dtype | u32 ndim | u64 dims... | payload
//! ```
//!
//! dtype 0 is float32, dtype 1 is int64.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"KMTF";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    I64(Vec<i64>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::I64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn code(&self) -> u8 {
        match self {
            TensorData::F32(_) => 0,
            TensorData::I64(_) => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: TensorData,
}

impl TensorRecord {
    /// Stores `data` as float32.
    pub fn from_f64(name: &str, shape: &[usize], data: &[f64]) -> Self {
        TensorRecord {
            name: name.to_string(),
            shape: shape.to_vec(),
            data: TensorData::F32(data.iter().map(|&v| v as f32).collect()),
        }
    }

    pub fn from_i64(name: &str, shape: &[usize], data: Vec<i64>) -> Self {
        TensorRecord {
            name: name.to_string(),
            shape: shape.to_vec(),
            data: TensorData::I64(data),
        }
    }

    pub fn to_f64(&self) -> Result<Vec<f64>> {
        match &self.data {
            TensorData::F32(v) => Ok(v.iter().map(|&x| x as f64).collect()),
            TensorData::I64(_) => Err(Error::invalid(format!(
                "record {:?} holds int64, expected float32",
                self.name
            ))),
        }
    }

    pub fn to_i64(&self) -> Result<&[i64]> {
        match &self.data {
            TensorData::I64(v) => Ok(v),
            TensorData::F32(_) => Err(Error::invalid(format!(
                "record {:?} holds float32, expected int64",
                self.name
            ))),
        }
    }

    fn check(&self) -> Result<()> {
        let expected: usize = self.shape.iter().product();
        if expected != self.data.len() {
            return Err(Error::shape(format!(
                "record {:?}: shape {:?} implies {expected} elements, payload has {}",
                self.name,
                self.shape,
                self.data.len()
            )));
        }
        Ok(())
    }
}

pub fn encode(records: &[TensorRecord]) -> Result<Vec<u8>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for rec in records {
        if !seen.insert(rec.name.as_str()) {
            return Err(Error::DuplicateName(rec.name.clone()));
        }
        rec.check()?;
        out.extend_from_slice(&(rec.name.len() as u32).to_le_bytes());
        out.extend_from_slice(rec.name.as_bytes());
        out.push(rec.data.code());
        out.extend_from_slice(&(rec.shape.len() as u32).to_le_bytes());
        for &d in &rec.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        match &rec.data {
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::I64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Truncated {
                path: self.path.to_path_buf(),
                detail: format!(
                    "needed {n} bytes for {what} at offset {}, {} remain",
                    self.pos,
                    self.buf.len() - self.pos
                ),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

/// `path` is only used in error messages.
pub fn decode(buf: &[u8], path: &Path) -> Result<Vec<TensorRecord>> {
    let mut r = Reader { buf, pos: 0, path };
    if buf.len() < 4 || &buf[..4] != MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
        });
    }
    r.pos = 4;
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::invalid(format!(
            "{}: unsupported container version {version}",
            path.display()
        )));
    }
    let count = r.u32("record count")? as usize;
    let mut seen = HashSet::new();
    let mut records = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name_len = r.u32("name length")? as usize;
        let name = String::from_utf8(r.take(name_len, "name")?.to_vec())
            .map_err(|_| Error::invalid(format!("{}: record name is not utf-8", path.display())))?;
        if !seen.insert(name.clone()) {
            return Err(Error::DuplicateName(name));
        }
        let code = r.take(1, "dtype")?[0];
        if code > 1 {
            return Err(Error::UnknownDtype { code, name });
        }
        let ndim = r.u32("ndim")? as usize;
        let mut shape = Vec::with_capacity(ndim.min(16));
        for _ in 0..ndim {
            shape.push(r.u64("dimension")? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Truncated {
                path: path.to_path_buf(),
                detail: format!("record {name:?} has an overflowing shape {shape:?}"),
            })?;
        let width = if code == 0 { 4 } else { 8 };
        let bytes = n.checked_mul(width).ok_or_else(|| Error::Truncated {
            path: path.to_path_buf(),
            detail: format!("record {name:?} payload size overflows"),
        })?;
        let payload = r.take(bytes, "payload")?;
        let data = if code == 0 {
            TensorData::F32(
                payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect(),
            )
        } else {
            TensorData::I64(
                payload
                    .chunks_exact(8)
                    .map(|c| i64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect(),
            )
        };
        records.push(TensorRecord { name, shape, data });
    }
    Ok(records)
}

pub fn write_container(path: impl AsRef<Path>, records: &[TensorRecord]) -> Result<()> {
    let bytes = encode(records)?;
    if let Some(parent) = path.as_ref().parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_container(path: impl AsRef<Path>) -> Result<Vec<TensorRecord>> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    decode(&bytes, path)
}

pub fn find<'a>(records: &'a [TensorRecord], name: &str) -> Option<&'a TensorRecord> {
    records.iter().find(|r| r.name == name)
}

/// Per-sequence sidecar stored next to a container.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub fps: f64,
    pub mesh: String,
    pub speaker: usize,
}

pub fn sidecar_path(container: &Path) -> PathBuf {
    container.with_extension("json")
}
