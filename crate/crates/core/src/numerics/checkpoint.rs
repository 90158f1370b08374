//! `SDKP` checkpoint files.
//!
//! Layout (all integers little-endian u32):
//!
//! ```text
//! "SDKP" version header_len header_bytes tensor_count
//!   { name_len name rank dims[rank] f32[product(dims)] } * tensor_count
//! ```
//!
//! The header is ASCII `key=value\n` lines describing the model and the
//! training state, so a checkpoint is self-describing. Tensors are stored as
//! `f32`; values that are already `f32`-representable round-trip exactly.

use std::fs;
use std::path::Path;

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SDKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub header: Vec<(String, String)>,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn header_value(&self, key: &str) -> Option<&str> {
        self.header.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let header: String = self.header.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
        put_bytes(&mut out, header.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            put_bytes(&mut out, name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::format(path, "bad checkpoint magic"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
        }
        let header_len = r.u32()? as usize;
        let text = std::str::from_utf8(r.take(header_len)?)
            .map_err(|_| Error::format(path, "header is not text"))?;
        let mut header = Vec::new();
        for line in text.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::format(path, format!("header line without '=': {line}")))?;
            header.push((k.to_string(), v.to_string()));
        }
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::format(path, "tensor name is not UTF-8"))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n * 4)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| Error::format(path, format!("{name}: {e}")))?;
            tensors.push((name, t));
        }
        if r.pos != bytes.len() {
            return Err(Error::format(path, "trailing bytes after tensor table"));
        }
        Ok(Self { header, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    out.extend_from_slice(&(b.len() as u32).to_le_bytes());
    out.extend_from_slice(b);
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::format(self.path, "unexpected end of checkpoint"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Round every entry to the nearest `f32`.
pub fn quantize_f32(t: &mut Tensor) {
    for v in t.data_mut() {
        *v = f64::from(*v as f32);
    }
}
