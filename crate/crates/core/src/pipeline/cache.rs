//! Tensor container files.
//!
//! Layout: the 8-byte magic, a little-endian u64 header length, the JSON
//! header, then raw little-endian tensor payloads. Every payload starts at an
//! absolute offset that is a multiple of 8; the header's tensor directory
//! records name, dtype, shape and offset.

use std::fs::{self, File};
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array2, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"CFSE0001";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    meta: Value,
    tensors: Vec<TensorEntry>,
}

/// A named tensor to be written.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub dtype: Dtype,
    pub data: ArrayD<f64>,
}

impl Tensor {
    pub fn f64(name: impl Into<String>, data: ArrayD<f64>) -> Self {
        Self {
            name: name.into(),
            dtype: Dtype::F64,
            data,
        }
    }

    pub fn matrix(name: impl Into<String>, m: &Array2<f64>) -> Self {
        Self::f64(name, m.clone().into_dyn())
    }

    pub fn vector(name: impl Into<String>, v: &[f64]) -> Self {
        Self::f64(
            name,
            ArrayD::from_shape_vec(IxDyn(&[v.len()]), v.to_vec()).expect("1-d shape"),
        )
    }
}

fn align8(x: u64) -> u64 {
    x.div_ceil(8) * 8
}

fn format_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::CacheFormat {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Writes a container atomically (temporary file, then rename).
pub fn write_container(path: impl AsRef<Path>, meta: Value, tensors: &[Tensor]) -> Result<()> {
    let path = path.as_ref();
    // offsets depend on the header length, which depends on the offsets;
    // iterate until the header length is stable
    let mut header_len = 0u64;
    let header_bytes = loop {
        let mut offset = align8(16 + header_len);
        let entries = tensors
            .iter()
            .map(|t| {
                let e = TensorEntry {
                    name: t.name.clone(),
                    dtype: t.dtype,
                    shape: t.data.shape().to_vec(),
                    offset,
                };
                offset = align8(offset + (t.data.len() * t.dtype.size()) as u64);
                e
            })
            .collect();
        let bytes = serde_json::to_vec(&Header {
            meta: meta.clone(),
            tensors: entries,
        })?;
        if bytes.len() as u64 == header_len {
            break bytes;
        }
        header_len = bytes.len() as u64;
    };
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        w.write_all(MAGIC)?;
        w.write_all(&header_len.to_le_bytes())?;
        w.write_all(&header_bytes)?;
        let mut pos = 16 + header_len;
        for t in tensors {
            let start = align8(pos);
            w.write_all(&vec![0u8; (start - pos) as usize])?;
            for &v in t.data.iter() {
                match t.dtype {
                    Dtype::F64 => w.write_all(&v.to_le_bytes())?,
                    Dtype::F32 => w.write_all(&(v as f32).to_le_bytes())?,
                }
            }
            pos = start + (t.data.len() * t.dtype.size()) as u64;
        }
        w.flush()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn read_header_from(path: &Path, bytes: &[u8]) -> Result<(Header, u64)> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(format_err(path, "bad magic"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let end = 16u64.checked_add(len).filter(|&e| e <= bytes.len() as u64);
    let Some(end) = end else {
        return Err(format_err(path, "truncated header"));
    };
    let header: Header =
        serde_json::from_slice(&bytes[16..end as usize]).map_err(|e| format_err(path, format!("header: {e}")))?;
    Ok((header, end))
}

/// Reads only the JSON header metadata.
pub fn read_meta(path: impl AsRef<Path>) -> Result<Value> {
    let path = path.as_ref();
    let mut f = File::open(path)?;
    let mut prefix = [0u8; 16];
    f.read_exact(&mut prefix).map_err(|_| format_err(path, "truncated"))?;
    if &prefix[..8] != MAGIC {
        return Err(format_err(path, "bad magic"));
    }
    let len = u64::from_le_bytes(prefix[8..16].try_into().expect("8 bytes"));
    let mut buf = prefix.to_vec();
    f.take(len).read_to_end(&mut buf)?;
    Ok(read_header_from(path, &buf)?.0.meta)
}

/// A fully loaded container.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub meta: Value,
    pub tensors: Vec<(TensorEntry, ArrayD<f64>)>,
}

impl Container {
    pub fn get(&self, name: &str) -> Option<&ArrayD<f64>> {
        self.tensors.iter().find(|(e, _)| e.name == name).map(|(_, a)| a)
    }

    pub fn matrix(&self, name: &str, path: &Path) -> Result<Array2<f64>> {
        let t = self
            .get(name)
            .ok_or_else(|| format_err(path, format!("missing tensor {name}")))?;
        t.clone()
            .into_dimensionality()
            .map_err(|_| format_err(path, format!("tensor {name} is not 2-d")))
    }

    pub fn vector(&self, name: &str, path: &Path) -> Result<Vec<f64>> {
        let t = self
            .get(name)
            .ok_or_else(|| format_err(path, format!("missing tensor {name}")))?;
        if t.ndim() != 1 {
            return Err(format_err(path, format!("tensor {name} is not 1-d")));
        }
        Ok(t.iter().copied().collect())
    }
}

pub fn read_container(path: impl AsRef<Path>) -> Result<Container> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    let (header, end) = read_header_from(path, &bytes)?;
    let tensors = header
        .tensors
        .into_iter()
        .map(|e| {
            let count: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let stop = start.checked_add(count * e.dtype.size());
            if e.offset % 8 != 0 || (start as u64) < end || stop.is_none_or(|s| s > bytes.len()) {
                return Err(format_err(path, format!("tensor {} out of bounds", e.name)));
            }
            let raw = &bytes[start..stop.expect("checked")];
            let data: Vec<f64> = match e.dtype {
                Dtype::F64 => raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8")))
                    .collect(),
                Dtype::F32 => raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4")) as f64)
                    .collect(),
            };
            let arr = ArrayD::from_shape_vec(IxDyn(&e.shape), data).map_err(|err| format_err(path, err.to_string()))?;
            Ok((e, arr))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Container {
        meta: header.meta,
        tensors,
    })
}
