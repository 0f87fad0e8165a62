//! Binary container for named tensors.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "SLTCKPT\0"
//! version    u32
//! preamble   u32 length + UTF-8 bytes (free-form, e.g. a model config)
//! count      u32
//! entries    count × { u32 name length, UTF-8 name, u8 dtype (0 = f32, 1 = f64),
//!                      u32 ndim, ndim × u64 extent, raw little-endian values }
//! ```

use std::io::{Read, Write};

use crate::error::{Result, TensorError};
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"SLTCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum EntryData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: EntryData,
}

impl Entry {
    pub fn from_slice<T: Scalar>(name: &str, shape: &[usize], values: &[T]) -> Self {
        let data = match T::DTYPE {
            DType::F32 => EntryData::F32(values.iter().map(|v| v.as_f64() as f32).collect()),
            DType::F64 => EntryData::F64(values.iter().map(|v| v.as_f64()).collect()),
        };
        Self {
            name: name.to_string(),
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn from_tensor<T: Scalar>(name: &str, t: &Tensor<T>) -> Self {
        Self::from_slice(name, t.shape(), t.data())
    }

    pub fn dtype(&self) -> DType {
        match self.data {
            EntryData::F32(_) => DType::F32,
            EntryData::F64(_) => DType::F64,
        }
    }

    pub fn to_vec<T: Scalar>(&self) -> Vec<T> {
        match &self.data {
            EntryData::F32(v) => v.iter().map(|&x| T::of(x as f64)).collect(),
            EntryData::F64(v) => v.iter().map(|&x| T::of(x)).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub preamble: String,
    pub entries: Vec<Entry>,
}

impl Checkpoint {
    pub fn entry(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        write_str(&mut out, &self.preamble);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            write_str(&mut out, &e.name);
            out.push(e.dtype().tag());
            out.extend_from_slice(&(e.shape.len() as u32).to_le_bytes());
            for &d in &e.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match &e.data {
                EntryData::F32(v) => v.iter().for_each(|x| x.write_le(&mut out)),
                EntryData::F64(v) => v.iter().for_each(|x| x.write_le(&mut out)),
            }
        }
        out
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(8)? != MAGIC {
            return Err(TensorError::Checkpoint("bad magic".into()));
        }
        let version = cur.u32()?;
        if version != VERSION {
            return Err(TensorError::Checkpoint(format!(
                "unsupported version {version}"
            )));
        }
        let preamble = cur.string()?;
        let count = cur.u32()? as usize;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let name = cur.string()?;
            let tag = cur.take(1)?[0];
            let dtype = DType::from_tag(tag)
                .ok_or_else(|| TensorError::Checkpoint(format!("unknown dtype tag {tag}")))?;
            let ndim = cur.u32()? as usize;
            let shape = (0..ndim)
                .map(|_| cur.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = cur.take(n * dtype.size())?;
            let data = match dtype {
                DType::F32 => EntryData::F32(raw.chunks(4).map(f32::read_le).collect()),
                DType::F64 => EntryData::F64(raw.chunks(8).map(f64::read_le).collect()),
            };
            entries.push(Entry { name, shape, data });
        }
        if cur.pos != bytes.len() {
            return Err(TensorError::Checkpoint("trailing bytes".into()));
        }
        Ok(Self { preamble, entries })
    }
}

fn write_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| TensorError::Checkpoint("truncated file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| TensorError::Checkpoint("invalid UTF-8".into()))
    }
}
