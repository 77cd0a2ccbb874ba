//! SRKD tensor blobs and named-tensor checkpoint archives.
//!
//! Tensor blob: `"SRKD"`, version `0x01`, dtype (`0x01` f64 LE, `0x02` u32 LE),
//! rank byte, `rank` u32 LE dims, row-major payload.
//!
//! Archive: `"SRKA"`, version `0x01`, u32 LE entry count, then per entry a
//! u32 LE name length, UTF-8 name, u32 LE blob length and the blob. Entries
//! are stored sorted by name.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serkd_core::Tensor;

use crate::error::{io_err, HarnessError, Result};

pub const MAGIC: &[u8; 4] = b"SRKD";
pub const ARCHIVE_MAGIC: &[u8; 4] = b"SRKA";
pub const VERSION: u8 = 0x01;
pub const DTYPE_F64: u8 = 0x01;
pub const DTYPE_U32: u8 = 0x02;

#[derive(Debug, Clone, PartialEq)]
pub enum Blob {
    F64 { shape: Vec<usize>, data: Vec<f64> },
    U32 { shape: Vec<usize>, data: Vec<u32> },
}

fn header(out: &mut Vec<u8>, dtype: u8, shape: &[usize]) -> Result<()> {
    let rank =
        u8::try_from(shape.len()).map_err(|_| HarnessError::Format(format!("rank {} exceeds 255", shape.len())))?;
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&[VERSION, dtype, rank]);
    for &d in shape {
        let d = u32::try_from(d).map_err(|_| HarnessError::Format(format!("dimension {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    Ok(())
}

pub fn encode_f64(shape: &[usize], data: &[f64]) -> Result<Vec<u8>> {
    check_len(shape, data.len())?;
    let mut out = Vec::with_capacity(7 + 4 * shape.len() + 8 * data.len());
    header(&mut out, DTYPE_F64, shape)?;
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn encode_u32(shape: &[usize], data: &[u32]) -> Result<Vec<u8>> {
    check_len(shape, data.len())?;
    let mut out = Vec::with_capacity(7 + 4 * shape.len() + 4 * data.len());
    header(&mut out, DTYPE_U32, shape)?;
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn encode_tensor(t: &Tensor) -> Result<Vec<u8>> {
    encode_f64(t.shape(), &t.data())
}

fn check_len(shape: &[usize], len: usize) -> Result<()> {
    let n: usize = shape.iter().product();
    if n != len {
        return Err(HarnessError::Format(format!(
            "shape {shape:?} holds {n} values, got {len}"
        )));
    }
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| HarnessError::Format(format!("truncated: need {n} bytes at offset {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Blob> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let blob = decode_from(&mut r)?;
    if r.pos != bytes.len() {
        return Err(HarnessError::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(blob)
}

fn decode_from(r: &mut Reader<'_>) -> Result<Blob> {
    if r.take(4)? != MAGIC {
        return Err(HarnessError::Format("bad magic, expected SRKD".into()));
    }
    let version = r.u8()?;
    if version != VERSION {
        return Err(HarnessError::Format(format!("unsupported version {version:#04x}")));
    }
    let dtype = r.u8()?;
    let rank = r.u8()? as usize;
    let shape = (0..rank)
        .map(|_| r.u32().map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| HarnessError::Format(format!("shape {shape:?} overflows")))?;
    match dtype {
        DTYPE_F64 => {
            let raw = r.take(
                n.checked_mul(8)
                    .ok_or_else(|| HarnessError::Format("payload overflows".into()))?,
            )?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            Ok(Blob::F64 { shape, data })
        }
        DTYPE_U32 => {
            let raw = r.take(
                n.checked_mul(4)
                    .ok_or_else(|| HarnessError::Format("payload overflows".into()))?,
            )?;
            let data = raw
                .chunks_exact(4)
                .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            Ok(Blob::U32 { shape, data })
        }
        other => Err(HarnessError::Format(format!("unknown dtype {other:#04x}"))),
    }
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor> {
    match decode(bytes)? {
        Blob::F64 { shape, data } => Ok(Tensor::new(data, &shape)?),
        Blob::U32 { .. } => Err(HarnessError::Format("expected an f64 tensor, found u32".into())),
    }
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(io_err(path))
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(io_err(path))
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    write_bytes(path, &encode_tensor(t)?)
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    decode_tensor(&read_bytes(path)?)
}

pub fn encode_archive(entries: &BTreeMap<String, Tensor>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(ARCHIVE_MAGIC);
    out.push(VERSION);
    let count = u32::try_from(entries.len()).map_err(|_| HarnessError::Format("too many entries".into()))?;
    out.extend_from_slice(&count.to_le_bytes());
    for (name, t) in entries {
        let blob = encode_tensor(t)?;
        for len in [name.len(), blob.len()] {
            if u32::try_from(len).is_err() {
                return Err(HarnessError::Format(format!("entry {name} too large")));
            }
        }
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(blob.len() as u32).to_le_bytes());
        out.extend_from_slice(&blob);
    }
    Ok(out)
}

pub fn decode_archive(bytes: &[u8]) -> Result<BTreeMap<String, Tensor>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != ARCHIVE_MAGIC {
        return Err(HarnessError::Format("bad magic, expected SRKA".into()));
    }
    let version = r.u8()?;
    if version != VERSION {
        return Err(HarnessError::Format(format!(
            "unsupported archive version {version:#04x}"
        )));
    }
    let count = r.u32()?;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| HarnessError::Format("entry name is not UTF-8".into()))?
            .to_string();
        let len = r.u32()? as usize;
        let t = decode_tensor(r.take(len)?)?;
        if out.insert(name.clone(), t).is_some() {
            return Err(HarnessError::Format(format!("duplicate entry {name}")));
        }
    }
    if r.pos != bytes.len() {
        return Err(HarnessError::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(out)
}

pub fn save_archive(path: &Path, entries: &BTreeMap<String, Tensor>) -> Result<()> {
    write_bytes(path, &encode_archive(entries)?)
}

pub fn load_archive(path: &Path) -> Result<BTreeMap<String, Tensor>> {
    decode_archive(&read_bytes(path)?)
}
