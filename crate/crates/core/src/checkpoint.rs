//! Binary parameter checkpoints.
//!
//! Layout (little-endian): magic `DCKP`, `u32` version, `u32` header length
//! and a `key=value` header, `u32` tensor count and tensor records, then
//! `u32` optimizer record count and records in the same format. A record is
//! `u32` name length, UTF-8 name, `u32` rank, `rank × u32` dims and the
//! `f32` payload.

use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::kv::KvMap;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"DCKP";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub header: KvMap,
    pub tensors: Vec<(String, Tensor<f32>)>,
    pub optimizer: Vec<(String, Tensor<f32>)>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("value {v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_records(out: &mut Vec<u8>, records: &[(String, Tensor<f32>)]) -> Result<()> {
    put_u32(out, records.len())?;
    for (name, t) in records {
        put_u32(out, name.len())?;
        out.extend_from_slice(name.as_bytes());
        put_u32(out, t.rank())?;
        for &d in t.shape() {
            put_u32(out, d)?;
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("name is not UTF-8".into()))
    }

    fn records(&mut self) -> Result<Vec<(String, Tensor<f32>)>> {
        let count = self.u32()?;
        let mut out = Vec::new();
        for _ in 0..count {
            let name = self.string()?;
            let rank = self.u32()?;
            let shape = (0..rank).map(|_| self.u32()).collect::<Result<Vec<_>>>()?;
            let len = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Checkpoint(format!("tensor {name} is too large")))?;
            let bytes = self.take(len.checked_mul(4).ok_or_else(|| Error::Checkpoint("overflow".into()))?)?;
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("tensor {name}: {e}")))?;
            out.push((name, t));
        }
        Ok(out)
    }
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION as usize)?;
        let header = self.header.to_text();
        put_u32(&mut out, header.len())?;
        out.extend_from_slice(header.as_bytes());
        put_records(&mut out, &self.tensors)?;
        put_records(&mut out, &self.optimizer)?;
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut c = Cursor { buf, pos: 0 };
        if c.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = c.u32()?;
        if version != VERSION as usize {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let header = KvMap::parse(&c.string()?)?;
        let tensors = c.records()?;
        let optimizer = c.records()?;
        if c.pos != buf.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", buf.len() - c.pos)));
        }
        Ok(Self {
            header,
            tensors,
            optimizer,
        })
    }

    pub fn write(&self, mut w: impl Write) -> Result<()> {
        w.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn read(mut r: impl Read) -> Result<Self> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Hex SHA-256 of the serialized checkpoint.
    pub fn checksum(&self) -> Result<String> {
        Ok(hex_sha256(&self.to_bytes()?))
    }
}

pub fn hex_sha256(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
