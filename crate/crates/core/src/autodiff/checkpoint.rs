//! Binary parameter checkpoints.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic "LCMPARAM" | u32 version | u8 scalar width | u32 record count
//! per record: u32 name length | name (UTF-8) | u32 rank | u64 dims… | data
//! 32-byte SHA-256 over everything above
//! ```

use std::path::Path;

use sha2::{Digest, Sha256};

use super::store::ParameterStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 8] = b"LCMPARAM";
pub const FORMAT_VERSION: u32 = 1;

pub fn encode<S: Scalar>(store: &ParameterStore<S>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(S::WIDTH);
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for id in store.ids() {
        let name = store.name(id).as_bytes();
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name);
        let t = store.value(id);
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Read just the format version; fails on a bad magic.
pub fn peek_version(bytes: &[u8]) -> Result<u32> {
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint("not a parameter checkpoint (bad magic)".into()));
    }
    Ok(u32::from_le_bytes(bytes[8..12].try_into().unwrap()))
}

/// Decode `(name, tensor)` records, verifying version and checksum.
pub fn decode<S: Scalar>(bytes: &[u8]) -> Result<Vec<(String, Tensor<S>)>> {
    let version = peek_version(bytes)?;
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    if bytes.len() < 12 + 32 {
        return Err(Error::Checkpoint("truncated file".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Checkpoint("checksum mismatch".into()));
    }
    let mut r = Reader { buf: body, pos: 12 };
    let width = r.take(1)?[0];
    if width != S::WIDTH {
        return Err(Error::Checkpoint(format!(
            "scalar width {width} bytes, expected {}",
            S::WIDTH
        )));
    }
    let count = r.u32()? as usize;
    let mut records = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n * S::WIDTH as usize)?;
        let data = raw.chunks(S::WIDTH as usize).map(S::read_le).collect();
        records.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != body.len() {
        return Err(Error::Checkpoint("trailing bytes after records".into()));
    }
    Ok(records)
}

/// Overwrite every parameter of `store` from the checkpoint. Names and
/// shapes must match exactly.
pub fn load_into<S: Scalar>(store: &mut ParameterStore<S>, bytes: &[u8]) -> Result<()> {
    let records = decode::<S>(bytes)?;
    if records.len() != store.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} parameters, model has {}",
            records.len(),
            store.len()
        )));
    }
    for (name, t) in records {
        let id = store
            .get(&name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name:?}")))?;
        if store.value(id).shape() != t.shape() {
            return Err(Error::Checkpoint(format!(
                "parameter {name:?}: shape {:?} in file, {:?} in model",
                t.shape(),
                store.value(id).shape()
            )));
        }
        *store.value_mut(id) = t;
    }
    Ok(())
}

pub fn save_file<S: Scalar>(store: &ParameterStore<S>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode(store)).map_err(|e| Error::io(path, e))
}

pub fn load_file<S: Scalar>(store: &mut ParameterStore<S>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    load_into(store, &bytes)
}
