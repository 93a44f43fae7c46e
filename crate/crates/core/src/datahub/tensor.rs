//! Raw tensor records: `u32` rank, `u64` dims, then `f32` values, all
//! little-endian. Blobs are identified by byte offset and length and checked
//! with 64-bit FNV-1a.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

/// Hash of the canonical (sorted-key) JSON form of `value`.
pub fn config_hash(value: &serde_json::Value) -> u64 {
    fnv1a64(value.to_string().as_bytes())
}

pub fn encode_tensor(shape: &[usize], values: &[f32]) -> Vec<u8> {
    debug_assert_eq!(shape.iter().product::<usize>(), values.len());
    let mut out = Vec::with_capacity(4 + 8 * shape.len() + 4 * values.len());
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_tensor(bytes: &[u8]) -> Result<(Vec<usize>, Vec<f32>)> {
    let take = |at: usize, n: usize| -> Result<&[u8]> {
        bytes
            .get(at..at + n)
            .ok_or_else(|| Error::Format(format!("tensor record truncated at byte {at}")))
    };
    let rank = u32::from_le_bytes(take(0, 4)?.try_into().expect("4 bytes")) as usize;
    if rank > 8 {
        return Err(Error::Format(format!("implausible tensor rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for i in 0..rank {
        shape.push(u64::from_le_bytes(take(4 + 8 * i, 8)?.try_into().expect("8 bytes")) as usize);
    }
    let start = 4 + 8 * rank;
    let count: usize = shape.iter().product();
    let data = take(start, 4 * count)?;
    if bytes.len() != start + 4 * count {
        return Err(Error::Format(format!(
            "tensor record has {} bytes, shape {:?} implies {}",
            bytes.len(),
            shape,
            start + 4 * count
        )));
    }
    let values = data
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok((shape, values))
}

/// Location of one tensor record inside a blob file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorRef {
    pub file: String,
    pub offset: u64,
    pub length: u64,
    pub fnv1a64: String,
}

/// Accumulates tensor records for one blob file.
#[derive(Debug, Default)]
pub struct BlobWriter {
    file: String,
    bytes: Vec<u8>,
}

impl BlobWriter {
    pub fn new(file: impl Into<String>) -> Self {
        Self {
            file: file.into(),
            bytes: Vec::new(),
        }
    }

    pub fn push(&mut self, shape: &[usize], values: &[f32]) -> TensorRef {
        let record = encode_tensor(shape, values);
        let r = TensorRef {
            file: self.file.clone(),
            offset: self.bytes.len() as u64,
            length: record.len() as u64,
            fnv1a64: format!("{:016x}", fnv1a64(&record)),
        };
        self.bytes.extend_from_slice(&record);
        r
    }

    pub fn finish(self, dir: &Path) -> Result<()> {
        write_locked(&dir.join(&self.file), &self.bytes)
    }
}

/// Reads and verifies the tensor at `r` from an already loaded blob.
pub fn read_ref(blob: &[u8], r: &TensorRef, name: &str) -> Result<(Vec<usize>, Vec<f32>)> {
    let start = r.offset as usize;
    let end = start
        .checked_add(r.length as usize)
        .ok_or_else(|| Error::Format(format!("`{name}`: offset overflow")))?;
    let bytes = blob
        .get(start..end)
        .ok_or_else(|| Error::Format(format!("`{name}`: range {start}..{end} outside `{}`", r.file)))?;
    let expected = u64::from_str_radix(&r.fnv1a64, 16)
        .map_err(|_| Error::Format(format!("`{name}`: bad checksum field `{}`", r.fnv1a64)))?;
    let actual = fnv1a64(bytes);
    if actual != expected {
        return Err(Error::Checksum {
            name: name.to_string(),
            expected,
            actual,
        });
    }
    decode_tensor(bytes)
}

/// Writes `bytes` to `path` while holding an exclusive lock on the file.
pub fn write_locked(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f: File = OpenOptions::new().create(true).write(true).truncate(false).open(path)?;
    f.lock()?;
    f.set_len(0)?;
    f.write_all(bytes)?;
    f.sync_all()?;
    f.unlock()?;
    Ok(())
}
