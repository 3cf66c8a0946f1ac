//! `CKPT` container: named f32 tensors.
//!
//! Layout, all integers little-endian: magic `CKPT`, version `u16`, entry
//! count `u32`, then per entry a `u16` name length, UTF-8 name, `u8` rank,
//! one `u32` per extent and the f32 payload.

use std::path::Path;

use super::{numel, Real, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"CKPT";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointEntry {
    pub name: String,
    pub tensor: Tensor<f32>,
}

fn bad(detail: impl Into<String>) -> Error {
    Error::Format {
        kind: "checkpoint",
        detail: detail.into(),
    }
}

pub fn encode_checkpoint<'a, T: Real>(
    entries: impl IntoIterator<Item = (&'a str, &'a Tensor<T>)>,
) -> Result<Vec<u8>> {
    let entries: Vec<_> = entries.into_iter().collect();
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        let len = u16::try_from(name.len()).map_err(|_| bad(format!("name too long: {name}")))?;
        let rank = u8::try_from(t.rank()).map_err(|_| bad(format!("rank too large: {name}")))?;
        buf.extend_from_slice(&len.to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(rank);
        for &e in t.shape() {
            let e = u32::try_from(e).map_err(|_| bad(format!("extent too large: {name}")))?;
            buf.extend_from_slice(&e.to_le_bytes());
        }
        for &v in t.data() {
            buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    Ok(buf)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| bad(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Vec<CheckpointEntry>> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4)? != MAGIC {
        return Err(bad("bad magic"));
    }
    let version = cur.u16()?;
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let count = cur.u32()? as usize;
    let mut entries = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let len = cur.u16()? as usize;
        let name = std::str::from_utf8(cur.take(len)?)
            .map_err(|_| bad("name is not UTF-8"))?
            .to_owned();
        let rank = cur.take(1)?[0] as usize;
        let shape = (0..rank)
            .map(|_| cur.u32().map(|e| e as usize))
            .collect::<Result<Vec<_>>>()?;
        let n = numel(&shape);
        let payload = cur.take(n.checked_mul(4).ok_or_else(|| bad("payload overflow"))?)?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        entries.push(CheckpointEntry {
            name,
            tensor: Tensor::new(&shape, data)?,
        });
    }
    if cur.pos != bytes.len() {
        return Err(bad(format!(
            "{} trailing bytes after {count} entries",
            bytes.len() - cur.pos
        )));
    }
    Ok(entries)
}

pub fn write_checkpoint<'a, T: Real>(
    path: &Path,
    entries: impl IntoIterator<Item = (&'a str, &'a Tensor<T>)>,
) -> Result<()> {
    let bytes = encode_checkpoint(entries)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<CheckpointEntry>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_and_length_validation() {
        let a = Tensor::<f32>::new(&[2, 3], vec![1.0, -2.0, 3.5, 0.0, 1e-3, 7.0]).unwrap();
        let b = Tensor::<f32>::scalar(4.25);
        let bytes = encode_checkpoint([("stage0.w", &a), ("head.b", &b)]).unwrap();
        assert_eq!(&bytes[..4], b"CKPT");
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back[0].name, "stage0.w");
        assert_eq!(back[0].tensor, a);
        assert_eq!(back[1].tensor.shape(), &[] as &[usize]);
        assert!(decode_checkpoint(&bytes[..bytes.len() - 1]).is_err());
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(decode_checkpoint(&longer).is_err());
        let mut wrong = bytes;
        wrong[0] = b'X';
        assert!(decode_checkpoint(&wrong).is_err());
    }
}
