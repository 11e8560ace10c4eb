//! FTEN binary tensor files.
//!
//! Layout (all little-endian):
//!
//! | bytes        | content                              |
//! |--------------|--------------------------------------|
//! | 4            | magic `FTEN`                         |
//! | 1            | format version (currently 1)         |
//! | 4            | rank as `u32`                        |
//! | 8 × rank     | dimensions as `u64`                  |
//! | 8 × product  | row-major IEEE-754 binary64 payload  |

use std::fs;
use std::path::Path;

use crate::error::{FameError, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"FTEN";
pub const VERSION: u8 = 1;

pub fn encode(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(9 + 8 * t.rank() + 8 * t.len());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4)? != MAGIC {
        return Err(FameError::Format("bad magic, expected FTEN".into()));
    }
    let version = cur.take(1)?[0];
    if version != VERSION {
        return Err(FameError::Format(format!("unsupported version {version}")));
    }
    let rank = u32::from_le_bytes(cur.take(4)?.try_into().unwrap()) as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let d = u64::from_le_bytes(cur.take(8)?.try_into().unwrap());
        shape.push(usize::try_from(d).map_err(|_| FameError::Format("dimension overflow".into()))?);
    }
    let count = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| FameError::Format("element count overflow".into()))?;
    let expected = count
        .checked_mul(8)
        .ok_or_else(|| FameError::Format("payload size overflow".into()))?;
    if cur.remaining() != expected {
        return Err(FameError::Format(format!(
            "payload is {} bytes, shape {:?} needs {}",
            cur.remaining(),
            shape,
            expected
        )));
    }
    let data = cur.bytes[cur.pos..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(shape, data)
}

pub fn write(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    fs::write(path, encode(t))?;
    Ok(())
}

pub fn read(path: impl AsRef<Path>) -> Result<Tensor> {
    decode(&fs::read(path)?)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(FameError::Format("truncated header".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}
