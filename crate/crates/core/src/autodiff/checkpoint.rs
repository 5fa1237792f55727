//! `CKPT` parameter files: magic, `u32` tensor count, then per tensor a
//! `u32` name length, UTF-8 name, `u32` rank, `u32` dims and `f32` values.
//! All integers and floats are little-endian.

use std::io::{Read, Write};

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"CKPT";

pub fn write_checkpoint<W: Write>(mut w: W, params: &ParamStore) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for id in params.ids() {
        let name = params.name(id).as_bytes();
        let t = params.get(id);
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name);
        buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
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
            .ok_or_else(|| {
                Error::format("checkpoint", format!("truncated at byte {}", self.pos))
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<ParamStore> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut c = Cursor {
        bytes: &bytes,
        pos: 0,
    };
    if c.take(4)? != MAGIC {
        return Err(Error::format("checkpoint", "missing CKPT header"));
    }
    let count = c.u32()?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = c.u32()?;
        let name = std::str::from_utf8(c.take(len)?)
            .map_err(|e| Error::format("checkpoint", e.to_string()))?
            .to_owned();
        let rank = c.u32()?;
        let shape = (0..rank).map(|_| c.u32()).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = c
            .take(4 * n)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        store.insert(name, Tensor::new(shape, data)?)?;
    }
    if c.pos != bytes.len() {
        return Err(Error::format("checkpoint", "trailing bytes"));
    }
    Ok(store)
}
