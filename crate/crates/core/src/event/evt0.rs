//! `EVT0` tensor exchange format: magic, `u32` channels, `u32` H, `u32` W,
//! then little-endian `f32` values in (channel, row, col) order.

use std::io::{Read, Write};

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"EVT0";

/// A dense `C x H x W` float tensor, the on-disk unit for images and voxel grids.
#[derive(Clone, Debug, PartialEq)]
pub struct Planar {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Planar {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::shape(format!(
                "{} values for a {channels}x{height}x{width} tensor",
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }
}

pub fn write_evt0<W: Write>(mut w: W, t: &Planar) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + 4 * t.data.len());
    buf.extend_from_slice(MAGIC);
    for d in [t.channels, t.height, t.width] {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in &t.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_evt0<R: Read>(mut r: R) -> Result<Planar> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(Error::format("EVT0 tensor", "missing EVT0 header"));
    }
    let dim =
        |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let (c, h, w) = (dim(0), dim(1), dim(2));
    let body = &bytes[16..];
    if body.len() != 4 * c * h * w {
        return Err(Error::format(
            "EVT0 tensor",
            format!("{} payload bytes for {c}x{h}x{w}", body.len()),
        ));
    }
    let data = body
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Planar::new(c, h, w, data)
}
