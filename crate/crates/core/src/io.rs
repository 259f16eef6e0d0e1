//! File formats.
//!
//! GRD1 layout (all little-endian):
//!
//! ```text
//! b"GRD1" | width: u32 | height: u32 | channels: u32 | f32 x (width*height*channels), (y, x, c) order
//! ```
//!
//! 16-bit depth maps are binary PGM (`P5`, maxval 65535, big-endian samples)
//! where `depth = raw / scale` meters (`scale = 256` by default) and raw 0
//! marks a missing measurement.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::Grid;

pub const GRD_MAGIC: &[u8; 4] = b"GRD1";
pub const DEFAULT_DEPTH_SCALE: f64 = 256.0;

pub fn encode_grd(grid: &Grid) -> Result<Vec<u8>> {
    if !grid.all_finite() {
        return Err(Error::InvalidGrid("cannot write non-finite values".into()));
    }
    let mut out = Vec::with_capacity(16 + grid.data().len() * 4);
    out.extend_from_slice(GRD_MAGIC);
    for dim in [grid.width(), grid.height(), grid.channels()] {
        let d = u32::try_from(dim)
            .map_err(|_| Error::InvalidGrid(format!("dimension {dim} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for &v in grid.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_grd(bytes: &[u8]) -> Result<Grid> {
    if bytes.len() < 16 {
        return Err(Error::CorruptFile(format!(
            "GRD header needs 16 bytes, got {}",
            bytes.len()
        )));
    }
    if &bytes[..4] != GRD_MAGIC {
        return Err(Error::CorruptFile("bad GRD magic".into()));
    }
    let dim =
        |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let (w, h, c) = (dim(0), dim(1), dim(2));
    let count = w
        .checked_mul(h)
        .and_then(|v| v.checked_mul(c))
        .ok_or_else(|| Error::CorruptFile("GRD dimensions overflow".into()))?;
    let payload = &bytes[16..];
    if payload.len() != count * 4 {
        return Err(Error::CorruptFile(format!(
            "GRD header {w}x{h}x{c} needs {} payload bytes, found {}",
            count * 4,
            payload.len()
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect();
    Grid::from_vec(w, h, c, data)
}

pub fn write_grd(grid: &Grid, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_grd(grid)?)?;
    Ok(())
}

pub fn read_grd(path: impl AsRef<Path>) -> Result<Grid> {
    decode_grd(&fs::read(path)?)
}

/// Raw 16-bit samples of a single-channel depth grid: `round(depth * scale)`.
fn depth_to_raw(grid: &Grid, scale: f64) -> Result<Vec<u16>> {
    grid.ensure_single_channel("PGM depth")?;
    grid.data()
        .iter()
        .map(|&d| {
            let r = (d * scale).round();
            if r.is_finite() && (0.0..=65535.0).contains(&r) {
                Ok(r as u16)
            } else {
                Err(Error::InvalidGrid(format!(
                    "depth {d} not representable at scale {scale}"
                )))
            }
        })
        .collect()
}

pub fn encode_pgm16(grid: &Grid, scale: f64) -> Result<Vec<u8>> {
    let raw = depth_to_raw(grid, scale)?;
    let mut out = format!("P5\n{} {}\n65535\n", grid.width(), grid.height()).into_bytes();
    for r in raw {
        out.extend_from_slice(&r.to_be_bytes());
    }
    Ok(out)
}

/// Header tokenizer that skips whitespace and `#` comments.
struct PgmHeader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl PgmHeader<'_> {
    fn token(&mut self) -> Result<&[u8]> {
        loop {
            match self.bytes.get(self.pos) {
                Some(b) if b.is_ascii_whitespace() => self.pos += 1,
                Some(b'#') => {
                    while self.bytes.get(self.pos).is_some_and(|&b| b != b'\n') {
                        self.pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(Error::CorruptFile("truncated PGM header".into())),
            }
        }
        let start = self.pos;
        while self
            .bytes
            .get(self.pos)
            .is_some_and(|b| !b.is_ascii_whitespace())
        {
            self.pos += 1;
        }
        Ok(&self.bytes[start..self.pos])
    }

    fn number(&mut self) -> Result<usize> {
        let t = self.token()?;
        std::str::from_utf8(t)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| {
                Error::CorruptFile(format!(
                    "bad PGM header field {:?}",
                    String::from_utf8_lossy(t)
                ))
            })
    }
}

pub fn decode_pgm16(bytes: &[u8], scale: f64) -> Result<Grid> {
    let mut hdr = PgmHeader { bytes, pos: 0 };
    let magic = hdr.token()?;
    if magic != b"P5" {
        return Err(Error::UnsupportedFormat(format!(
            "PGM magic {:?}, only binary P5 is supported",
            String::from_utf8_lossy(magic)
        )));
    }
    let w = hdr.number()?;
    let h = hdr.number()?;
    let maxval = hdr.number()?;
    if maxval != 65535 {
        return Err(Error::UnsupportedFormat(format!(
            "PGM maxval {maxval}, expected 65535"
        )));
    }
    // Exactly one whitespace byte separates the header from the samples.
    let start = hdr.pos + 1;
    let payload = bytes.get(start..).unwrap_or(&[]);
    if payload.len() != w * h * 2 {
        return Err(Error::CorruptFile(format!(
            "PGM {w}x{h} needs {} sample bytes, found {}",
            w * h * 2,
            payload.len()
        )));
    }
    let data = payload
        .chunks_exact(2)
        .map(|b| u16::from_be_bytes([b[0], b[1]]) as f64 / scale)
        .collect();
    Grid::from_vec(w, h, 1, data)
}

pub fn write_pgm16(grid: &Grid, path: impl AsRef<Path>, scale: f64) -> Result<()> {
    fs::write(path, encode_pgm16(grid, scale)?)?;
    Ok(())
}

/// Depth in meters; missing pixels read as 0.
pub fn read_pgm16(path: impl AsRef<Path>, scale: f64) -> Result<Grid> {
    decode_pgm16(&fs::read(path)?, scale)
}

/// Validity mask of a depth map read from disk: 1 where depth > 0.
pub fn mask_from_depth(depth: &Grid) -> Grid {
    depth.map(|d| if d > 0.0 { 1.0 } else { 0.0 })
}
