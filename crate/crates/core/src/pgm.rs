//! Binary PGM (`P5`) reading and writing.
//!
//! Depth frames are stored with maxval 65535, two bytes per sample, most
//! significant byte first. 8-bit files (maxval <= 255) are accepted on read
//! and produced for visualisations.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::depth::{CameraIntrinsics, DepthFrame, GrayImage8};
use crate::error::PgmError;

/// A decoded grayscale raster, samples widened to 16 bits.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PgmImage {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    pub samples: Vec<u16>,
}

struct HeaderCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl HeaderCursor<'_> {
    fn malformed(&self, reason: impl Into<String>) -> PgmError {
        PgmError::Malformed {
            offset: self.pos,
            reason: reason.into(),
        }
    }

    fn skip_whitespace_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b' ' | b'\t' | b'\n' | b'\r' | 0x0b | 0x0c => self.pos += 1,
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                _ => break,
            }
        }
    }

    fn read_uint(&mut self, what: &str) -> Result<u32, PgmError> {
        self.skip_whitespace_and_comments();
        let start = self.pos;
        let mut value: u32 = 0;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            value = value
                .checked_mul(10)
                .and_then(|v| v.checked_add((self.bytes[self.pos] - b'0') as u32))
                .ok_or_else(|| self.malformed(format!("{what} overflows")))?;
            self.pos += 1;
        }
        if self.pos == start {
            return Err(self.malformed(format!("expected {what}")));
        }
        Ok(value)
    }
}

pub fn decode(bytes: &[u8]) -> Result<PgmImage, PgmError> {
    let mut cur = HeaderCursor { bytes, pos: 0 };
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(cur.malformed("missing P5 magic"));
    }
    cur.pos = 2;
    let width = cur.read_uint("width")? as usize;
    let height = cur.read_uint("height")? as usize;
    let maxval = cur.read_uint("maxval")?;
    if width == 0 || height == 0 {
        return Err(cur.malformed("zero image dimension"));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(cur.malformed(format!("maxval {maxval} outside 1..=65535")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    match bytes.get(cur.pos) {
        Some(b) if b.is_ascii_whitespace() => cur.pos += 1,
        _ => return Err(cur.malformed("expected whitespace after maxval")),
    }
    let bytes_per_sample = if maxval > 255 { 2 } else { 1 };
    let expected = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(bytes_per_sample))
        .ok_or_else(|| cur.malformed("image dimensions overflow"))?;
    let raster = &bytes[cur.pos..];
    if raster.len() < expected {
        return Err(PgmError::Malformed {
            offset: bytes.len(),
            reason: format!("raster truncated: {} of {expected} bytes", raster.len()),
        });
    }
    let samples = if bytes_per_sample == 2 {
        raster[..expected]
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]))
            .collect()
    } else {
        raster[..expected].iter().map(|&b| b as u16).collect()
    };
    Ok(PgmImage {
        width,
        height,
        maxval: maxval as u16,
        samples,
    })
}

pub fn encode16(width: usize, height: usize, samples: &[u16]) -> Vec<u8> {
    let header = format!("P5\n{width} {height}\n65535\n");
    let mut out = Vec::with_capacity(header.len() + samples.len() * 2);
    out.extend_from_slice(header.as_bytes());
    for &s in samples {
        out.extend_from_slice(&s.to_be_bytes());
    }
    out
}

pub fn encode8(image: &GrayImage8) -> Vec<u8> {
    let header = format!("P5\n{} {}\n255\n", image.width, image.height);
    let mut out = Vec::with_capacity(header.len() + image.pixels.len());
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(&image.pixels);
    out
}

pub fn read_depth_frame(
    path: impl AsRef<Path>,
    intrinsics: CameraIntrinsics,
) -> Result<DepthFrame, PgmError> {
    let img = decode(&fs::read(path)?)?;
    DepthFrame::new(img.width, img.height, img.samples, intrinsics)
        .map_err(|e| PgmError::Unsupported(e.to_string()))
}

pub fn write_depth_frame(path: impl AsRef<Path>, frame: &DepthFrame) -> Result<(), PgmError> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode16(frame.width(), frame.height(), frame.pixels()))?;
    Ok(())
}

pub fn write_gray8(path: impl AsRef<Path>, image: &GrayImage8) -> Result<(), PgmError> {
    fs::write(path, encode8(image))?;
    Ok(())
}
