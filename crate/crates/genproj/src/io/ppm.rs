//! Binary PPM (P6) reader/writer, maxval 255.
//!
//! The parser reports the byte offset of the first offending byte. Standard
//! `#` comments and arbitrary whitespace are accepted in the header.

use crate::buffer::ImageBuffer;
use crate::error::{Error, Result};

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Parse { offset: self.pos, msg: msg.into() }
    }

    fn peek(&self) -> Option<u8> {
        self.bytes.get(self.pos).copied()
    }

    /// Skips whitespace and `#` comments (comment runs to end of line).
    fn skip_space(&mut self) {
        while let Some(b) = self.peek() {
            if b.is_ascii_whitespace() {
                self.pos += 1;
            } else if b == b'#' {
                while let Some(b) = self.peek() {
                    self.pos += 1;
                    if b == b'\n' {
                        break;
                    }
                }
            } else {
                break;
            }
        }
    }

    fn read_uint(&mut self, what: &str) -> Result<usize> {
        self.skip_space();
        let start = self.pos;
        let mut value: usize = 0;
        while let Some(b) = self.peek() {
            if b.is_ascii_digit() {
                value = value
                    .checked_mul(10)
                    .and_then(|v| v.checked_add((b - b'0') as usize))
                    .ok_or_else(|| self.err(format!("{what} overflows")))?;
                self.pos += 1;
            } else {
                break;
            }
        }
        if self.pos == start {
            return Err(self.err(format!("expected {what}")));
        }
        Ok(value)
    }
}

pub fn decode(bytes: &[u8]) -> Result<ImageBuffer> {
    let mut cur = Cursor { bytes, pos: 0 };
    if bytes.len() < 2 || &bytes[0..2] != b"P6" {
        return Err(cur.err("not a P6 ppm (missing magic)"));
    }
    cur.pos = 2;
    let width = cur.read_uint("width")?;
    let height = cur.read_uint("height")?;
    if width == 0 || height == 0 {
        return Err(cur.err("zero image dimension"));
    }
    if width.saturating_mul(height) > 1 << 26 {
        return Err(cur.err("image too large"));
    }
    let maxval = cur.read_uint("maxval")?;
    if maxval != 255 {
        return Err(cur.err(format!("unsupported maxval {maxval}, only 255")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    match cur.peek() {
        Some(b) if b.is_ascii_whitespace() => cur.pos += 1,
        _ => return Err(cur.err("expected single whitespace before raster")),
    }
    let need = width * height * 3;
    let raster = &bytes[cur.pos.min(bytes.len())..];
    if raster.len() < need {
        cur.pos = bytes.len();
        return Err(cur.err(format!(
            "raster truncated: need {need} bytes, have {}",
            raster.len()
        )));
    }
    let data = raster[..need].iter().map(|&b| b as f32 / 255.0).collect();
    ImageBuffer::from_data(height, width, data)
}

pub fn encode(img: &ImageBuffer) -> Vec<u8> {
    let img = img.clamped();
    let mut out = format!("P6\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend(img.data().iter().map(|&v| (v * 255.0).round() as u8));
    out
}

pub fn read_path(path: &std::path::Path) -> Result<ImageBuffer> {
    decode(&std::fs::read(path)?)
}

pub fn write_path(img: &ImageBuffer, path: &std::path::Path) -> Result<()> {
    std::fs::write(path, encode(img))?;
    Ok(())
}
