//! 8-bit PNG image and mask I/O.

use crate::buffer::{ImageBuffer, MaskBuffer};
use crate::error::{Error, Result};
use std::io::BufWriter;
use std::path::Path;

fn decode_err(e: png::DecodingError) -> Error {
    Error::Parse { offset: 0, msg: format!("png: {e}") }
}

/// Decodes an 8-bit RGB/RGBA/grayscale PNG into an image buffer.
pub fn decode(bytes: &[u8]) -> Result<ImageBuffer> {
    let decoder = png::Decoder::new(std::io::Cursor::new(bytes));
    let mut reader = decoder.read_info().map_err(decode_err)?;
    let mut buf = vec![0u8; reader.output_buffer_size().unwrap_or(0)];
    let info = reader.next_frame(&mut buf).map_err(decode_err)?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Parse { offset: 0, msg: "png: only 8-bit supported".into() });
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let px = &buf[..info.buffer_size()];
    let to_f = |b: u8| b as f32 / 255.0;
    let data: Vec<f32> = match info.color_type {
        png::ColorType::Rgb => px.iter().map(|&b| to_f(b)).collect(),
        png::ColorType::Rgba => px
            .chunks_exact(4)
            .flat_map(|p| [to_f(p[0]), to_f(p[1]), to_f(p[2])])
            .collect(),
        png::ColorType::Grayscale => px.iter().flat_map(|&b| [to_f(b); 3]).collect(),
        other => {
            return Err(Error::Parse { offset: 0, msg: format!("png: unsupported color type {other:?}") })
        }
    };
    ImageBuffer::from_data(h, w, data)
}

pub fn read_path(path: &Path) -> Result<ImageBuffer> {
    decode(&std::fs::read(path)?)
}

/// Writes an image as 8-bit RGB PNG, clamping to [0,1].
pub fn write_path(img: &ImageBuffer, path: &Path) -> Result<()> {
    let img = img.clamped();
    let file = std::fs::File::create(path)?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), img.width() as u32, img.height() as u32);
    encoder.set_color(png::ColorType::Rgb);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder
        .write_header()
        .map_err(|e| Error::Numerical(format!("png encode: {e}")))?;
    let bytes: Vec<u8> = img.data().iter().map(|&v| (v * 255.0).round() as u8).collect();
    writer
        .write_image_data(&bytes)
        .map_err(|e| Error::Numerical(format!("png encode: {e}")))?;
    Ok(())
}

/// Writes a mask as 8-bit grayscale PNG.
pub fn write_mask_path(mask: &MaskBuffer, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut encoder =
        png::Encoder::new(BufWriter::new(file), mask.width() as u32, mask.height() as u32);
    encoder.set_color(png::ColorType::Grayscale);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder
        .write_header()
        .map_err(|e| Error::Numerical(format!("png encode: {e}")))?;
    let bytes: Vec<u8> = mask
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    writer
        .write_image_data(&bytes)
        .map_err(|e| Error::Numerical(format!("png encode: {e}")))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_within_quantization() {
        let mut img = ImageBuffer::constant(6, 4, 0.25).unwrap();
        img.set(2, 1, 0, 0.9);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.png");
        write_path(&img, &p).unwrap();
        let back = read_path(&p).unwrap();
        assert!(back.max_abs_diff(&img) <= 1.0 / 255.0 + 1e-6);
    }

    #[test]
    fn garbage_is_a_parse_error() {
        assert!(matches!(decode(b"not a png"), Err(Error::Parse { .. })));
    }
}
