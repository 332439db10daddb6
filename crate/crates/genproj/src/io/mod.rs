//! File I/O: PPM and PNG images, CSV reports, model files.

pub mod csv;
pub mod model;
pub mod pngio;
pub mod ppm;

use crate::buffer::{ImageBuffer, MaskBuffer};
use crate::error::{Error, Result};
use std::path::Path;

/// Reads an image by extension: `.ppm` or `.png`.
pub fn read_image(path: &Path) -> Result<ImageBuffer> {
    match extension(path)?.as_str() {
        "ppm" => ppm::read_path(path),
        "png" => pngio::read_path(path),
        other => Err(Error::Config(format!("unsupported image extension .{other}"))),
    }
}

/// Writes an image by extension: `.ppm` or `.png`. Values clamp to [0,1].
pub fn write_image(img: &ImageBuffer, path: &Path) -> Result<()> {
    match extension(path)?.as_str() {
        "ppm" => ppm::write_path(img, path),
        "png" => pngio::write_path(img, path),
        other => Err(Error::Config(format!("unsupported image extension .{other}"))),
    }
}

/// Loads a mask from an image file: luminance of the pixels, in [0,1].
pub fn read_mask(path: &Path) -> Result<MaskBuffer> {
    let img = read_image(path)?;
    let weights: Vec<f32> = img.luminance().iter().map(|&v| v as f32).collect();
    MaskBuffer::from_weights(img.height(), img.width(), weights)
}

fn extension(path: &Path) -> Result<String> {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
        .ok_or_else(|| Error::Config(format!("path {} has no extension", path.display())))
}
