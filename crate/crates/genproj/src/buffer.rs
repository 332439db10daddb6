//! Image and mask buffers.
//!
//! Images are H×W×3 row-major `f32` in `[0,1]`; masks are H×W×1 weights in
//! `[0,1]`. Values are clamped to range only at I/O boundaries — intermediate
//! buffers produced inside the optimization loop may exceed `[0,1]`.

use crate::error::{Error, Result};

/// Axis-aligned pixel rectangle: top-left corner plus size.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxRegion {
    pub y0: usize,
    pub x0: usize,
    pub h: usize,
    pub w: usize,
}

impl BoxRegion {
    pub fn new(y0: usize, x0: usize, h: usize, w: usize) -> Self {
        Self { y0, x0, h, w }
    }

    /// Box center in pixel coordinates (continuous; a 2×2 box at origin has center 1.0).
    pub fn center(&self) -> (f64, f64) {
        (
            self.y0 as f64 + self.h as f64 / 2.0,
            self.x0 as f64 + self.w as f64 / 2.0,
        )
    }
}

/// H×W×3 float image, row-major, channel-interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ImageBuffer {
    pub const CHANNELS: usize = 3;

    /// Builds an image from raw data. Rejects wrong lengths and non-finite values.
    pub fn from_data(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * Self::CHANNELS {
            return Err(Error::Shape {
                expected: format!("{}*{}*3 = {}", height, width, height * width * 3),
                got: format!("{}", data.len()),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("image data".into()));
        }
        Ok(Self { height, width, data })
    }

    pub fn constant(height: usize, width: usize, value: f32) -> Result<Self> {
        Self::from_data(height, width, vec![value; height * width * Self::CHANNELS])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn idx(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.width + x) * Self::CHANNELS + c
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[self.idx(y, x, c)]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        let i = self.idx(y, x, c);
        self.data[i] = v;
    }

    /// Per-pixel luminance (plain channel mean), as f64.
    pub fn luminance(&self) -> Vec<f64> {
        self.data
            .chunks_exact(3)
            .map(|px| (px[0] as f64 + px[1] as f64 + px[2] as f64) / 3.0)
            .collect()
    }

    /// Copy with every value clamped to [0,1]; used at I/O boundaries.
    pub fn clamped(&self) -> Self {
        let data = self.data.iter().map(|v| v.clamp(0.0, 1.0)).collect();
        Self { height: self.height, width: self.width, data }
    }

    /// Maximum absolute per-element difference.
    pub fn max_abs_diff(&self, other: &Self) -> f32 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }
}

/// H×W weight mask, row-major, values in [0,1].
#[derive(Debug, Clone, PartialEq)]
pub struct MaskBuffer {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl MaskBuffer {
    /// Builds a mask from raw weights. Rejects out-of-range or non-finite
    /// values and masks with no foreground (no entry equal to 1.0).
    pub fn from_data(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape {
                expected: format!("{}*{} = {}", height, width, height * width),
                got: format!("{}", data.len()),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("mask data".into()));
        }
        if data.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::Numerical("mask values must lie in [0,1]".into()));
        }
        if !data.iter().any(|&v| v == 1.0) {
            return Err(Error::EmptyMask);
        }
        Ok(Self { height, width, data })
    }

    /// Relaxed constructor for derived masks (e.g. resampled ones): clamps
    /// weights to [0,1] and does not require an exact-1.0 foreground pixel.
    /// Downstream loss construction still rejects zero-mass masks.
    pub fn from_weights(height: usize, width: usize, mut data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape {
                expected: format!("{}*{} = {}", height, width, height * width),
                got: format!("{}", data.len()),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("mask data".into()));
        }
        for v in &mut data {
            *v = v.clamp(0.0, 1.0);
        }
        Ok(Self { height, width, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.width + x]
    }

    /// Total mask mass, accumulated in f64.
    pub fn mass(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    /// Bounding box of foreground pixels (weight >= 0.5). None when empty.
    pub fn foreground_box(&self) -> Option<BoxRegion> {
        let (mut y_min, mut y_max, mut x_min, mut x_max) = (usize::MAX, 0usize, usize::MAX, 0usize);
        let mut any = false;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(y, x) >= 0.5 {
                    any = true;
                    y_min = y_min.min(y);
                    y_max = y_max.max(y);
                    x_min = x_min.min(x);
                    x_max = x_max.max(x);
                }
            }
        }
        any.then(|| BoxRegion::new(y_min, x_min, y_max - y_min + 1, x_max - x_min + 1))
    }
}

/// Rectangular box mask: `fg` inside the box, `bg` outside.
pub fn make_box_mask(h: usize, w: usize, bbox: BoxRegion, fg: f32, bg: f32) -> Result<MaskBuffer> {
    if bbox.y0 + bbox.h > h || bbox.x0 + bbox.w > w || bbox.h == 0 || bbox.w == 0 {
        return Err(Error::OutOfBounds(format!(
            "box {:?} does not fit inside {}x{}",
            bbox, h, w
        )));
    }
    if !(0.0 <= bg && bg <= fg && fg <= 1.0) {
        return Err(Error::Numerical(format!(
            "need 0 <= bg <= fg <= 1, got fg={fg} bg={bg}"
        )));
    }
    let mut data = vec![bg; h * w];
    for y in bbox.y0..bbox.y0 + bbox.h {
        for x in bbox.x0..bbox.x0 + bbox.w {
            data[y * w + x] = fg;
        }
    }
    MaskBuffer::from_data(h, w, data)
}
