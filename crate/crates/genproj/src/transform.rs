//! Invertible spatial (scale + translate) and color (brightness) transforms.
//!
//! A spatial transform is applied through a bilinear grid sampler in
//! normalized coordinates: output pixel at u in [-1,1] reads the source at
//! `s*u + t`, so scale factors above 1 shrink content and positive
//! translations move content toward negative coordinates. The inverse
//! parameters are `[1/sx, 1/sy, -tx/sx, -ty/sy]`; brightness is additive
//! with inverse `-gamma`. The full transform composes spatial after color.

use crate::buffer::{ImageBuffer, MaskBuffer};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

pub const MIN_SCALE: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Padding {
    /// Replicate the border pixel (used for images).
    Border,
    /// Out-of-range taps contribute zero (used for masks).
    Zero,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpatialParams {
    pub sx: f64,
    pub sy: f64,
    pub tx: f64,
    pub ty: f64,
}

impl SpatialParams {
    /// Scales are floored at MIN_SCALE so the sampling grid stays defined.
    pub fn new(sx: f64, sy: f64, tx: f64, ty: f64) -> Self {
        Self { sx: sx.max(MIN_SCALE), sy: sy.max(MIN_SCALE), tx, ty }
    }

    pub fn identity() -> Self {
        Self { sx: 1.0, sy: 1.0, tx: 0.0, ty: 0.0 }
    }

    /// Pure translation moving content by (dy, dx) pixels on an h×w grid.
    pub fn shift_px(dy: f64, dx: f64, h: usize, w: usize) -> Self {
        // Content moves by -t under the sampling convention, so negate.
        Self::new(1.0, 1.0, -2.0 * dx / w as f64, -2.0 * dy / h as f64)
    }

    /// Where a source content point (normalized coords) lands in the output
    /// when an image is resampled with these parameters.
    pub fn content_map(&self, ynorm: f64, xnorm: f64) -> (f64, f64) {
        ((ynorm - self.ty) / self.sy, (xnorm - self.tx) / self.sx)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ColorParams {
    /// Additive brightness offset in pixel units.
    pub gamma: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransformParams {
    pub spatial: SpatialParams,
    pub color: ColorParams,
}

impl TransformParams {
    pub fn identity() -> Self {
        Self { spatial: SpatialParams::identity(), color: ColorParams { gamma: 0.0 } }
    }

    pub fn new(sx: f64, sy: f64, tx: f64, ty: f64, gamma: f64) -> Self {
        Self { spatial: SpatialParams::new(sx, sy, tx, ty), color: ColorParams { gamma } }
    }

    /// Flat [sx, sy, tx, ty, gamma] for the gradient-free search.
    pub fn to_vector(&self) -> [f64; 5] {
        [self.spatial.sx, self.spatial.sy, self.spatial.tx, self.spatial.ty, self.color.gamma]
    }

    pub fn from_vector(v: &[f64]) -> Self {
        Self::new(v[0], v[1], v[2], v[3], v[4])
    }
}

/// Inverse parameters: `[1/sx, 1/sy, -tx/sx, -ty/sy]` and `-gamma`.
pub fn invert_params(phi: &TransformParams) -> Result<TransformParams> {
    let s = phi.spatial;
    if s.sx <= MIN_SCALE || s.sy <= MIN_SCALE {
        return Err(Error::InvalidScale(s.sx.min(s.sy)));
    }
    Ok(TransformParams {
        spatial: SpatialParams { sx: 1.0 / s.sx, sy: 1.0 / s.sy, tx: -s.tx / s.sx, ty: -s.ty / s.sy },
        color: ColorParams { gamma: -phi.color.gamma },
    })
}

/// Source pixel coordinate for output pixel `i` of `n`, one axis.
/// Normalized coordinates per pixel center: u(i) = (2i+1)/n - 1.
#[inline]
fn source_coord(i: usize, n: usize, scale: f64, shift: f64) -> f64 {
    // ((s*u + t + 1)*n - 1) / 2 expanded to keep identity exact.
    (scale * (2.0 * i as f64 + 1.0 - n as f64) + (shift + 1.0) * n as f64 - 1.0) * 0.5
}

fn sample_plane(
    src: &[f32],
    h: usize,
    w: usize,
    channels: usize,
    psi: &SpatialParams,
    padding: Padding,
    dst: &mut [f32],
) {
    for oy in 0..h {
        let fy = source_coord(oy, h, psi.sy, psi.ty);
        let y0 = fy.floor();
        let wy = fy - y0;
        let y0 = y0 as isize;
        for ox in 0..w {
            let fx = source_coord(ox, w, psi.sx, psi.tx);
            let x0f = fx.floor();
            let wx = fx - x0f;
            let x0 = x0f as isize;
            let taps = [
                (y0, x0, (1.0 - wy) * (1.0 - wx)),
                (y0, x0 + 1, (1.0 - wy) * wx),
                (y0 + 1, x0, wy * (1.0 - wx)),
                (y0 + 1, x0 + 1, wy * wx),
            ];
            for ch in 0..channels {
                let mut acc = 0.0f64;
                for &(ty, tx, tw) in &taps {
                    if tw == 0.0 {
                        continue;
                    }
                    let v = match padding {
                        Padding::Border => {
                            let cy = ty.clamp(0, h as isize - 1) as usize;
                            let cx = tx.clamp(0, w as isize - 1) as usize;
                            src[(cy * w + cx) * channels + ch] as f64
                        }
                        Padding::Zero => {
                            if ty < 0 || tx < 0 || ty >= h as isize || tx >= w as isize {
                                0.0
                            } else {
                                src[(ty as usize * w + tx as usize) * channels + ch] as f64
                            }
                        }
                    };
                    acc += tw * v;
                }
                dst[(oy * w + ox) * channels + ch] = acc as f32;
            }
        }
    }
}

/// Bilinear resample of an image under a spatial transform. Output size
/// equals input size.
pub fn grid_sample(img: &ImageBuffer, psi: &SpatialParams, padding: Padding) -> ImageBuffer {
    let (h, w) = (img.height(), img.width());
    let mut out = vec![0.0f32; h * w * 3];
    sample_plane(img.data(), h, w, 3, psi, padding, &mut out);
    ImageBuffer::from_data(h, w, out).expect("resampled image is finite")
}

/// Mask variant of [`grid_sample`]; values re-clamped to [0,1].
pub fn grid_sample_mask(mask: &MaskBuffer, psi: &SpatialParams, padding: Padding) -> MaskBuffer {
    let (h, w) = (mask.height(), mask.width());
    let mut out = vec![0.0f32; h * w];
    sample_plane(mask.data(), h, w, 1, psi, padding, &mut out);
    for v in &mut out {
        *v = v.clamp(0.0, 1.0);
    }
    MaskBuffer::from_weights(h, w, out).expect("resampled mask is finite")
}

/// Adjoint of [`grid_sample`] with respect to the source image: scatters
/// `upstream` through the bilinear taps. Exists for tests and ablations; the
/// projection pipeline never differentiates through the sampler.
pub fn grid_sample_backward(
    img: &ImageBuffer,
    psi: &SpatialParams,
    upstream: &ImageBuffer,
    padding: Padding,
) -> Result<ImageBuffer> {
    let (h, w) = (img.height(), img.width());
    if upstream.height() != h || upstream.width() != w {
        return Err(Error::Shape {
            expected: format!("{h}x{w}"),
            got: format!("{}x{}", upstream.height(), upstream.width()),
        });
    }
    let mut grad = vec![0.0f64; h * w * 3];
    for oy in 0..h {
        let fy = source_coord(oy, h, psi.sy, psi.ty);
        let y0f = fy.floor();
        let wy = fy - y0f;
        let y0 = y0f as isize;
        for ox in 0..w {
            let fx = source_coord(ox, w, psi.sx, psi.tx);
            let x0f = fx.floor();
            let wx = fx - x0f;
            let x0 = x0f as isize;
            let taps = [
                (y0, x0, (1.0 - wy) * (1.0 - wx)),
                (y0, x0 + 1, (1.0 - wy) * wx),
                (y0 + 1, x0, wy * (1.0 - wx)),
                (y0 + 1, x0 + 1, wy * wx),
            ];
            for ch in 0..3 {
                let up = upstream.get(oy, ox, ch) as f64;
                if up == 0.0 {
                    continue;
                }
                for &(ty, tx, tw) in &taps {
                    if tw == 0.0 {
                        continue;
                    }
                    match padding {
                        Padding::Border => {
                            let cy = ty.clamp(0, h as isize - 1) as usize;
                            let cx = tx.clamp(0, w as isize - 1) as usize;
                            grad[(cy * w + cx) * 3 + ch] += tw * up;
                        }
                        Padding::Zero => {
                            if ty >= 0 && tx >= 0 && ty < h as isize && tx < w as isize {
                                grad[(ty as usize * w + tx as usize) * 3 + ch] += tw * up;
                            }
                        }
                    }
                }
            }
        }
    }
    ImageBuffer::from_data(h, w, grad.into_iter().map(|v| v as f32).collect())
}

/// Additive brightness; no clamping inside the optimization loop.
pub fn apply_color(img: &ImageBuffer, gamma: f64) -> ImageBuffer {
    let data = img.data().iter().map(|&v| (v as f64 + gamma) as f32).collect();
    ImageBuffer::from_data(img.height(), img.width(), data).expect("brightness keeps values finite")
}

/// Transforms a target and its mask for the gradient-phase loss:
/// color then spatial on the image (border padding), spatial only on the
/// mask (zero padding).
pub fn transform_target(
    y: &ImageBuffer,
    m: &MaskBuffer,
    phi: &TransformParams,
) -> (ImageBuffer, MaskBuffer) {
    let colored = apply_color(y, phi.color.gamma);
    let y_t = grid_sample(&colored, &phi.spatial, Padding::Border);
    let m_t = grid_sample_mask(m, &phi.spatial, Padding::Zero);
    (y_t, m_t)
}

/// Maps a generated image back into the original frame: inverse spatial then
/// inverse color.
pub fn untransform_generated(img: &ImageBuffer, phi: &TransformParams) -> Result<ImageBuffer> {
    let inv = invert_params(phi)?;
    let spatial = grid_sample(img, &inv.spatial, Padding::Border);
    Ok(apply_color(&spatial, inv.color.gamma))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::buffer::{make_box_mask, BoxRegion};

    fn smooth_image(h: usize, w: usize) -> ImageBuffer {
        let mut data = Vec::with_capacity(h * w * 3);
        for y in 0..h {
            for x in 0..w {
                let fy = y as f32 / h as f32;
                let fx = x as f32 / w as f32;
                data.push(0.5 + 0.4 * (2.0 * std::f32::consts::PI * fy).sin() * 0.5);
                data.push(0.5 + 0.4 * (2.0 * std::f32::consts::PI * fx).cos() * 0.5);
                data.push(0.25 + 0.5 * fy * fx);
            }
        }
        ImageBuffer::from_data(h, w, data).unwrap()
    }

    #[test]
    fn invert_identity_is_identity() {
        let id = TransformParams::identity();
        assert_eq!(invert_params(&id).unwrap(), id);
    }

    #[test]
    fn invert_formula_example() {
        let phi = TransformParams::new(2.0, 2.0, 0.5, 0.5, 0.0);
        let inv = invert_params(&phi).unwrap();
        assert_eq!(inv.spatial, SpatialParams { sx: 0.5, sy: 0.5, tx: -0.25, ty: -0.25 });
    }

    #[test]
    fn invert_is_involution() {
        let phi = TransformParams::new(1.25, 0.8, 0.1, -0.3, 0.2);
        let twice = invert_params(&invert_params(&phi).unwrap()).unwrap();
        assert!((twice.spatial.sx - phi.spatial.sx).abs() < 1e-12);
        assert!((twice.spatial.sy - phi.spatial.sy).abs() < 1e-12);
        assert!((twice.spatial.tx - phi.spatial.tx).abs() < 1e-12);
        assert!((twice.spatial.ty - phi.spatial.ty).abs() < 1e-12);
        assert_eq!(twice.color.gamma, phi.color.gamma);
    }

    #[test]
    fn tiny_scale_not_invertible() {
        let phi = TransformParams::new(1e-4, 1.0, 0.0, 0.0, 0.0);
        assert!(matches!(invert_params(&phi), Err(Error::InvalidScale(_))));
    }

    #[test]
    fn identity_sample_is_exact() {
        let img = smooth_image(7, 5); // non power of two on purpose
        let out = grid_sample(&img, &SpatialParams::identity(), Padding::Border);
        assert_eq!(out, img);
    }

    #[test]
    fn integer_shift_is_exact_in_interior() {
        let img = smooth_image(32, 32);
        let psi = SpatialParams::shift_px(0.0, 1.0, 32, 32); // content moves 1 px right
        let out = grid_sample(&img, &psi, Padding::Border);
        for y in 0..32 {
            for x in 1..32 {
                for c in 0..3 {
                    assert_eq!(out.get(y, x, c), img.get(y, x - 1, c), "at ({y},{x},{c})");
                }
            }
        }
    }

    #[test]
    fn round_trip_error_bounded_on_interior() {
        let img = smooth_image(32, 32);
        for &s in &[0.8, 0.9, 1.1, 1.25] {
            let psi = SpatialParams::new(s, s, 0.05, -0.04);
            let fwd = grid_sample(&img, &psi, Padding::Border);
            let inv = invert_params(&TransformParams { spatial: psi, color: ColorParams { gamma: 0.0 } })
                .unwrap();
            let back = grid_sample(&fwd, &inv.spatial, Padding::Border);
            let mut max_err = 0.0f32;
            for y in 8..24 {
                for x in 8..24 {
                    for c in 0..3 {
                        max_err = max_err.max((back.get(y, x, c) - img.get(y, x, c)).abs());
                    }
                }
            }
            assert!(max_err <= 0.02, "scale {s}: interior error {max_err}");
        }
    }

    #[test]
    fn backward_identity_passes_upstream_through() {
        let img = smooth_image(8, 8);
        let up = smooth_image(8, 8);
        let g = grid_sample_backward(&img, &SpatialParams::identity(), &up, Padding::Border).unwrap();
        assert_eq!(g, up);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = crate::rng::SeedRng::new(11);
        let (h, w) = (8, 8);
        for trial in 0..10 {
            let psi = SpatialParams::new(
                0.7 + 0.6 * (trial as f64 / 10.0),
                1.2 - 0.5 * (trial as f64 / 10.0),
                0.2 * rng.normal(),
                0.2 * rng.normal(),
            );
            let img = smooth_image(h, w);
            let up = smooth_image(h, w);
            // Scalar objective: sum(up * grid_sample(img)).
            let objective = |im: &ImageBuffer| -> f64 {
                let s = grid_sample(im, &psi, Padding::Zero);
                s.data().iter().zip(up.data()).map(|(&a, &b)| a as f64 * b as f64).sum()
            };
            let grad = grid_sample_backward(&img, &psi, &up, Padding::Zero).unwrap();
            for k in 0..12 {
                let idx = (k * 37 + trial * 11) % (h * w * 3);
                // The objective is exactly linear in the image, so a large
                // step gives an exact secant and drowns f32 rounding noise.
                let hstep = 0.5f32;
                let mut plus = img.clone();
                plus.data_mut()[idx] += hstep;
                let mut minus = img.clone();
                minus.data_mut()[idx] -= hstep;
                let fd = (objective(&plus) - objective(&minus)) / (2.0 * hstep as f64);
                let an = grad.data()[idx] as f64;
                let denom = an.abs().max(fd.abs()).max(1e-6);
                assert!(
                    ((an - fd) / denom).abs() < 1e-3,
                    "trial {trial} idx {idx}: analytic {an} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn backward_mass_bounded_under_zero_padding() {
        let img = smooth_image(8, 8);
        let up = ImageBuffer::constant(8, 8, 1.0).unwrap();
        let psi = SpatialParams::new(1.3, 0.9, 0.4, -0.2);
        let g = grid_sample_backward(&img, &psi, &up, Padding::Zero).unwrap();
        let grad_mass: f64 = g.data().iter().map(|&v| v as f64).sum();
        let up_mass: f64 = up.data().iter().map(|&v| v as f64).sum();
        assert!(grad_mass <= up_mass + 1e-6);
    }

    #[test]
    fn apply_color_examples() {
        let img = ImageBuffer::constant(4, 4, 0.5).unwrap();
        assert_eq!(apply_color(&img, 0.0), img);
        let brighter = apply_color(&img, 0.25);
        assert!(brighter.data().iter().all(|&v| (v - 0.75).abs() < 1e-7));
        let back = apply_color(&apply_color(&img, 0.37), -0.37);
        assert!(back.max_abs_diff(&img) < 1e-7);
    }

    #[test]
    fn transform_target_identity_is_noop() {
        let img = smooth_image(16, 16);
        let m = make_box_mask(16, 16, BoxRegion::new(4, 4, 8, 8), 1.0, 0.3).unwrap();
        let (yt, mt) = transform_target(&img, &m, &TransformParams::identity());
        assert_eq!(yt, img);
        assert_eq!(mt.data(), m.data());
    }

    #[test]
    fn shrink_halves_mask_support_area() {
        // scale factor 2 in sampling space shrinks content to half size.
        let m = MaskBuffer::from_data(32, 32, vec![1.0; 32 * 32]).unwrap();
        let psi = SpatialParams::new(2.0, 2.0, 0.0, 0.0);
        let out = grid_sample_mask(&m, &psi, Padding::Zero);
        let support = out.data().iter().filter(|&&v| v > 0.5).count();
        let expected = 32.0 * 32.0 / 4.0;
        let tol = 0.02 * 32.0 * 32.0;
        assert!(
            (support as f64 - expected).abs() <= tol,
            "support {support} vs expected {expected}"
        );
    }

    #[test]
    fn brightness_never_touches_mask() {
        let img = smooth_image(16, 16);
        let m = make_box_mask(16, 16, BoxRegion::new(4, 4, 8, 8), 1.0, 0.3).unwrap();
        let phi = TransformParams::new(1.0, 1.0, 0.0, 0.0, 0.5);
        let (_, mt) = transform_target(&img, &m, &phi);
        assert_eq!(mt.data(), m.data());
    }

    #[test]
    fn untransform_inverts_transform_on_interior() {
        let img = smooth_image(32, 32);
        let phi = TransformParams::new(1.1, 0.95, 0.08, -0.06, 0.2);
        let m = make_box_mask(32, 32, BoxRegion::new(8, 8, 16, 16), 1.0, 0.3).unwrap();
        let (yt, _) = transform_target(&img, &m, &phi);
        let back = untransform_generated(&yt, &phi).unwrap();
        let mut max_err = 0.0f32;
        for y in 8..24 {
            for x in 8..24 {
                for c in 0..3 {
                    max_err = max_err.max((back.get(y, x, c) - img.get(y, x, c)).abs());
                }
            }
        }
        assert!(max_err < 0.03, "round trip interior error {max_err}");
    }
}
