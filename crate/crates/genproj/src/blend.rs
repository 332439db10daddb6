//! Poisson blending (seamless cloning).
//!
//! Solves the discrete Poisson equation inside the blend region with the
//! target as Dirichlet boundary and the source gradients as guidance field,
//! per channel, using SOR Gauss–Seidel on the 5-point Laplacian. Outside the
//! region the output equals the target exactly.

use crate::buffer::{ImageBuffer, MaskBuffer};
use crate::error::{Error, Result};

pub const DEFAULT_TOL: f64 = 1e-5;
pub const DEFAULT_MAX_ITERS: usize = 10_000;
const SOR_OMEGA: f64 = 1.9;

/// Inputs of one blend: generated source, original target, and the region
/// to paste (built from mask foreground, eroded one pixel).
pub struct BlendRequest {
    pub source: ImageBuffer,
    pub target: ImageBuffer,
    /// Row-major region flags, true = solve here.
    pub region: Vec<bool>,
    pub height: usize,
    pub width: usize,
}

impl BlendRequest {
    /// Builds a request from a weight mask: the region is the mask
    /// foreground (weight >= 0.5) eroded by one pixel, which also keeps it
    /// strictly inside the image interior.
    pub fn from_mask(source: &ImageBuffer, target: &ImageBuffer, mask: &MaskBuffer) -> Result<Self> {
        let (h, w) = (target.height(), target.width());
        if source.height() != h || source.width() != w || mask.height() != h || mask.width() != w {
            return Err(Error::Shape {
                expected: format!("{h}x{w}"),
                got: format!(
                    "source {}x{}, mask {}x{}",
                    source.height(),
                    source.width(),
                    mask.height(),
                    mask.width()
                ),
            });
        }
        let fg: Vec<bool> = mask.data().iter().map(|&v| v >= 0.5).collect();
        let mut region = vec![false; h * w];
        let mut any = false;
        for y in 1..h.saturating_sub(1) {
            for x in 1..w.saturating_sub(1) {
                let i = y * w + x;
                if fg[i] && fg[i - 1] && fg[i + 1] && fg[i - w] && fg[i + w] {
                    region[i] = true;
                    any = true;
                }
            }
        }
        if !any {
            return Err(Error::EmptyMask);
        }
        Ok(Self { source: source.clone(), target: target.clone(), region, height: h, width: w })
    }
}

/// Result of a blend: the composited image plus solver diagnostics.
pub struct BlendOutput {
    pub image: ImageBuffer,
    pub iterations: usize,
    /// Max absolute residual of the 5-point stencil at the last iterate.
    pub residual: f64,
    pub converged: bool,
}

/// Solves Δu = div(∇source) in the region with u = target on the boundary.
/// On non-convergence the best iterate is returned with `converged: false`.
pub fn poisson_blend(req: &BlendRequest, tol: f64, max_iters: usize) -> Result<BlendOutput> {
    if tol <= 0.0 {
        return Err(Error::Config("tolerance must be positive".into()));
    }
    let (h, w) = (req.height, req.width);
    let interior: Vec<usize> =
        (0..h * w).filter(|&i| req.region[i]).collect();
    if interior.is_empty() {
        return Err(Error::EmptyMask);
    }

    let mut out = req.target.clamped();
    let src = &req.source;
    let mut iterations = 0;
    let mut residual = f64::INFINITY;

    for ch in 0..3 {
        // Guidance: b_p = 4*src_p - sum_q src_q (divergence of source gradient).
        let b: Vec<f64> = interior
            .iter()
            .map(|&i| {
                let (y, x) = (i / w, i % w);
                4.0 * src.get(y, x, ch) as f64
                    - src.get(y - 1, x, ch) as f64
                    - src.get(y + 1, x, ch) as f64
                    - src.get(y, x - 1, ch) as f64
                    - src.get(y, x + 1, ch) as f64
            })
            .collect();

        let mut u: Vec<f64> = out.data().iter().map(|&v| v as f64).collect();
        let at = |u: &Vec<f64>, y: usize, x: usize| u[(y * w + x) * 3 + ch];

        let mut ch_res = f64::INFINITY;
        let mut it = 0;
        while it < max_iters {
            it += 1;
            for (k, &i) in interior.iter().enumerate() {
                let (y, x) = (i / w, i % w);
                let neigh = at(&u, y - 1, x) + at(&u, y + 1, x) + at(&u, y, x - 1) + at(&u, y, x + 1);
                let gs = (neigh + b[k]) / 4.0;
                let cur = u[i * 3 + ch];
                u[i * 3 + ch] = cur + SOR_OMEGA * (gs - cur);
            }
            ch_res = 0.0f64;
            for (k, &i) in interior.iter().enumerate() {
                let (y, x) = (i / w, i % w);
                let neigh = at(&u, y - 1, x) + at(&u, y + 1, x) + at(&u, y, x - 1) + at(&u, y, x + 1);
                let r = (neigh + b[k] - 4.0 * u[i * 3 + ch]).abs();
                ch_res = ch_res.max(r);
            }
            if ch_res < tol {
                break;
            }
        }
        iterations = iterations.max(it);
        residual = if ch == 0 { ch_res } else { residual.max(ch_res) };
        for &i in &interior {
            out.data_mut()[i * 3 + ch] = u[i * 3 + ch] as f32;
        }
    }

    let converged = residual < tol;
    Ok(BlendOutput { image: out, iterations, residual, converged })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::buffer::{make_box_mask, BoxRegion};

    fn grad_image(h: usize, w: usize, k: f32) -> ImageBuffer {
        let mut data = Vec::with_capacity(h * w * 3);
        for y in 0..h {
            for x in 0..w {
                let v = (y as f32 / h as f32) * 0.5 + (x as f32 / w as f32) * 0.3;
                data.push((v * k).clamp(0.0, 1.0));
                data.push((0.8 - v) * k.min(1.0));
                data.push(0.5);
            }
        }
        ImageBuffer::from_data(h, w, data).unwrap()
    }

    fn request(src: &ImageBuffer, tgt: &ImageBuffer) -> BlendRequest {
        let m = make_box_mask(tgt.height(), tgt.width(), BoxRegion::new(2, 2, 8, 8), 1.0, 0.0).unwrap();
        BlendRequest::from_mask(src, tgt, &m).unwrap()
    }

    #[test]
    fn identical_source_and_target_is_a_fixpoint() {
        let img = grad_image(16, 16, 1.0);
        let req = request(&img, &img);
        let out = poisson_blend(&req, 1e-6, 10_000).unwrap();
        assert!(out.converged);
        assert!(out.image.max_abs_diff(&img) < 1e-6);
    }

    #[test]
    fn constant_offset_is_absorbed() {
        // source = target + k inside: matching gradients + boundary kill the offset.
        let tgt = grad_image(16, 16, 1.0);
        let mut src = tgt.clone();
        for v in src.data_mut() {
            *v += 0.2;
        }
        let req = request(&src, &tgt);
        let out = poisson_blend(&req, 1e-7, 20_000).unwrap();
        assert!(out.converged);
        assert!(out.image.max_abs_diff(&tgt) < 1e-3, "diff {}", out.image.max_abs_diff(&tgt));
    }

    #[test]
    fn residual_below_tolerance_and_outside_untouched() {
        let tgt = grad_image(16, 16, 1.0);
        let src = grad_image(16, 16, 0.6);
        let req = request(&src, &tgt);
        let tol = 1e-5;
        let out = poisson_blend(&req, tol, 10_000).unwrap();
        assert!(out.converged && out.residual < tol);
        let clamped = tgt.clamped();
        for i in 0..req.region.len() {
            if !req.region[i] {
                for c in 0..3 {
                    assert_eq!(out.image.data()[i * 3 + c], clamped.data()[i * 3 + c]);
                }
            }
        }
    }

    #[test]
    fn correction_obeys_discrete_maximum_principle() {
        let tgt = grad_image(20, 20, 1.0);
        let src = grad_image(20, 20, 0.5);
        let req = request(&src, &tgt);
        let out = poisson_blend(&req, 1e-7, 20_000).unwrap();
        // Correction field is harmonic inside, so extrema sit on the boundary ring.
        for ch in 0..3 {
            let corr = |i: usize| out.image.data()[i * 3 + ch] as f64 - req.source.data()[i * 3 + ch] as f64;
            let (mut int_min, mut int_max) = (f64::INFINITY, f64::NEG_INFINITY);
            let (mut bnd_min, mut bnd_max) = (f64::INFINITY, f64::NEG_INFINITY);
            let w = req.width;
            for i in 0..req.region.len() {
                if req.region[i] {
                    let all_in = req.region[i - 1]
                        && req.region[i + 1]
                        && req.region[i - w]
                        && req.region[i + w];
                    if all_in {
                        int_min = int_min.min(corr(i));
                        int_max = int_max.max(corr(i));
                    }
                } else {
                    // Boundary ring: non-region pixel adjacent to the region.
                    let (y, x) = (i / w, i % w);
                    let adj = (x > 0 && req.region[i - 1])
                        || (x + 1 < w && req.region[i + 1])
                        || (y > 0 && req.region[i - w])
                        || (y + 1 < req.height && req.region[i + w]);
                    if adj {
                        bnd_min = bnd_min.min(corr(i));
                        bnd_max = bnd_max.max(corr(i));
                    }
                }
            }
            if int_min.is_finite() && bnd_min.is_finite() {
                assert!(int_max <= bnd_max + 1e-4, "ch {ch}: {int_max} vs boundary {bnd_max}");
                assert!(int_min >= bnd_min - 1e-4, "ch {ch}: {int_min} vs boundary {bnd_min}");
            }
        }
    }

    #[test]
    fn interior_gradients_match_source() {
        // With constant boundary mismatch the harmonic correction is constant,
        // so interior gradients of the output equal the source gradients up
        // to solver accuracy.
        let tgt = grad_image(16, 16, 1.0);
        let mut src = tgt.clone();
        for v in src.data_mut() {
            *v += 0.13;
        }
        let req = request(&src, &tgt);
        let tol = 1e-6;
        let out = poisson_blend(&req, tol, 50_000).unwrap();
        assert!(out.converged);
        let w = req.width;
        let mut dev_sum = 0.0f64;
        let mut count = 0usize;
        for i in 0..req.region.len() {
            if req.region[i] && req.region[i + 1] {
                for ch in 0..3 {
                    let g_out = out.image.data()[(i + 1) * 3 + ch] as f64 - out.image.data()[i * 3 + ch] as f64;
                    let g_src = src.data()[(i + 1) * 3 + ch] as f64 - src.data()[i * 3 + ch] as f64;
                    dev_sum += (g_out - g_src).abs();
                    count += 1;
                }
            }
            if req.region[i] && i + w < req.region.len() && req.region[i + w] {
                for ch in 0..3 {
                    let g_out = out.image.data()[(i + w) * 3 + ch] as f64 - out.image.data()[i * 3 + ch] as f64;
                    let g_src = src.data()[(i + w) * 3 + ch] as f64 - src.data()[i * 3 + ch] as f64;
                    dev_sum += (g_out - g_src).abs();
                    count += 1;
                }
            }
        }
        let mean_dev = dev_sum / count as f64;
        assert!(mean_dev < 5.0 * tol, "mean gradient deviation {mean_dev}");
    }

    #[test]
    fn region_must_be_nonempty() {
        let img = grad_image(8, 8, 1.0);
        // Foreground hugging the border erodes away entirely.
        let m = make_box_mask(8, 8, BoxRegion::new(0, 0, 1, 8), 1.0, 0.0).unwrap();
        assert!(BlendRequest::from_mask(&img, &img, &m).is_err());
    }
}
