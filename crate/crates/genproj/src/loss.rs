//! Masked reconstruction losses.
//!
//! `masked_l1` is the mask-weighted per-pixel term, normalized by the mask
//! mass at full resolution. `masked_perceptual` evaluates a frozen random
//! three-level conv pyramid and compares channel-weighted features under the
//! mask bilinearly resized to each level, each level normalized by its own
//! resized mask mass. The combined `mask_loss` is `l1 + beta * perceptual`
//! with `beta = 10` by default. All reductions accumulate in f64.

use crate::buffer::{ImageBuffer, MaskBuffer};
use crate::error::{Error, Result};
use crate::rng::SeedRng;

pub const DEFAULT_BETA: f64 = 10.0;

/// Channel counts of the three pyramid levels.
const LEVEL_CHANNELS: [usize; 3] = [4, 8, 8];

/// One feature map: h×w×c, channel-interleaved. Feature values are kept
/// in f64 so finite-difference probes of the loss stay clean.
#[derive(Debug, Clone, PartialEq)]
pub struct Plane {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<f64>,
}

impl Plane {
    fn zeros(h: usize, w: usize, c: usize) -> Self {
        Self { h, w, c, data: vec![0.0; h * w * c] }
    }
}

/// Multi-scale features of one image, finest level first.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid {
    pub levels: Vec<Plane>,
}

struct ConvLayer {
    c_in: usize,
    c_out: usize,
    /// Flat [c_out][c_in][ky][kx], 3×3 kernels.
    weights: Vec<f32>,
}

impl ConvLayer {
    fn seeded(rng: &mut SeedRng, c_in: usize, c_out: usize) -> Self {
        let n = c_out * c_in * 9;
        let sigma = 1.0 / ((9 * c_in) as f64).sqrt();
        let weights = (0..n).map(|_| (rng.normal() * sigma) as f32).collect();
        Self { c_in, c_out, weights }
    }

    /// Same-size conv with zero padding.
    fn forward(&self, input: &Plane) -> Plane {
        assert_eq!(input.c, self.c_in);
        let (h, w) = (input.h, input.w);
        let mut out = Plane::zeros(h, w, self.c_out);
        for co in 0..self.c_out {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0f64;
                    for ky in 0..3usize {
                        let iy = y as isize + ky as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..3usize {
                            let ix = x as isize + kx as isize - 1;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let base = ((iy as usize * w) + ix as usize) * self.c_in;
                            let wbase = ((co * self.c_in) * 9) + ky * 3 + kx;
                            for ci in 0..self.c_in {
                                acc += self.weights[wbase + ci * 9] as f64 * input.data[base + ci];
                            }
                        }
                    }
                    out.data[(y * w + x) * self.c_out + co] = acc;
                }
            }
        }
        out
    }

    /// Adjoint w.r.t. the input: scatters upstream through the same taps.
    fn backward_input(&self, upstream: &Plane) -> Plane {
        assert_eq!(upstream.c, self.c_out);
        let (h, w) = (upstream.h, upstream.w);
        let mut grad = Plane::zeros(h, w, self.c_in);
        for co in 0..self.c_out {
            for y in 0..h {
                for x in 0..w {
                    let up = upstream.data[(y * w + x) * self.c_out + co];
                    if up == 0.0 {
                        continue;
                    }
                    for ky in 0..3usize {
                        let iy = y as isize + ky as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..3usize {
                            let ix = x as isize + kx as isize - 1;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let base = ((iy as usize * w) + ix as usize) * self.c_in;
                            let wbase = ((co * self.c_in) * 9) + ky * 3 + kx;
                            for ci in 0..self.c_in {
                                grad.data[base + ci] += self.weights[wbase + ci * 9] as f64 * up;
                            }
                        }
                    }
                }
            }
        }
        grad
    }
}

fn avg_pool2(input: &Plane) -> Plane {
    let (h, w, c) = (input.h / 2, input.w / 2, input.c);
    let mut out = Plane::zeros(h, w, c);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0f64;
                for dy in 0..2 {
                    for dx in 0..2 {
                        acc += input.data[((2 * y + dy) * input.w + 2 * x + dx) * c + ch];
                    }
                }
                out.data[(y * w + x) * c + ch] = acc * 0.25;
            }
        }
    }
    out
}

fn avg_pool2_backward(upstream: &Plane) -> Plane {
    let (h, w, c) = (upstream.h * 2, upstream.w * 2, upstream.c);
    let mut grad = Plane::zeros(h, w, c);
    for y in 0..upstream.h {
        for x in 0..upstream.w {
            for ch in 0..c {
                let g = upstream.data[(y * upstream.w + x) * c + ch] * 0.25;
                for dy in 0..2 {
                    for dx in 0..2 {
                        grad.data[((2 * y + dy) * w + 2 * x + dx) * c + ch] = g;
                    }
                }
            }
        }
    }
    grad
}

/// Bilinear mask resize (border clamp), pixel-center convention.
pub fn resize_bilinear(mask: &[f32], h: usize, w: usize, nh: usize, nw: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; nh * nw];
    let sy = h as f64 / nh as f64;
    let sx = w as f64 / nw as f64;
    for y in 0..nh {
        let fy = ((y as f64 + 0.5) * sy - 0.5).max(0.0).min(h as f64 - 1.0);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let wy = (fy - y0 as f64) as f32;
        for x in 0..nw {
            let fx = ((x as f64 + 0.5) * sx - 0.5).max(0.0).min(w as f64 - 1.0);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let wx = (fx - x0 as f64) as f32;
            let v = mask[y0 * w + x0] * (1.0 - wy) * (1.0 - wx)
                + mask[y0 * w + x1] * (1.0 - wy) * wx
                + mask[y1 * w + x0] * wy * (1.0 - wx)
                + mask[y1 * w + x1] * wy * wx;
            out[y * nw + x] = v;
        }
    }
    out
}

/// Frozen random multi-scale feature extractor standing in for a pretrained
/// perceptual backbone. Linear 3×3 convs, stride-2 average pooling between
/// levels, per-level channel weights of 1/sqrt(C_l).
pub struct FeatureExtractor {
    pub seed: u64,
    convs: Vec<ConvLayer>,
    /// Per-level channel weights, nonnegative, unit ℓ2 norm per level.
    pub channel_weights: Vec<Vec<f32>>,
}

impl FeatureExtractor {
    pub fn new_seeded(seed: u64) -> Self {
        let mut rng = SeedRng::new(seed).substream(0xFEA7);
        let convs = vec![
            ConvLayer::seeded(&mut rng, 3, LEVEL_CHANNELS[0]),
            ConvLayer::seeded(&mut rng, LEVEL_CHANNELS[0], LEVEL_CHANNELS[1]),
            ConvLayer::seeded(&mut rng, LEVEL_CHANNELS[1], LEVEL_CHANNELS[2]),
        ];
        let channel_weights = LEVEL_CHANNELS
            .iter()
            .map(|&c| vec![1.0 / (c as f32).sqrt(); c])
            .collect();
        Self { seed, convs, channel_weights }
    }

    pub fn weights_flat(&self) -> Vec<f32> {
        self.convs.iter().flat_map(|c| c.weights.iter().copied()).collect()
    }

    pub fn weights_len() -> usize {
        let c = LEVEL_CHANNELS;
        (3 * c[0] + c[0] * c[1] + c[1] * c[2]) * 9
    }

    /// Rebuilds an extractor from serialized conv weights.
    pub fn from_flat(seed: u64, flat: &[f32]) -> Result<Self> {
        if flat.len() != Self::weights_len() {
            return Err(Error::Shape {
                expected: format!("{} feature weights", Self::weights_len()),
                got: format!("{}", flat.len()),
            });
        }
        if flat.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature weights".into()));
        }
        let mut base = Self::new_seeded(seed);
        let mut off = 0;
        for conv in &mut base.convs {
            let n = conv.weights.len();
            conv.weights.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(base)
    }

    fn image_plane(img: &ImageBuffer) -> Plane {
        Plane {
            h: img.height(),
            w: img.width(),
            c: 3,
            data: img.data().iter().map(|&v| v as f64).collect(),
        }
    }

    /// Three-level pyramid of the input image.
    pub fn extract(&self, img: &ImageBuffer) -> FeaturePyramid {
        let f0 = self.convs[0].forward(&Self::image_plane(img));
        let p0 = avg_pool2(&f0);
        let f1 = self.convs[1].forward(&p0);
        let p1 = avg_pool2(&f1);
        let f2 = self.convs[2].forward(&p1);
        FeaturePyramid { levels: vec![f0, f1, f2] }
    }

    /// Backpropagates per-level feature gradients to an image gradient.
    fn backward_to_image(&self, level_grads: [Plane; 3]) -> Plane {
        let [g0, g1, g2] = level_grads;
        let d_p1 = self.convs[2].backward_input(&g2);
        let mut d_f1 = avg_pool2_backward(&d_p1);
        for (a, b) in d_f1.data.iter_mut().zip(&g1.data) {
            *a += b;
        }
        let d_p0 = self.convs[1].backward_input(&d_f1);
        let mut d_f0 = avg_pool2_backward(&d_p0);
        for (a, b) in d_f0.data.iter_mut().zip(&g0.data) {
            *a += b;
        }
        self.convs[0].backward_input(&d_f0)
    }
}

/// Loss decomposition: `total = l1_term + beta * perceptual_term`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub l1_term: f64,
    pub perceptual_term: f64,
    pub beta: f64,
}

/// Precomputed state for evaluating the masked loss against a fixed target:
/// target features, per-level resized masks and their masses.
pub struct LossContext {
    pub target: ImageBuffer,
    pub mask: MaskBuffer,
    pub beta: f64,
    mask_mass: f64,
    target_pyr: FeaturePyramid,
    level_masks: Vec<Vec<f32>>,
    level_masses: Vec<f64>,
}

impl LossContext {
    pub fn new(
        features: &FeatureExtractor,
        target: &ImageBuffer,
        mask: &MaskBuffer,
        beta: f64,
    ) -> Result<Self> {
        if mask.height() != target.height() || mask.width() != target.width() {
            return Err(Error::Shape {
                expected: format!("mask {}x{}", target.height(), target.width()),
                got: format!("{}x{}", mask.height(), mask.width()),
            });
        }
        let mask_mass = mask.mass();
        if mask_mass <= 0.0 {
            return Err(Error::EmptyMask);
        }
        let target_pyr = features.extract(target);
        let mut level_masks = Vec::new();
        let mut level_masses = Vec::new();
        for (l, plane) in target_pyr.levels.iter().enumerate() {
            let ml = resize_bilinear(mask.data(), mask.height(), mask.width(), plane.h, plane.w);
            let mass: f64 = ml.iter().map(|&v| v as f64).sum();
            if mass <= 0.0 {
                return Err(Error::DegenerateMask(l));
            }
            level_masks.push(ml);
            level_masses.push(mass);
        }
        Ok(Self {
            target: target.clone(),
            mask: mask.clone(),
            beta,
            mask_mass,
            target_pyr,
            level_masks,
            level_masses,
        })
    }

    fn check_shape(&self, img: &ImageBuffer) -> Result<()> {
        if img.height() != self.target.height() || img.width() != self.target.width() {
            return Err(Error::Shape {
                expected: format!("{}x{}", self.target.height(), self.target.width()),
                got: format!("{}x{}", img.height(), img.width()),
            });
        }
        Ok(())
    }

    fn l1_term(&self, generated: &ImageBuffer) -> f64 {
        let mdata = self.mask.data();
        let mut acc = 0.0f64;
        for (px, (gen, tgt)) in generated
            .data()
            .chunks_exact(3)
            .zip(self.target.data().chunks_exact(3))
            .enumerate()
        {
            let w = mdata[px] as f64;
            if w == 0.0 {
                continue;
            }
            let mut s = 0.0f64;
            for c in 0..3 {
                s += (gen[c] as f64 - tgt[c] as f64).abs();
            }
            acc += w * s;
        }
        acc / self.mask_mass
    }

    fn perceptual_terms(
        &self,
        features: &FeatureExtractor,
        gen_pyr: &FeaturePyramid,
    ) -> f64 {
        let mut total = 0.0f64;
        for (l, gen_plane) in gen_pyr.levels.iter().enumerate() {
            let tgt_plane = &self.target_pyr.levels[l];
            let ml = &self.level_masks[l];
            let wl = &features.channel_weights[l];
            let mut acc = 0.0f64;
            for pos in 0..gen_plane.h * gen_plane.w {
                let w = ml[pos] as f64;
                if w == 0.0 {
                    continue;
                }
                let base = pos * gen_plane.c;
                let mut s = 0.0f64;
                for c in 0..gen_plane.c {
                    let d = wl[c] as f64 * (tgt_plane.data[base + c] - gen_plane.data[base + c]);
                    s += d * d;
                }
                acc += w * s;
            }
            total += acc / self.level_masses[l];
        }
        total
    }

    /// Masked loss of a generated image against the held target.
    pub fn loss(&self, features: &FeatureExtractor, generated: &ImageBuffer) -> Result<LossReport> {
        self.check_shape(generated)?;
        let l1 = self.l1_term(generated);
        let pyr = features.extract(generated);
        let perc = self.perceptual_terms(features, &pyr);
        Ok(LossReport { total: l1 + self.beta * perc, l1_term: l1, perceptual_term: perc, beta: self.beta })
    }

    /// Loss and its gradient w.r.t. the generated image.
    pub fn loss_and_grad(
        &self,
        features: &FeatureExtractor,
        generated: &ImageBuffer,
    ) -> Result<(LossReport, Vec<f32>)> {
        self.check_shape(generated)?;
        let l1 = self.l1_term(generated);
        let gen_pyr = features.extract(generated);
        let perc = self.perceptual_terms(features, &gen_pyr);

        // d(perceptual)/d(feature) per level.
        let mut level_grads: Vec<Plane> = Vec::with_capacity(3);
        for (l, gen_plane) in gen_pyr.levels.iter().enumerate() {
            let tgt_plane = &self.target_pyr.levels[l];
            let ml = &self.level_masks[l];
            let wl = &features.channel_weights[l];
            let inv_mass = 1.0 / self.level_masses[l];
            let mut g = Plane::zeros(gen_plane.h, gen_plane.w, gen_plane.c);
            for pos in 0..gen_plane.h * gen_plane.w {
                let w = ml[pos] as f64;
                if w == 0.0 {
                    continue;
                }
                let base = pos * gen_plane.c;
                for c in 0..gen_plane.c {
                    let wc = wl[c] as f64;
                    let diff = gen_plane.data[base + c] - tgt_plane.data[base + c];
                    g.data[base + c] = 2.0 * w * inv_mass * wc * wc * diff;
                }
            }
            level_grads.push(g);
        }
        let img_grad = features.backward_to_image([
            level_grads.remove(0),
            level_grads.remove(0),
            level_grads.remove(0),
        ]);

        // Combine with the l1 gradient.
        let mdata = self.mask.data();
        let inv_mass = 1.0 / self.mask_mass;
        let mut grad = vec![0.0f32; generated.data().len()];
        for px in 0..mdata.len() {
            let w = mdata[px] as f64 * inv_mass;
            for c in 0..3 {
                let i = px * 3 + c;
                let diff = generated.data()[i] - self.target.data()[i];
                let sign = if diff > 0.0 {
                    1.0
                } else if diff < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                grad[i] = (w * sign + self.beta * img_grad.data[i]) as f32;
            }
        }
        let report =
            LossReport { total: l1 + self.beta * perc, l1_term: l1, perceptual_term: perc, beta: self.beta };
        Ok((report, grad))
    }
}

/// Mask-weighted mean absolute error, channels summed, normalized by mask mass.
pub fn masked_l1(generated: &ImageBuffer, target: &ImageBuffer, mask: &MaskBuffer) -> Result<f64> {
    if generated.height() != target.height()
        || generated.width() != target.width()
        || mask.height() != target.height()
        || mask.width() != target.width()
    {
        return Err(Error::Shape {
            expected: format!("{}x{}", target.height(), target.width()),
            got: format!("{}x{}", generated.height(), generated.width()),
        });
    }
    let mass = mask.mass();
    if mass <= 0.0 {
        return Err(Error::EmptyMask);
    }
    let mut acc = 0.0f64;
    for (px, (gen, tgt)) in generated
        .data()
        .chunks_exact(3)
        .zip(target.data().chunks_exact(3))
        .enumerate()
    {
        let w = mask.data()[px] as f64;
        for c in 0..3 {
            acc += w * (gen[c] as f64 - tgt[c] as f64).abs();
        }
    }
    Ok(acc / mass)
}

/// Deterministic fixed-weight pyramid features of an image.
pub fn surrogate_features(features: &FeatureExtractor, img: &ImageBuffer) -> FeaturePyramid {
    features.extract(img)
}

/// Mask-weighted multi-scale perceptual distance.
pub fn masked_perceptual(
    features: &FeatureExtractor,
    generated: &ImageBuffer,
    target: &ImageBuffer,
    mask: &MaskBuffer,
) -> Result<f64> {
    let ctx = LossContext::new(features, target, mask, 0.0)?;
    ctx.check_shape(generated)?;
    let pyr = features.extract(generated);
    Ok(ctx.perceptual_terms(features, &pyr))
}

/// Combined masked loss (Eq. l1 + beta * perceptual).
pub fn mask_loss(
    features: &FeatureExtractor,
    generated: &ImageBuffer,
    target: &ImageBuffer,
    mask: &MaskBuffer,
    beta: f64,
) -> Result<LossReport> {
    LossContext::new(features, target, mask, beta)?.loss(features, generated)
}

/// Gradient of [`mask_loss`] with respect to the generated image.
pub fn mask_loss_backward(
    features: &FeatureExtractor,
    generated: &ImageBuffer,
    target: &ImageBuffer,
    mask: &MaskBuffer,
    beta: f64,
) -> Result<(LossReport, Vec<f32>)> {
    LossContext::new(features, target, mask, beta)?.loss_and_grad(features, generated)
}
