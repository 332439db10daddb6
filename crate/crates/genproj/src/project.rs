//! The two-stage projection pipeline.
//!
//! Stage 1 searches transform parameters with a CMA outer loop whose
//! candidates are scored after a short ADAM refinement of fresh latents.
//! Stage 2 (BasinCMA) runs the same alternation over the latent vector with
//! the transform frozen, finishing with a long gradient run. Gradient steps
//! always use the transformed-target loss variant; CMA ranking and all
//! reported losses use the original frame, i.e. the generated image mapped
//! back through the inverse transform. Simpler single-method baselines
//! (plain multi-seed ADAM, pure CMA, CMA then ADAM) share the machinery so
//! they can be benchmarked against each other at matched budgets.

use crate::adam::{AdamState, LearningRates};
use crate::buffer::{BoxRegion, ImageBuffer, MaskBuffer};
use crate::cma::CmaState;
use crate::error::{Error, Result};
use crate::generator::{clamp_latent_slice, GeneratorModel, LatentState};
use crate::loss::{FeatureExtractor, LossContext, LossReport, DEFAULT_BETA};
use crate::rng::{stream_id, SeedRng};
use crate::transform::{transform_target, untransform_generated, TransformParams};
use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Instant;

/// Statistics of generated objects: mean center and modal size, in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelStats {
    pub center_y: f64,
    pub center_x: f64,
    pub mode_h: f64,
    pub mode_w: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionConfig {
    pub population: usize,
    pub beta: f64,
    pub n_transform_iters: usize,
    pub m_inner_grad: usize,
    pub p_latent_iters: usize,
    pub q_inner_grad: usize,
    pub final_grad_steps: usize,
    pub adam_only_steps: usize,
    pub cma_only_iters: usize,
    pub cma_adam_cma_iters: usize,
    pub cma_adam_adam_steps: usize,
    pub warm_restart_variance: f64,
    pub lrs: LearningRates,
    pub finetune_lambda: f64,
    pub finetune_max_steps: usize,
    pub finetune_stop_loss: f64,
    pub stats_samples: usize,
    /// Precomputed generator statistics; computed on demand when absent.
    pub stats: Option<ModelStats>,
    /// Fixed class index; enumerated from the target when absent.
    pub class_index: Option<usize>,
}

impl Default for ProjectionConfig {
    fn default() -> Self {
        Self {
            population: 18,
            beta: DEFAULT_BETA,
            n_transform_iters: 30,
            m_inner_grad: 30,
            p_latent_iters: 30,
            q_inner_grad: 30,
            final_grad_steps: 300,
            adam_only_steps: 500,
            cma_only_iters: 300,
            cma_adam_cma_iters: 100,
            cma_adam_adam_steps: 500,
            warm_restart_variance: 0.5,
            lrs: LearningRates::default(),
            finetune_lambda: 1e3,
            finetune_max_steps: 2000,
            finetune_stop_loss: 0.1,
            stats_samples: 200,
            stats: None,
            class_index: None,
        }
    }
}

impl ProjectionConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            self.population,
            self.n_transform_iters,
            self.m_inner_grad,
            self.p_latent_iters,
            self.q_inner_grad,
            self.final_grad_steps,
            self.adam_only_steps,
            self.cma_only_iters,
            self.cma_adam_cma_iters,
            self.cma_adam_adam_steps,
            self.finetune_max_steps,
        ];
        if counts.iter().any(|&c| c == 0) {
            return Err(Error::Config("all iteration counts must be at least 1".into()));
        }
        if self.population < 2 {
            return Err(Error::Config("population must be at least 2".into()));
        }
        if self.warm_restart_variance <= 0.0 || self.beta < 0.0 {
            return Err(Error::Config("variance must be positive, beta nonnegative".into()));
        }
        Ok(())
    }
}

/// Core optimizer of a variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BaseVariant {
    Adam,
    Cma,
    CmaAdam,
    BasinCma,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VariantSpec {
    pub base: BaseVariant,
    pub with_transform: bool,
}

impl VariantSpec {
    pub fn parse(token: &str) -> Result<Self> {
        let (base_str, with_transform) = match token.strip_suffix("+transform") {
            Some(b) => (b, true),
            None => (token, false),
        };
        let base = match base_str {
            "adam" => BaseVariant::Adam,
            "cma" => BaseVariant::Cma,
            "cma_adam" => BaseVariant::CmaAdam,
            "basincma" => BaseVariant::BasinCma,
            other => return Err(Error::Config(format!("unknown variant {other:?}"))),
        };
        Ok(Self { base, with_transform })
    }

    pub fn token(&self) -> String {
        let base = match self.base {
            BaseVariant::Adam => "adam",
            BaseVariant::Cma => "cma",
            BaseVariant::CmaAdam => "cma_adam",
            BaseVariant::BasinCma => "basincma",
        };
        if self.with_transform {
            format!("{base}+transform")
        } else {
            base.to_string()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub stage: String,
    pub generation: usize,
    pub step: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CandidateTrace {
    pub rows: Vec<TraceRow>,
}

/// Generator forward-call accounting, split by purpose.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct BudgetReport {
    pub total: u64,
    pub class_init: u64,
    pub stats: u64,
    pub stage1: u64,
    pub search: u64,
    pub final_eval: u64,
}

/// Wall-clock per stage, milliseconds. Excluded from result equality.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct StageTimings {
    pub stats_ms: u128,
    pub stage1_ms: u128,
    pub search_ms: u128,
    pub total_ms: u128,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProjectionResult {
    pub variant: String,
    pub z: Vec<f32>,
    pub c: Vec<f32>,
    pub phi: TransformParams,
    pub class_index: Option<usize>,
    /// Loss of the stored solution, evaluated in the original frame.
    pub final_report: LossReport,
    pub traces: Vec<CandidateTrace>,
    pub budget: BudgetReport,
    pub timings: StageTimings,
}

impl PartialEq for ProjectionResult {
    fn eq(&self, other: &Self) -> bool {
        // Timings are measurement noise, everything else is semantic.
        self.variant == other.variant
            && self.z == other.z
            && self.c == other.c
            && self.phi == other.phi
            && self.class_index == other.class_index
            && self.final_report == other.final_report
            && self.traces == other.traces
            && self.budget == other.budget
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FinetuneReport {
    pub steps: usize,
    pub final_recon: f64,
    pub theta_distance: f64,
    pub warned: bool,
    pub trace: Vec<f64>,
}

/// Object-box detector: luminance deviation from a background level,
/// thresholded at a quarter of the peak deviation.
pub fn detect_box_against_background(img: &ImageBuffer, background: f64) -> Option<BoxRegion> {
    let lum = img.luminance();
    let (h, w) = (img.height(), img.width());
    let mut max_dev = 0.0f64;
    for &l in &lum {
        max_dev = max_dev.max((l - background) * (l - background));
    }
    if max_dev < 1e-4 {
        return None;
    }
    let tau = 0.25 * max_dev;
    let (mut y0, mut y1, mut x0, mut x1) = (usize::MAX, 0usize, usize::MAX, 0usize);
    let mut any = false;
    for y in 0..h {
        for x in 0..w {
            let d = lum[y * w + x] - background;
            if d * d >= tau {
                any = true;
                y0 = y0.min(y);
                y1 = y1.max(y);
                x0 = x0.min(x);
                x1 = x1.max(x);
            }
        }
    }
    any.then(|| BoxRegion::new(y0, x0, y1 - y0 + 1, x1 - x0 + 1))
}

/// Median border luminance of one image: a background estimate.
pub fn border_luminance(img: &ImageBuffer) -> f64 {
    let lum = img.luminance();
    let (h, w) = (img.height(), img.width());
    let mut border = Vec::with_capacity(2 * h + 2 * w);
    for x in 0..w {
        border.push(lum[x]);
        border.push(lum[(h - 1) * w + x]);
    }
    for y in 1..h.saturating_sub(1) {
        border.push(lum[y * w]);
        border.push(lum[y * w + w - 1]);
    }
    border.sort_by(|a, b| a.partial_cmp(b).unwrap());
    border[border.len() / 2]
}

/// Extracts object statistics from a set of generated images. The
/// background level is the median border luminance across the whole set.
pub fn compute_stats_from_images(images: &[ImageBuffer]) -> Result<ModelStats> {
    if images.is_empty() {
        return Err(Error::Numerical("no images for statistics".into()));
    }
    let mut borders: Vec<f64> = Vec::new();
    for img in images {
        let lum = img.luminance();
        let (h, w) = (img.height(), img.width());
        for x in 0..w {
            borders.push(lum[x]);
            borders.push(lum[(h - 1) * w + x]);
        }
        for y in 1..h.saturating_sub(1) {
            borders.push(lum[y * w]);
            borders.push(lum[y * w + w - 1]);
        }
    }
    borders.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let background = borders[borders.len() / 2];

    let mut centers_y = Vec::new();
    let mut centers_x = Vec::new();
    let mut heights = Vec::new();
    let mut widths = Vec::new();
    for img in images {
        if let Some(b) = detect_box_against_background(img, background) {
            let (cy, cx) = b.center();
            centers_y.push(cy);
            centers_x.push(cx);
            heights.push(b.h);
            widths.push(b.w);
        }
    }
    if centers_y.len() * 10 < images.len() {
        return Err(Error::Numerical(format!(
            "degenerate detections: only {}/{} images produced a box",
            centers_y.len(),
            images.len()
        )));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let mode = |v: &[usize]| -> f64 {
        let max = *v.iter().max().unwrap();
        let mut hist = vec![0usize; max + 1];
        for &x in v {
            hist[x] += 1;
        }
        let mut best = 0usize;
        for (i, &count) in hist.iter().enumerate() {
            if count > hist[best] {
                best = i;
            }
        }
        best as f64
    };
    let (h, w) = (images[0].height() as f64, images[0].width() as f64);
    let stats = ModelStats {
        center_y: mean(&centers_y).clamp(0.0, h),
        center_x: mean(&centers_x).clamp(0.0, w),
        mode_h: mode(&heights).clamp(1.0, h),
        mode_w: mode(&widths).clamp(1.0, w),
    };
    Ok(stats)
}

/// Samples the generator and measures object statistics.
pub fn compute_model_stats(
    model: &GeneratorModel,
    rng: &SeedRng,
    n_samples: usize,
) -> Result<ModelStats> {
    if n_samples < 100 {
        return Err(Error::Config("stats need at least 100 samples".into()));
    }
    let images = sample_model_images(model, rng, n_samples)?;
    compute_stats_from_images(&images)
}

fn sample_model_images(
    model: &GeneratorModel,
    rng: &SeedRng,
    n_samples: usize,
) -> Result<Vec<ImageBuffer>> {
    let mut images = Vec::with_capacity(n_samples);
    for i in 0..n_samples {
        let mut sub = rng.substream(stream_id(PHASE_STATS, 0, i as u32));
        let z: Vec<f32> = sub.normal_vec(model.arch.z_dim).iter().map(|&v| v as f32).collect();
        let class = sub.index(model.arch.class_count);
        let c = model.embed_class(class)?;
        images.push(model.forward(&LatentState::new(z, c))?);
    }
    Ok(images)
}

/// Transform initialization from mask geometry and model statistics:
/// scale = max(h_m/h̄, w_m/w̄) on both axes, translation = half the center
/// offset in pixels converted to normalized units, brightness = additive
/// identity.
pub fn init_transform(mask: &MaskBuffer, stats: &ModelStats) -> Result<TransformParams> {
    let bbox = mask.foreground_box().ok_or(Error::EmptyMask)?;
    let (y_m, x_m) = bbox.center();
    let s = (bbox.h as f64 / stats.mode_h).max(bbox.w as f64 / stats.mode_w);
    let t_y_px = (stats.center_y - y_m) / 2.0;
    let t_x_px = (stats.center_x - x_m) / 2.0;
    let half_h = mask.height() as f64 / 2.0;
    let half_w = mask.width() as f64 / 2.0;
    Ok(TransformParams::new(s, s, t_x_px / half_w, t_y_px / half_h, 0.0))
}

/// Latent warm restart: draws around the mean of the previous generation's
/// final latents with a scaled identity covariance, then clamps.
pub fn warm_restart_latents(
    prev: &[Vec<f32>],
    variance: f64,
    rng: &SeedRng,
    generation: u32,
) -> Vec<Vec<f32>> {
    let n = prev.len();
    let dim = prev[0].len();
    let mut mean = vec![0.0f64; dim];
    for z in prev {
        for (m, &v) in mean.iter_mut().zip(z) {
            *m += v as f64 / n as f64;
        }
    }
    let sd = variance.sqrt();
    (0..n)
        .map(|slot| {
            let mut sub = rng.substream(stream_id(PHASE_STAGE1_Z, generation, slot as u32));
            let mut z: Vec<f32> =
                mean.iter().map(|&m| (m + sd * sub.normal()) as f32).collect();
            clamp_latent_slice(&mut z);
            z
        })
        .collect()
}

fn initial_latents(n: usize, dim: usize, rng: &SeedRng, phase: u8, generation: u32) -> Vec<Vec<f32>> {
    (0..n)
        .map(|slot| {
            let mut sub = rng.substream(stream_id(phase, generation, slot as u32));
            let mut z: Vec<f32> = sub.normal_vec(dim).iter().map(|&v| v as f32).collect();
            clamp_latent_slice(&mut z);
            z
        })
        .collect()
}

// Stream phase tags.
const PHASE_STAGE1_CMA: u8 = 1;
const PHASE_STAGE1_Z: u8 = 2;
const PHASE_STAGE2_CMA: u8 = 3;
const PHASE_ADAM_INIT: u8 = 4;
const PHASE_CMA_ONLY: u8 = 5;
const PHASE_STATS: u8 = 7;

/// Drives projections of one target against one model.
pub struct Projector<'a> {
    pub model: &'a GeneratorModel,
    pub features: &'a FeatureExtractor,
    pub cfg: ProjectionConfig,
    counter: AtomicU64,
}

struct CandidateOutcome {
    z: Vec<f32>,
    c: Vec<f32>,
    loss: f64,
    rows: Vec<TraceRow>,
}

impl<'a> Projector<'a> {
    pub fn new(model: &'a GeneratorModel, features: &'a FeatureExtractor, cfg: ProjectionConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { model, features, cfg, counter: AtomicU64::new(0) })
    }

    pub fn forward_calls(&self) -> u64 {
        self.counter.load(Ordering::Relaxed)
    }

    fn forward_counted(
        &self,
        state: &LatentState,
    ) -> Result<(ImageBuffer, crate::generator::ForwardCache)> {
        self.counter.fetch_add(1, Ordering::Relaxed);
        self.model.forward_cached(state)
    }

    /// Inner gradient refinement of one candidate against a fixed context
    /// (the transformed-target loss). Appends one trace row per step.
    fn refine(
        &self,
        ctx: &LossContext,
        z: &mut Vec<f32>,
        c: &mut Vec<f32>,
        steps: usize,
        stage: &str,
        generation: usize,
        rows: &mut Vec<TraceRow>,
    ) -> Result<()> {
        let mut adam_z = AdamState::new(z.len(), self.cfg.lrs.z);
        let mut adam_c = AdamState::new(c.len(), self.cfg.lrs.c);
        for step in 0..steps {
            let state = LatentState::new(z.clone(), c.clone());
            let (img, cache) = self.forward_counted(&state)?;
            let (report, dimg) = ctx.loss_and_grad(self.features, &img)?;
            let bundle = self.model.backward(&cache, &dimg, false)?;
            adam_z.step(z, &bundle.d_z)?;
            clamp_latent_slice(z);
            adam_c.step(c, &bundle.d_c)?;
            rows.push(TraceRow { stage: stage.into(), generation, step, loss: report.total });
        }
        Ok(())
    }

    /// Loss of (z, c) in the original frame: generate, map back through the
    /// inverse transform, compare against the untransformed target.
    fn rank_loss(
        &self,
        ctx_orig: &LossContext,
        z: &[f32],
        c: &[f32],
        phi: &TransformParams,
    ) -> Result<LossReport> {
        let state = LatentState::new(z.to_vec(), c.to_vec());
        let (img, _) = self.forward_counted(&state)?;
        let back = untransform_generated(&img, phi)?;
        ctx_orig.loss(self.features, &back)
    }

    /// Picks the initial class embedding: a fixed index when configured,
    /// otherwise the class whose generator output at z = 0 scores the best
    /// plain (all-ones mask) loss against the target.
    fn init_class(&self, target: &ImageBuffer) -> Result<(Option<usize>, Vec<f32>, u64)> {
        if let Some(k) = self.cfg.class_index {
            return Ok((Some(k), self.model.embed_class(k)?, 0));
        }
        let ones = MaskBuffer::from_data(
            target.height(),
            target.width(),
            vec![1.0; target.height() * target.width()],
        )?;
        let ctx = LossContext::new(self.features, target, &ones, self.cfg.beta)?;
        let z0 = vec![0.0f32; self.model.arch.z_dim];
        let mut best = (0usize, f64::INFINITY);
        let mut calls = 0u64;
        for k in 0..self.model.arch.class_count {
            let c = self.model.embed_class(k)?;
            let (img, _) = self.forward_counted(&LatentState::new(z0.clone(), c))?;
            calls += 1;
            let loss = ctx.loss(self.features, &img)?.total;
            if loss < best.1 {
                best = (k, loss);
            }
        }
        Ok((Some(best.0), self.model.embed_class(best.0)?, calls))
    }

    /// Stage 1: CMA search over transform parameters. Every candidate
    /// transform is scored by the original-frame loss after a short ADAM
    /// refinement of fresh (warm-restarted) latents.
    pub fn stage1_search_transform(
        &self,
        target: &ImageBuffer,
        mask: &MaskBuffer,
        c0: &[f32],
        stats: &ModelStats,
        rng: &SeedRng,
        traces: &mut Vec<CandidateTrace>,
    ) -> Result<TransformParams> {
        let cfg = &self.cfg;
        let n_pop = cfg.population;
        let ctx_orig = LossContext::new(self.features, target, mask, cfg.beta)?;
        let phi0 = init_transform(mask, stats)?;
        let mut cma = CmaState::init_isotropic(5, &phi0.to_vector(), 0.1, n_pop)?;

        let mut prev_z: Option<Vec<Vec<f32>>> = None;
        for g in 0..cfg.n_transform_iters {
            let mut sample_rng = rng.substream(stream_id(PHASE_STAGE1_CMA, g as u32, 0));
            let phi_samples = cma.sample(&mut sample_rng);
            let inits = match &prev_z {
                None => initial_latents(n_pop, self.model.arch.z_dim, rng, PHASE_STAGE1_Z, g as u32),
                Some(prev) => warm_restart_latents(prev, cfg.warm_restart_variance, rng, g as u32),
            };

            let outcomes: Vec<CandidateOutcome> = phi_samples
                .par_iter()
                .zip(inits.into_par_iter())
                .map(|(phi_vec, mut z)| {
                    let mut c = c0.to_vec();
                    let mut rows = Vec::new();
                    let phi = TransformParams::from_vector(phi_vec.as_slice());
                    let loss = (|| -> Result<f64> {
                        let (yt, mt) = transform_target(target, mask, &phi);
                        let ctx = LossContext::new(self.features, &yt, &mt, cfg.beta)?;
                        self.refine(&ctx, &mut z, &mut c, cfg.m_inner_grad, "transform", g, &mut rows)?;
                        Ok(self.rank_loss(&ctx_orig, &z, &c, &phi)?.total)
                    })()
                    .unwrap_or(f64::INFINITY);
                    CandidateOutcome { z, c, loss, rows }
                })
                .collect();

            let losses: Vec<f64> = outcomes.iter().map(|o| o.loss).collect();
            cma.update(&phi_samples, &losses)?;
            for (slot, o) in outcomes.iter().enumerate() {
                traces[slot].rows.extend(o.rows.iter().cloned());
            }
            prev_z = Some(outcomes.into_iter().map(|o| o.z).collect());
        }
        Ok(TransformParams::from_vector(cma.mean.as_slice()))
    }

    /// Stage 2 (BasinCMA): CMA over z whose candidate losses are measured
    /// after `q` ADAM steps; the refined latents are fed back into the
    /// update. A final long gradient run polishes samples from the
    /// converged distribution and the best candidate wins.
    pub fn stage2_basincma(
        &self,
        target: &ImageBuffer,
        mask: &MaskBuffer,
        phi: &TransformParams,
        c0: &[f32],
        rng: &SeedRng,
        traces: &mut Vec<CandidateTrace>,
    ) -> Result<(Vec<f32>, Vec<f32>)> {
        let cfg = &self.cfg;
        let n_pop = cfg.population;
        let z_dim = self.model.arch.z_dim;
        let ctx_orig = LossContext::new(self.features, target, mask, cfg.beta)?;
        let (yt, mt) = transform_target(target, mask, phi);
        let ctx_grad = LossContext::new(self.features, &yt, &mt, cfg.beta)?;

        let mut cma = CmaState::init_isotropic(z_dim, &vec![0.0; z_dim], 1.0, n_pop)?;
        for g in 0..cfg.p_latent_iters {
            let mut sample_rng = rng.substream(stream_id(PHASE_STAGE2_CMA, g as u32, 0));
            let samples = cma.sample(&mut sample_rng);
            let outcomes: Vec<CandidateOutcome> = samples
                .par_iter()
                .map(|zvec| {
                    let mut z: Vec<f32> = zvec.iter().map(|&v| v as f32).collect();
                    clamp_latent_slice(&mut z);
                    let mut c = c0.to_vec();
                    let mut rows = Vec::new();
                    let loss = (|| -> Result<f64> {
                        self.refine(&ctx_grad, &mut z, &mut c, cfg.q_inner_grad, "latent", g, &mut rows)?;
                        Ok(self.rank_loss(&ctx_orig, &z, &c, phi)?.total)
                    })()
                    .unwrap_or(f64::INFINITY);
                    CandidateOutcome { z, c, loss, rows }
                })
                .collect();

            // BasinCMA feeds the post-refinement latents and their losses
            // back into the distribution update.
            let refined: Vec<DVector<f64>> = outcomes
                .iter()
                .map(|o| DVector::from_iterator(z_dim, o.z.iter().map(|&v| v as f64)))
                .collect();
            let losses: Vec<f64> = outcomes.iter().map(|o| o.loss).collect();
            cma.update(&refined, &losses)?;
            for (slot, o) in outcomes.iter().enumerate() {
                traces[slot].rows.extend(o.rows.iter().cloned());
            }
        }

        // Final long refinement on fresh samples from the converged search
        // distribution.
        let mut final_rng = rng.substream(stream_id(PHASE_STAGE2_CMA, cfg.p_latent_iters as u32, 1));
        let samples = cma.sample(&mut final_rng);
        let outcomes: Vec<CandidateOutcome> = samples
            .par_iter()
            .map(|zvec| {
                let mut z: Vec<f32> = zvec.iter().map(|&v| v as f32).collect();
                clamp_latent_slice(&mut z);
                let mut c = c0.to_vec();
                let mut rows = Vec::new();
                let loss = (|| -> Result<f64> {
                    self.refine(
                        &ctx_grad,
                        &mut z,
                        &mut c,
                        cfg.final_grad_steps,
                        "final",
                        cfg.p_latent_iters,
                        &mut rows,
                    )?;
                    Ok(self.rank_loss(&ctx_orig, &z, &c, phi)?.total)
                })()
                .unwrap_or(f64::INFINITY);
                CandidateOutcome { z, c, loss, rows }
            })
            .collect();
        for (slot, o) in outcomes.iter().enumerate() {
            traces[slot].rows.extend(o.rows.iter().cloned());
        }
        best_outcome(outcomes)
    }

    fn adam_only(
        &self,
        target: &ImageBuffer,
        mask: &MaskBuffer,
        phi: &TransformParams,
        c0: &[f32],
        rng: &SeedRng,
        steps: usize,
        traces: &mut Vec<CandidateTrace>,
    ) -> Result<(Vec<f32>, Vec<f32>)> {
        let cfg = &self.cfg;
        let ctx_orig = LossContext::new(self.features, target, mask, cfg.beta)?;
        let (yt, mt) = transform_target(target, mask, phi);
        let ctx_grad = LossContext::new(self.features, &yt, &mt, cfg.beta)?;
        let inits = initial_latents(cfg.population, self.model.arch.z_dim, rng, PHASE_ADAM_INIT, 0);
        let outcomes: Vec<CandidateOutcome> = inits
            .into_par_iter()
            .map(|mut z| {
                let mut c = c0.to_vec();
                let mut rows = Vec::new();
                let loss = (|| -> Result<f64> {
                    self.refine(&ctx_grad, &mut z, &mut c, steps, "adam", 0, &mut rows)?;
                    Ok(self.rank_loss(&ctx_orig, &z, &c, phi)?.total)
                })()
                .unwrap_or(f64::INFINITY);
                CandidateOutcome { z, c, loss, rows }
            })
            .collect();
        for (slot, o) in outcomes.iter().enumerate() {
            traces[slot].rows.extend(o.rows.iter().cloned());
        }
        best_outcome(outcomes)
    }

    /// Pure CMA over z: candidates are scored directly (no gradient steps)
    /// in the original frame; the best candidate ever seen wins.
    fn cma_phase(
        &self,
        ctx_orig: &LossContext,
        phi: &TransformParams,
        c0: &[f32],
        rng: &SeedRng,
        iters: usize,
        traces: &mut Vec<CandidateTrace>,
    ) -> Result<(CmaState, Vec<f32>, f64)> {
        let cfg = &self.cfg;
        let z_dim = self.model.arch.z_dim;
        let mut cma = CmaState::init_isotropic(z_dim, &vec![0.0; z_dim], 1.0, cfg.population)?;
        let mut best_z: Vec<f32> = vec![0.0; z_dim];
        let mut best_loss = f64::INFINITY;
        for g in 0..iters {
            let mut sample_rng = rng.substream(stream_id(PHASE_CMA_ONLY, g as u32, 0));
            let samples = cma.sample(&mut sample_rng);
            let evals: Vec<(Vec<f32>, f64)> = samples
                .par_iter()
                .map(|zvec| {
                    let mut z: Vec<f32> = zvec.iter().map(|&v| v as f32).collect();
                    clamp_latent_slice(&mut z);
                    let loss = self
                        .rank_loss(ctx_orig, &z, c0, phi)
                        .map(|r| r.total)
                        .unwrap_or(f64::INFINITY);
                    (z, loss)
                })
                .collect();
            let clamped: Vec<DVector<f64>> = evals
                .iter()
                .map(|(z, _)| DVector::from_iterator(z_dim, z.iter().map(|&v| v as f64)))
                .collect();
            let losses: Vec<f64> = evals.iter().map(|&(_, l)| l).collect();
            for (slot, (z, l)) in evals.into_iter().enumerate() {
                traces[slot].rows.push(TraceRow {
                    stage: "cma".into(),
                    generation: g,
                    step: 0,
                    loss: l,
                });
                if l < best_loss {
                    best_loss = l;
                    best_z = z;
                }
            }
            cma.update(&clamped, &losses)?;
        }
        Ok((cma, best_z, best_loss))
    }

    /// Full projection with the requested variant. The reported loss is
    /// always the original-frame loss of the stored solution.
    pub fn project(
        &self,
        target: &ImageBuffer,
        mask: &MaskBuffer,
        rng: &SeedRng,
        variant: VariantSpec,
    ) -> Result<ProjectionResult> {
        let cfg = &self.cfg;
        let t_start = Instant::now();
        let mut timings = StageTimings::default();
        let mut budget = BudgetReport::default();
        let mut traces = vec![CandidateTrace::default(); cfg.population];

        let calls_before = self.forward_calls();
        let (class_index, c0, class_calls) = self.init_class(target)?;
        budget.class_init = class_calls;

        // Transform stage.
        let phi = if variant.with_transform {
            let t0 = Instant::now();
            let stats = match cfg.stats {
                Some(s) => s,
                None => {
                    let before = self.forward_calls();
                    let images = {
                        self.counter.fetch_add(cfg.stats_samples as u64, Ordering::Relaxed);
                        sample_model_images(self.model, rng, cfg.stats_samples)?
                    };
                    budget.stats = self.forward_calls() - before;
                    timings.stats_ms = t0.elapsed().as_millis();
                    compute_stats_from_images(&images)?
                }
            };
            let t1 = Instant::now();
            let before = self.forward_calls();
            let phi = self.stage1_search_transform(target, mask, &c0, &stats, rng, &mut traces)?;
            budget.stage1 = self.forward_calls() - before;
            timings.stage1_ms = t1.elapsed().as_millis();
            phi
        } else {
            TransformParams::identity()
        };

        // Latent search.
        let t2 = Instant::now();
        let before = self.forward_calls();
        let (z, c) = match variant.base {
            BaseVariant::BasinCma => self.stage2_basincma(target, mask, &phi, &c0, rng, &mut traces)?,
            BaseVariant::Adam => {
                self.adam_only(target, mask, &phi, &c0, rng, cfg.adam_only_steps, &mut traces)?
            }
            BaseVariant::Cma => {
                let ctx_orig = LossContext::new(self.features, target, mask, cfg.beta)?;
                let (_, best_z, _) =
                    self.cma_phase(&ctx_orig, &phi, &c0, rng, cfg.cma_only_iters, &mut traces)?;
                (best_z, c0.clone())
            }
            BaseVariant::CmaAdam => {
                let ctx_orig = LossContext::new(self.features, target, mask, cfg.beta)?;
                let (cma, _, _) =
                    self.cma_phase(&ctx_orig, &phi, &c0, rng, cfg.cma_adam_cma_iters, &mut traces)?;
                // Seeds drawn from the optimized distribution, refined with ADAM.
                let (yt, mt) = transform_target(target, mask, &phi);
                let ctx_grad = LossContext::new(self.features, &yt, &mt, cfg.beta)?;
                let mut final_rng =
                    rng.substream(stream_id(PHASE_CMA_ONLY, cfg.cma_adam_cma_iters as u32, 1));
                let samples = cma.sample(&mut final_rng);
                let outcomes: Vec<CandidateOutcome> = samples
                    .par_iter()
                    .map(|zvec| {
                        let mut z: Vec<f32> = zvec.iter().map(|&v| v as f32).collect();
                        clamp_latent_slice(&mut z);
                        let mut c = c0.to_vec();
                        let mut rows = Vec::new();
                        let loss = (|| -> Result<f64> {
                            self.refine(
                                &ctx_grad,
                                &mut z,
                                &mut c,
                                cfg.cma_adam_adam_steps,
                                "cma_adam",
                                0,
                                &mut rows,
                            )?;
                            Ok(self.rank_loss(&ctx_orig, &z, &c, &phi)?.total)
                        })()
                        .unwrap_or(f64::INFINITY);
                        CandidateOutcome { z, c, loss, rows }
                    })
                    .collect();
                for (slot, o) in outcomes.iter().enumerate() {
                    traces[slot].rows.extend(o.rows.iter().cloned());
                }
                best_outcome(outcomes)?
            }
        };
        budget.search = self.forward_calls() - before;
        timings.search_ms = t2.elapsed().as_millis();

        // The reported number: recompute the loss of the stored solution.
        let before = self.forward_calls();
        let ctx_orig = LossContext::new(self.features, target, mask, cfg.beta)?;
        let final_report = self.rank_loss(&ctx_orig, &z, &c, &phi)?;
        budget.final_eval = self.forward_calls() - before;

        budget.total = self.forward_calls() - calls_before;
        timings.total_ms = t_start.elapsed().as_millis();
        Ok(ProjectionResult {
            variant: variant.token(),
            z,
            c,
            phi,
            class_index,
            final_report,
            traces,
            budget,
            timings,
        })
    }

    /// Post-projection fine-tuning of the generator weights (with z and c)
    /// under an l2 leash to the original weights. Gradient steps use the
    /// transformed-target loss; the stop rule watches the original-frame
    /// reconstruction loss.
    pub fn finetune(
        &self,
        target: &ImageBuffer,
        mask: &MaskBuffer,
        z0: &[f32],
        c0: &[f32],
        phi: &TransformParams,
        lambda: f64,
    ) -> Result<(GeneratorModel, FinetuneReport)> {
        let cfg = &self.cfg;
        let mut model = self.model.clone();
        let theta0 = model.theta.clone();
        let n_theta = theta0.len() as f64;
        let ctx_orig = LossContext::new(self.features, target, mask, cfg.beta)?;
        let (yt, mt) = transform_target(target, mask, phi);
        let ctx_grad = LossContext::new(self.features, &yt, &mt, cfg.beta)?;

        let mut z = z0.to_vec();
        let mut c = c0.to_vec();
        let lr = cfg.lrs.theta;
        let mut adam_z = AdamState::new(z.len(), lr);
        let mut adam_c = AdamState::new(c.len(), lr);
        let mut adam_t = AdamState::new(theta0.len(), lr);

        let recon = |model: &GeneratorModel, z: &[f32], c: &[f32]| -> Result<f64> {
            self.counter.fetch_add(1, Ordering::Relaxed);
            let img = model.forward(&LatentState::new(z.to_vec(), c.to_vec()))?;
            let back = untransform_generated(&img, phi)?;
            Ok(ctx_orig.loss(self.features, &back)?.total)
        };

        let mut trace = Vec::new();
        let mut steps = 0usize;
        let mut current = recon(&model, &z, &c)?;
        trace.push(current);
        while current >= cfg.finetune_stop_loss && steps < cfg.finetune_max_steps {
            self.counter.fetch_add(1, Ordering::Relaxed);
            let state = LatentState::new(z.clone(), c.clone());
            let (img, cache) = model.forward_cached(&state)?;
            let (_, dimg) = ctx_grad.loss_and_grad(self.features, &img)?;
            let mut bundle = model.backward(&cache, &dimg, true)?;
            let d_theta = bundle.d_theta.as_mut().expect("theta gradient requested");
            // Leash gradient: mean-squared l2 deviation keeps lambda on a
            // scale-free footing for any parameter count.
            let reg_coeff = 2.0 * lambda / n_theta;
            for (g, (&t, &t0)) in d_theta.iter_mut().zip(model.theta.iter().zip(&theta0)) {
                *g += (reg_coeff * (t as f64 - t0 as f64)) as f32;
            }
            adam_t.step(&mut model.theta, d_theta)?;
            adam_z.step(&mut z, &bundle.d_z)?;
            clamp_latent_slice(&mut z);
            adam_c.step(&mut c, &bundle.d_c)?;
            steps += 1;
            current = recon(&model, &z, &c)?;
            trace.push(current);
        }

        let theta_distance = model
            .theta
            .iter()
            .zip(&theta0)
            .map(|(&a, &b)| ((a - b) as f64).powi(2))
            .sum::<f64>()
            .sqrt();
        let warned = current >= cfg.finetune_stop_loss;
        Ok((model, FinetuneReport { steps, final_recon: current, theta_distance, warned, trace }))
    }
}

fn best_outcome(outcomes: Vec<CandidateOutcome>) -> Result<(Vec<f32>, Vec<f32>)> {
    outcomes
        .into_iter()
        .filter(|o| o.loss.is_finite())
        .min_by(|a, b| a.loss.partial_cmp(&b.loss).unwrap())
        .map(|o| (o.z, o.c))
        .ok_or(Error::AllCandidatesFailed)
}

/// Closed-form expected generator forward calls for a healthy run (no
/// failed candidates), matching the instrumentation counter.
pub fn expected_forward_calls(
    cfg: &ProjectionConfig,
    variant: VariantSpec,
    class_count: u64,
    class_given: bool,
) -> u64 {
    let n = cfg.population as u64;
    let class = if class_given { 0 } else { class_count };
    let stats = if variant.with_transform && cfg.stats.is_none() {
        cfg.stats_samples as u64
    } else {
        0
    };
    let stage1 = if variant.with_transform {
        cfg.n_transform_iters as u64 * n * (cfg.m_inner_grad as u64 + 1)
    } else {
        0
    };
    let search = match variant.base {
        BaseVariant::BasinCma => {
            cfg.p_latent_iters as u64 * n * (cfg.q_inner_grad as u64 + 1)
                + n * (cfg.final_grad_steps as u64 + 1)
        }
        BaseVariant::Adam => n * (cfg.adam_only_steps as u64 + 1),
        BaseVariant::Cma => cfg.cma_only_iters as u64 * n,
        BaseVariant::CmaAdam => {
            cfg.cma_adam_cma_iters as u64 * n + n * (cfg.cma_adam_adam_steps as u64 + 1)
        }
    };
    class + stats + stage1 + search + 1
}
