//! genproj: projecting images into the latent space of a class-conditional
//! generator.
//!
//! The library searches for latent inputs (z, class embedding c) and an
//! invertible spatial/color transform of the target so that a differentiable
//! generator reproduces a masked target image. The search alternates a
//! gradient-free CMA-ES outer loop with inner ADAM refinement (BasinCMA),
//! optionally fine-tunes the generator weights afterward, and can Poisson-
//! blend the result into the original background. A built-in toy generator
//! with analytic gradients makes the whole pipeline testable end to end.

pub mod adam;
pub mod blend;
pub mod buffer;
pub mod cma;
pub mod config;
pub mod error;
pub mod generator;
pub mod io;
pub mod loss;
pub mod project;
pub mod rng;
pub mod transform;

pub use buffer::{make_box_mask, BoxRegion, ImageBuffer, MaskBuffer};
pub use error::{Error, Result};
pub use generator::{GeneratorModel, GradientBundle, LatentState};
pub use loss::{FeatureExtractor, LossReport};
pub use rng::SeedRng;
pub use transform::{ColorParams, SpatialParams, TransformParams};
