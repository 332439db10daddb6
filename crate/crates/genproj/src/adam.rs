//! ADAM with per-candidate isolated state.
//!
//! Each candidate owns one `AdamState` per variable group (z, c, theta);
//! moments are never shared across candidates. The caller applies the
//! latent clamp after stepping z.

use crate::error::{Error, Result};

pub const DEFAULT_LR_Z: f64 = 0.05;
pub const DEFAULT_LR_C: f64 = 1e-4;
pub const DEFAULT_LR_THETA: f64 = 1e-4;

/// Learning rates per variable group.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LearningRates {
    pub z: f64,
    pub c: f64,
    pub theta: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        default_learning_rates()
    }
}

/// The published defaults: 0.05 for z, 1e-4 for c and theta.
pub fn default_learning_rates() -> LearningRates {
    LearningRates { z: DEFAULT_LR_Z, c: DEFAULT_LR_C, theta: DEFAULT_LR_THETA }
}

#[derive(Debug, Clone)]
pub struct AdamState {
    step: u64,
    m1: Vec<f64>,
    m2: Vec<f64>,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(dim: usize, lr: f64) -> Self {
        assert!(lr > 0.0, "learning rate must be positive");
        Self { step: 0, m1: vec![0.0; dim], m2: vec![0.0; dim], lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update in place. A non-finite gradient is an
    /// error so the caller can mark the candidate failed instead of
    /// silently corrupting it.
    pub fn step(&mut self, params: &mut [f32], grad: &[f32]) -> Result<()> {
        if params.len() != self.m1.len() || grad.len() != self.m1.len() {
            return Err(Error::Shape {
                expected: format!("{} params/grads", self.m1.len()),
                got: format!("{}/{}", params.len(), grad.len()),
            });
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("gradient".into()));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grad[i] as f64;
            self.m1[i] = self.beta1 * self.m1[i] + (1.0 - self.beta1) * g;
            self.m2[i] = self.beta2 * self.m2[i] + (1.0 - self.beta2) * g * g;
            let mhat = self.m1[i] / bc1;
            let vhat = self.m2[i] / bc2;
            params[i] = (params[i] as f64 - self.lr * mhat / (vhat.sqrt() + self.eps)) as f32;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_published_values() {
        let lrs = default_learning_rates();
        assert_eq!(lrs.z, 0.05);
        assert_eq!(lrs.c, 1e-4);
        assert_eq!(lrs.theta, 1e-4);
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut st = AdamState::new(4, 0.05);
        let mut p = vec![1.0f32, -2.0, 0.5, 0.0];
        let before = p.clone();
        st.step(&mut p, &[0.0; 4]).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_has_magnitude_close_to_lr() {
        // Bias correction makes m̂/sqrt(v̂) ≈ sign(g) on step one.
        let mut st = AdamState::new(3, 0.05);
        let mut p = vec![0.0f32; 3];
        st.step(&mut p, &[0.3, -1.7, 4.0]).unwrap();
        for (i, &v) in p.iter().enumerate() {
            let expected = -0.05f32 * [0.3f32, -1.7, 4.0][i].signum();
            assert!((v - expected).abs() < 1e-3, "coord {i}: {v}");
        }
    }

    #[test]
    fn nan_gradient_is_an_error() {
        let mut st = AdamState::new(2, 0.05);
        let mut p = vec![0.0f32; 2];
        assert!(st.step(&mut p, &[f32::NAN, 0.0]).is_err());
    }

    #[test]
    fn candidates_evolve_independently() {
        let mut a = AdamState::new(2, 0.05);
        let mut b = AdamState::new(2, 0.05);
        let mut pa = vec![1.0f32, 1.0];
        let mut pb = pa.clone();
        a.step(&mut pa, &[1.0, 0.0]).unwrap();
        b.step(&mut pb, &[0.0, 1.0]).unwrap();
        assert_ne!(pa, pb);
        // Stepping b more does not affect a's future trajectory.
        let mut a2 = AdamState::new(2, 0.05);
        let mut pa2 = vec![1.0f32, 1.0];
        a2.step(&mut pa2, &[1.0, 0.0]).unwrap();
        assert_eq!(pa, pa2);
    }

    #[test]
    fn quadratic_converges_within_budget() {
        // f(x) = ||x - a||^2 from x0 = 0 reaches ||x - a|| < 1e-2 in 2000 steps.
        let mut rng = crate::rng::SeedRng::new(5);
        let target: Vec<f32> = (0..16).map(|_| (rng.normal() * 0.5).clamp(-1.0, 1.0) as f32).collect();
        let mut x = vec![0.0f32; 16];
        let mut st = AdamState::new(16, 0.05);
        for _ in 0..2000 {
            let grad: Vec<f32> = x.iter().zip(&target).map(|(&xi, &ai)| 2.0 * (xi - ai)).collect();
            st.step(&mut x, &grad).unwrap();
        }
        let dist: f64 = x
            .iter()
            .zip(&target)
            .map(|(&xi, &ai)| ((xi - ai) as f64).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!(dist < 1e-2, "distance {dist}");
    }
}
