//! Training objectives: photometric ℓ1 + D-SSIM, motion-coherence (MCR),
//! spectral (SR) and the ARAP baseline, plus their weighted total.
//!
//! Regularizers return gradients w.r.t. member positions at both sampled
//! times; group membership itself is treated as a constant.

mod arap;
mod mcr;
mod objective;
mod photometric;
mod sr;

pub use arap::{arap_loss, procrustes_rotation, Neighborhood};
pub use mcr::{mcr_loss, DEFAULT_EPSILON, DEFAULT_MOTION_THRESHOLD};
pub use objective::{sample_timestep_pair, total_objective, LossReport, LossTerms, LossWeights, RegularizerMode};
pub use photometric::{photometric_loss, ssim, PhotometricResult, SSIM_C1, SSIM_C2, SSIM_SIGMA, SSIM_WINDOW};
pub use sr::sr_loss;

use nalgebra::Vector3;

/// A regularizer's value with gradients w.r.t. positions at `t` and `t + Δt`.
#[derive(Debug, Clone, PartialEq)]
pub struct TermResult {
    /// Mean over qualifying contributions.
    pub value: f64,
    /// Number of qualifying contributions (pairs or groups).
    pub count: usize,
    pub grad_t: Vec<Vector3<f64>>,
    pub grad_t2: Vec<Vector3<f64>>,
}

impl TermResult {
    pub fn zero(n: usize) -> Self {
        Self { value: 0.0, count: 0, grad_t: vec![Vector3::zeros(); n], grad_t2: vec![Vector3::zeros(); n] }
    }

    fn finish(mut self, sum: f64) -> Self {
        if self.count == 0 {
            return Self::zero(self.grad_t.len());
        }
        let inv = 1.0 / self.count as f64;
        self.value = sum * inv;
        for g in self.grad_t.iter_mut().chain(self.grad_t2.iter_mut()) {
            *g *= inv;
        }
        self
    }
}
