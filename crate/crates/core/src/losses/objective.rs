use nalgebra::Vector3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::photometric::PhotometricResult;
use super::TermResult;
use crate::error::{Error, Result};
use crate::rasterizer::Image;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_dssim: f64,
    pub lambda_mcr: f64,
    pub lambda_sr: f64,
    pub lambda_arap: f64,
    pub epsilon: f64,
    pub motion_threshold: f64,
    pub huber_delta: f64,
    /// Half-width `m` of the partner-timestep window, in frames.
    pub temporal_window: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_dssim: 0.2,
            lambda_mcr: 0.005,
            lambda_sr: 1.0,
            lambda_arap: 1.0,
            epsilon: super::DEFAULT_EPSILON,
            motion_threshold: super::DEFAULT_MOTION_THRESHOLD,
            huber_delta: crate::spectral::DEFAULT_HUBER_DELTA,
            temporal_window: 20.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            ("lambda_dssim", self.lambda_dssim),
            ("lambda_mcr", self.lambda_mcr),
            ("lambda_sr", self.lambda_sr),
            ("lambda_arap", self.lambda_arap),
            ("motion_threshold", self.motion_threshold),
            ("temporal_window", self.temporal_window),
        ];
        for (name, v) in all {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidParameter(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        if self.lambda_dssim > 1.0 {
            return Err(Error::InvalidParameter(format!("lambda_dssim must be at most 1, got {}", self.lambda_dssim)));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::InvalidParameter(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if !(self.huber_delta > 0.0 && self.huber_delta.is_finite()) {
            return Err(Error::InvalidParameter(format!("huber_delta must be positive, got {}", self.huber_delta)));
        }
        Ok(())
    }
}

/// Which regularizers are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegularizerMode {
    None,
    Mcr,
    Sr,
    Full,
    /// ARAP replaces SR and MCR is switched off.
    Arap,
}

impl RegularizerMode {
    pub const ALL: [RegularizerMode; 5] =
        [RegularizerMode::None, RegularizerMode::Mcr, RegularizerMode::Sr, RegularizerMode::Full, RegularizerMode::Arap];

    pub fn name(self) -> &'static str {
        match self {
            RegularizerMode::None => "none",
            RegularizerMode::Mcr => "mcr",
            RegularizerMode::Sr => "sr",
            RegularizerMode::Full => "full",
            RegularizerMode::Arap => "arap",
        }
    }

    /// Weights with the inactive terms zeroed.
    pub fn effective(self, w: &LossWeights) -> LossWeights {
        let mut out = *w;
        let (mcr, sr, arap) = match self {
            RegularizerMode::None => (false, false, false),
            RegularizerMode::Mcr => (true, false, false),
            RegularizerMode::Sr => (false, true, false),
            RegularizerMode::Full => (true, true, false),
            RegularizerMode::Arap => (false, false, true),
        };
        if !mcr {
            out.lambda_mcr = 0.0;
        }
        if !sr {
            out.lambda_sr = 0.0;
        }
        if !arap {
            out.lambda_arap = 0.0;
        }
        out
    }
}

impl std::str::FromStr for RegularizerMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown regularizer mode {s:?}")))
    }
}

/// Raw (unweighted) term values and how many contributions each averaged.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub l1: f64,
    pub dssim: f64,
    pub mcr: f64,
    pub sr: f64,
    pub arap: f64,
    pub mcr_count: usize,
    pub sr_count: usize,
    pub arap_count: usize,
}

impl LossTerms {
    pub fn weighted_total(&self, w: &LossWeights) -> f64 {
        (1.0 - w.lambda_dssim) * self.l1
            + w.lambda_dssim * self.dssim
            + w.lambda_mcr * self.mcr
            + w.lambda_sr * self.sr
            + w.lambda_arap * self.arap
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossReport {
    pub mode: RegularizerMode,
    /// Weights after the mode has switched terms off.
    pub weights: LossWeights,
    pub terms: LossTerms,
    pub total: f64,
    /// `∂total/∂image` (photometric part only).
    #[serde(skip)]
    pub image_grad: Image,
    /// `∂total/∂μ` at the two sampled times (regularizer part only).
    #[serde(skip)]
    pub grad_t: Vec<Vector3<f64>>,
    #[serde(skip)]
    pub grad_t2: Vec<Vector3<f64>>,
}

/// Weighted sum of all terms with gradients combined accordingly. Terms that
/// were not computed are passed as `None` and count as zero.
pub fn total_objective(
    photometric: &PhotometricResult,
    mcr: Option<&TermResult>,
    sr: Option<&TermResult>,
    arap: Option<&TermResult>,
    weights: &LossWeights,
    mode: RegularizerMode,
    n_gaussians: usize,
) -> LossReport {
    let w = mode.effective(weights);
    let mut grad_t = vec![Vector3::zeros(); n_gaussians];
    let mut grad_t2 = vec![Vector3::zeros(); n_gaussians];
    let mut add = |term: Option<&TermResult>, lambda: f64| -> (f64, usize) {
        let Some(t) = term else { return (0.0, 0) };
        if lambda != 0.0 {
            for (acc, g) in grad_t.iter_mut().zip(&t.grad_t) {
                *acc += lambda * g;
            }
            for (acc, g) in grad_t2.iter_mut().zip(&t.grad_t2) {
                *acc += lambda * g;
            }
        }
        (t.value, t.count)
    };
    let (mcr, mcr_count) = add(mcr, w.lambda_mcr);
    let (sr, sr_count) = add(sr, w.lambda_sr);
    let (arap, arap_count) = add(arap, w.lambda_arap);
    let terms = LossTerms { l1: photometric.l1, dssim: photometric.dssim, mcr, sr, arap, mcr_count, sr_count, arap_count };
    LossReport { mode, weights: w, terms, total: terms.weighted_total(&w), image_grad: photometric.grad.clone(), grad_t, grad_t2 }
}

/// Draws the partner time `t′` uniformly on `[t − m, t + m] ∩ [0, t_max]`.
pub fn sample_timestep_pair<R: Rng + ?Sized>(t: f64, m: f64, t_max: f64, rng: &mut R) -> Result<(f64, f64)> {
    if !(m >= 0.0 && m.is_finite()) {
        return Err(Error::InvalidParameter(format!("window m must be non-negative, got {m}")));
    }
    if !(0.0..=t_max).contains(&t) {
        return Err(Error::InvalidParameter(format!("t = {t} outside [0, {t_max}]")));
    }
    let lo = (t - m).max(0.0);
    let hi = (t + m).min(t_max);
    if hi <= lo {
        return Ok((t, t));
    }
    let u: f64 = rng.gen();
    Ok((t, lo + (hi - lo) * u))
}
