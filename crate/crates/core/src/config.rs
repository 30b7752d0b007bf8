//! Run configuration: one JSON file, every field defaulted, unknown fields rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grouping::{DEFAULT_K, DEFAULT_TAU};
use crate::losses::{LossWeights, RegularizerMode};
use crate::motion::{BasisFamily, Interpolation};
use crate::scenes::SceneSpec;

/// Either a path to a scene JSON file or the spec inline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SceneSource {
    Path(PathBuf),
    Inline(SceneSpec),
}

impl Default for SceneSource {
    fn default() -> Self {
        SceneSource::Inline(SceneSpec::default())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Grouping {
    Ray,
    Knn,
}

impl Grouping {
    pub fn name(self) -> &'static str {
        match self {
            Grouping::Ray => "ray",
            Grouping::Knn => "knn",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MotionKindConfig {
    /// Per-timestep offset table keyed at the training timesteps.
    Table,
    /// Basis-function position trajectories.
    Basis,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MotionConfig {
    pub kind: MotionKindConfig,
    pub interpolation: Interpolation,
    pub family: BasisFamily,
    pub order: usize,
}

impl Default for MotionConfig {
    fn default() -> Self {
        Self { kind: MotionKindConfig::Basis, interpolation: Interpolation::Linear, family: BasisFamily::Polynomial, order: 3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub scene: SceneSource,
    pub motion: MotionConfig,
    pub iterations: usize,
    /// Step size for position parameters.
    pub learning_rate: f64,
    /// 0 for plain SGD, 0.9 for heavy-ball momentum.
    pub momentum: f64,
    pub weights: LossWeights,
    pub grouping: Grouping,
    pub regularizer: RegularizerMode,
    pub tau: f64,
    pub k: usize,
    /// Ray groups are taken from every `pixel_stride`-th row and column.
    pub pixel_stride: usize,
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Every `holdout_every`-th timestep (offset by half a period) is held
    /// out of training and used for evaluation; 0 disables holdout.
    pub holdout_every: usize,
    /// Neighbourhood size of the ground-truth groups used for direction variance.
    pub metric_group_k: usize,
    /// Timestep rendered by `rrgs render`.
    pub render_timestep: usize,
    /// Write a rendered image for every timestep after training.
    pub save_images: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            scene: SceneSource::default(),
            motion: MotionConfig::default(),
            iterations: 1920,
            learning_rate: 0.05,
            momentum: 0.9,
            weights: LossWeights::default(),
            grouping: Grouping::Ray,
            regularizer: RegularizerMode::Full,
            tau: DEFAULT_TAU,
            k: DEFAULT_K,
            pixel_stride: 1,
            seed: 0,
            output_dir: PathBuf::from("rrgs-out"),
            holdout_every: 5,
            metric_group_k: 8,
            render_timestep: 0,
            save_images: true,
        }
    }
}

impl RunConfig {
    /// Reads a config; a relative scene path is resolved against the config's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg: RunConfig = serde_json::from_str(&text)?;
        if let SceneSource::Path(p) = &mut cfg.scene {
            if p.is_relative() {
                if let Some(dir) = path.parent() {
                    *p = dir.join(&*p);
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidParameter(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidParameter(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::InvalidParameter(format!("tau must lie in (0, 1), got {}", self.tau)));
        }
        if self.k == 0 || self.metric_group_k == 0 || self.pixel_stride == 0 {
            return Err(Error::InvalidParameter("k, metric_group_k and pixel_stride must be at least 1".into()));
        }
        if self.motion.kind == MotionKindConfig::Basis && self.motion.order == 0 {
            return Err(Error::InvalidParameter("basis order must be at least 1".into()));
        }
        if let SceneSource::Inline(spec) = &self.scene {
            spec.validate()?;
        }
        Ok(())
    }

    pub fn scene_spec(&self) -> Result<SceneSpec> {
        match &self.scene {
            SceneSource::Path(p) => SceneSpec::load(p),
            SceneSource::Inline(s) => Ok(s.clone()),
        }
    }

    /// Loss weights after the regularizer mode has switched terms off.
    pub fn effective_weights(&self) -> LossWeights {
        self.regularizer.effective(&self.weights)
    }

    /// Timesteps excluded from training.
    pub fn is_held_out(&self, k: usize, timesteps: usize) -> bool {
        // the last timestep is always trained so the table covers the whole range
        self.holdout_every > 1 && k + 1 < timesteps && k % self.holdout_every == self.holdout_every / 2
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<RunConfig>(&text).unwrap(), cfg);
        let empty: RunConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(empty, cfg);
    }

    #[test]
    fn unknown_fields_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"iteratons": 3}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"weights": {"lambda_src": 1}}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"scene": {"name": "x", "bogus": 1}}"#).is_err());
    }

    #[test]
    fn arap_mode_zeroes_mcr() {
        let cfg: RunConfig = serde_json::from_str(r#"{"regularizer": "arap"}"#).unwrap();
        let w = cfg.effective_weights();
        assert_eq!(w.lambda_mcr, 0.0);
        assert_eq!(w.lambda_sr, 0.0);
        assert_eq!(w.lambda_arap, 1.0);
    }

    #[test]
    fn scene_path_resolved_relative_to_config() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SceneSpec { n_gaussians: 7, ..Default::default() };
        std::fs::write(dir.path().join("s.json"), serde_json::to_string(&spec).unwrap()).unwrap();
        std::fs::write(dir.path().join("c.json"), r#"{"scene": "s.json"}"#).unwrap();
        let cfg = RunConfig::load(&dir.path().join("c.json")).unwrap();
        assert_eq!(cfg.scene_spec().unwrap(), spec);
    }

    #[test]
    fn holdout_pattern() {
        let cfg = RunConfig::default();
        let held: Vec<usize> = (0..40).filter(|&k| cfg.is_held_out(k, 40)).collect();
        assert_eq!(held, vec![2, 7, 12, 17, 22, 27, 32, 37]);
        let none = RunConfig { holdout_every: 0, ..Default::default() };
        assert!((0..40).all(|k| !none.is_held_out(k, 40)));
    }
}
