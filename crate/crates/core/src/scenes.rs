//! Synthetic dynamic scenes with known trajectories, self-rendered targets
//! and the trajectory-fidelity metrics used to compare training runs.
//!
//! Static and rigid scenes use a cube-shaped cloud; the hinge and bend scenes
//! use a bar along x whose joint sits at the origin.

use std::path::Path;

use nalgebra::{Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::rasterizer::{render, Image, RenderOptions};
use crate::types::{Camera, Gaussian3D};

pub const MAX_GAUSSIANS: usize = 500;
pub const MAX_TIMESTEPS: usize = 60;
pub const MAX_IMAGE_SIDE: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MotionKind {
    Static,
    RigidTranslation,
    RigidRotation,
    ArticulatedHinge,
    NonrigidBend,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum CameraPath {
    /// One view per timestep, azimuth advancing linearly over `sweep_deg`.
    Orbit { radius: f64, elevation: f64, start_deg: f64, sweep_deg: f64 },
    Fixed { radius: f64, elevation: f64, azimuth_deg: f64 },
}

impl Default for CameraPath {
    fn default() -> Self {
        CameraPath::Orbit { radius: 3.5, elevation: 1.2, start_deg: 0.0, sweep_deg: 360.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub name: String,
    pub n_gaussians: usize,
    pub motion: MotionKind,
    pub timesteps: usize,
    pub width: usize,
    pub height: usize,
    pub camera: CameraPath,
    pub seed: u64,
    /// Vertical field of view in degrees.
    pub fov_deg: f64,
    /// Isotropic Gaussian standard deviation.
    pub gaussian_scale: f64,
    pub opacity: f64,
    pub background: [f64; 3],
    /// Total joint angle (hinge, bend) or spin angle (rigid rotation), degrees.
    pub angle_deg: f64,
    /// Total displacement of the rigid-translation scene.
    pub translation: [f64; 3],
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            name: "hinge".into(),
            n_gaussians: 200,
            motion: MotionKind::ArticulatedHinge,
            timesteps: 40,
            width: 64,
            height: 64,
            camera: CameraPath::default(),
            seed: 0,
            fov_deg: 40.0,
            gaussian_scale: 0.07,
            opacity: 0.8,
            background: [0.0; 3],
            angle_deg: 60.0,
            translation: [0.6, 0.0, 0.0],
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_gaussians > MAX_GAUSSIANS {
            return Err(Error::InvalidParameter(format!("at most {MAX_GAUSSIANS} Gaussians, got {}", self.n_gaussians)));
        }
        if self.timesteps == 0 || self.timesteps > MAX_TIMESTEPS {
            return Err(Error::InvalidParameter(format!("timesteps must lie in 1..={MAX_TIMESTEPS}, got {}", self.timesteps)));
        }
        if self.width == 0 || self.height == 0 || self.width > MAX_IMAGE_SIDE || self.height > MAX_IMAGE_SIDE {
            return Err(Error::InvalidParameter(format!("image sides must lie in 1..={MAX_IMAGE_SIDE}")));
        }
        if !(self.gaussian_scale > 0.0 && self.opacity >= 0.0 && self.fov_deg > 0.0 && self.fov_deg < 180.0) {
            return Err(Error::InvalidParameter("scale, opacity or field of view out of range".into()));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let spec: SceneSpec = serde_json::from_reader(std::fs::File::open(path)?)?;
        spec.validate()?;
        Ok(spec)
    }

    /// Normalized time of timestep `k`.
    pub fn time(&self, k: usize) -> f64 {
        if self.timesteps <= 1 {
            0.0
        } else {
            k as f64 / (self.timesteps - 1) as f64
        }
    }
}

#[derive(Debug, Clone)]
pub struct Scene {
    pub spec: SceneSpec,
    /// Gaussians at timestep 0.
    pub canonical: Vec<Gaussian3D>,
    /// `trajectories[timestep][gaussian]`.
    pub trajectories: Vec<Vec<Vector3<f64>>>,
    pub cameras: Vec<Camera>,
    pub targets: Vec<Image>,
}

impl Scene {
    /// Ground-truth Gaussians at timestep `k`.
    pub fn frame(&self, k: usize) -> Vec<Gaussian3D> {
        self.canonical.iter().zip(&self.trajectories[k]).map(|(g, p)| Gaussian3D { position: *p, ..*g }).collect()
    }

    pub fn render_options(&self) -> RenderOptions {
        RenderOptions { background: self.spec.background, retain_fragments: false }
    }
}

fn camera_at(spec: &SceneSpec, k: usize) -> Result<Camera> {
    let (radius, elevation, azimuth) = match spec.camera {
        CameraPath::Orbit { radius, elevation, start_deg, sweep_deg } => (radius, elevation, start_deg + sweep_deg * spec.time(k)),
        CameraPath::Fixed { radius, elevation, azimuth_deg } => (radius, elevation, azimuth_deg),
    };
    let a = azimuth.to_radians();
    let eye = Vector3::new(radius * a.sin(), elevation, -radius * a.cos());
    Camera::look_at(eye, Vector3::zeros(), Vector3::y(), spec.fov_deg.to_radians(), spec.width, spec.height)
}

/// Position of a canonical point at normalized time `t`.
fn moved(spec: &SceneSpec, p: &Vector3<f64>, t: f64) -> Vector3<f64> {
    let angle = spec.angle_deg.to_radians() * t;
    match spec.motion {
        MotionKind::Static => *p,
        MotionKind::RigidTranslation => p + Vector3::from(spec.translation) * t,
        MotionKind::RigidRotation => Rotation3::from_axis_angle(&Vector3::y_axis(), angle) * p,
        MotionKind::ArticulatedHinge => {
            if p.x > 0.0 {
                Rotation3::from_axis_angle(&Vector3::z_axis(), angle) * p
            } else {
                *p
            }
        }
        // curvature grows along the bar: the local rotation angle is proportional to x
        MotionKind::NonrigidBend => {
            let s = (p.x + 1.0) / 2.0;
            Rotation3::from_axis_angle(&Vector3::z_axis(), angle * s * s) * p
        }
    }
}

/// Deterministic scene from the spec's seed; targets are rendered from the
/// ground truth with this crate's rasterizer.
pub fn generate_scene(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let bar = matches!(spec.motion, MotionKind::ArticulatedHinge | MotionKind::NonrigidBend);
    let extent = if bar { Vector3::new(1.0, 0.2, 0.2) } else { Vector3::new(0.5, 0.5, 0.5) };
    let canonical: Vec<Gaussian3D> = (0..spec.n_gaussians)
        .map(|_| {
            let p = Vector3::new(
                rng.gen_range(-extent.x..=extent.x),
                rng.gen_range(-extent.y..=extent.y),
                rng.gen_range(-extent.z..=extent.z),
            );
            let c = Vector3::new(rng.gen_range(0.15..1.0), rng.gen_range(0.15..1.0), rng.gen_range(0.15..1.0));
            Gaussian3D::isotropic(p, spec.gaussian_scale, spec.opacity, c)
        })
        .collect();
    let trajectories: Vec<Vec<Vector3<f64>>> =
        (0..spec.timesteps).map(|k| canonical.iter().map(|g| moved(spec, &g.position, spec.time(k))).collect()).collect();
    let cameras = (0..spec.timesteps).map(|k| camera_at(spec, k)).collect::<Result<Vec<_>>>()?;
    let mut scene = Scene { spec: spec.clone(), canonical, trajectories, cameras, targets: Vec::new() };
    let opts = scene.render_options();
    scene.targets = (0..spec.timesteps)
        .map(|k| render(&scene.frame(k), &scene.cameras[k], &opts).map(|o| o.image))
        .collect::<Result<Vec<_>>>()?;
    Ok(scene)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryError {
    /// Mean over Gaussians and timesteps of `‖μ̂ − μ_gt‖`.
    pub mean_endpoint_error: f64,
    /// Mean over (group, step) of `1 − mean cosine(d_i, d̄)` for consecutive-step displacements.
    pub direction_variance: f64,
}

/// Compares estimated and true trajectories (`[timestep][gaussian]`).
///
/// Direction variance is measured on the estimate alone: for each group and
/// each consecutive timestep pair, members that moved are compared with the
/// group's mean displacement. Pairs where nothing moved are skipped.
pub fn trajectory_error(
    estimated: &[Vec<Vector3<f64>>],
    ground_truth: &[Vec<Vector3<f64>>],
    groups: &[Vec<usize>],
) -> Result<TrajectoryError> {
    if estimated.len() != ground_truth.len() || estimated.iter().zip(ground_truth).any(|(a, b)| a.len() != b.len()) {
        return Err(Error::InvalidInput("estimated and ground-truth trajectories differ in shape".into()));
    }
    if estimated.is_empty() || estimated[0].is_empty() {
        return Err(Error::InvalidInput("empty trajectories".into()));
    }
    let n = estimated[0].len();
    if groups.iter().flatten().any(|&i| i >= n) {
        return Err(Error::InvalidInput("group member out of range".into()));
    }
    let mut err = 0.0;
    for (a, b) in estimated.iter().zip(ground_truth) {
        err += a.iter().zip(b).map(|(p, q)| (p - q).norm()).sum::<f64>();
    }
    let mean_endpoint_error = err / (estimated.len() * n) as f64;

    let (mut var_sum, mut var_count) = (0.0, 0usize);
    for step in estimated.windows(2) {
        for g in groups.iter().filter(|g| !g.is_empty()) {
            let disp: Vec<Vector3<f64>> = g.iter().map(|&i| step[1][i] - step[0][i]).collect();
            let mean = disp.iter().sum::<Vector3<f64>>() / g.len() as f64;
            let mn = mean.norm();
            if mn == 0.0 {
                continue;
            }
            let cosines: Vec<f64> = disp.iter().filter(|d| d.norm() > 0.0).map(|d| d.dot(&mean) / (d.norm() * mn)).collect();
            if cosines.is_empty() {
                continue;
            }
            var_sum += 1.0 - cosines.iter().sum::<f64>() / cosines.len() as f64;
            var_count += 1;
        }
    }
    let direction_variance = if var_count == 0 { 0.0 } else { var_sum / var_count as f64 };
    Ok(TrajectoryError { mean_endpoint_error, direction_variance })
}

#[derive(Serialize)]
struct SceneFile<'a> {
    spec: &'a SceneSpec,
    canonical: &'a [Gaussian3D],
    cameras: &'a [Camera],
    trajectory_blob: &'a str,
    trajectory_layout: &'a str,
}

/// Writes `scene.json`, `trajectories.f32`, `trajectories.csv`,
/// `targets/target_XXX.png` and `ply/frame_XXX.ply` into `dir`.
pub fn export_scene(scene: &Scene, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let file = SceneFile {
        spec: &scene.spec,
        canonical: &scene.canonical,
        cameras: &scene.cameras,
        trajectory_blob: "trajectories.f32",
        trajectory_layout: "float32-le [timestep][gaussian][xyz]",
    };
    serde_json::to_writer_pretty(io::create(&dir.join("scene.json"))?, &file)?;
    io::write_f32_blob(scene.trajectories.iter().flatten().flat_map(|p| [p.x, p.y, p.z]), io::create(&dir.join("trajectories.f32"))?)?;
    io::write_trajectories_csv(&scene.trajectories, io::create(&dir.join("trajectories.csv"))?)?;
    let colors: Vec<Vector3<f64>> = scene.canonical.iter().map(|g| g.color).collect();
    for (k, (img, pts)) in scene.targets.iter().zip(&scene.trajectories).enumerate() {
        io::write_png(img, &dir.join("targets").join(format!("target_{k:03}.png")))?;
        io::write_ply(pts, Some(&colors), io::create(&dir.join("ply").join(format!("frame_{k:03}.ply")))?)?;
    }
    Ok(())
}
