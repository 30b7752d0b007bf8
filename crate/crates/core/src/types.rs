//! Gaussian primitives, pinhole cameras and the affine screen-space projection.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Quaternion stored scalar-first as `(w, x, y, z)`.
pub type Quat = Vector4<f64>;

/// Low-pass dilation (px²) added to the diagonal of every screen-space covariance.
pub const COV2D_DILATION: f64 = 0.3;

/// Default near clipping distance in world units.
pub const DEFAULT_NEAR: f64 = 0.01;

/// Smallest scale an optimizer may leave behind.
pub const MIN_SCALE: f64 = 1e-6;

pub const IDENTITY_QUAT: [f64; 4] = [1.0, 0.0, 0.0, 0.0];

/// One anisotropic 3D Gaussian.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gaussian3D {
    pub position: Vector3<f64>,
    /// Linear (not log) per-axis standard deviations; strictly positive.
    pub scale: Vector3<f64>,
    pub rotation: Quat,
    pub opacity: f64,
    pub color: Vector3<f64>,
}

impl Gaussian3D {
    pub fn new(position: Vector3<f64>, scale: Vector3<f64>, rotation: Quat, opacity: f64, color: Vector3<f64>) -> Self {
        Self { position, scale, rotation, opacity, color }
    }

    pub fn isotropic(position: Vector3<f64>, scale: f64, opacity: f64, color: Vector3<f64>) -> Self {
        Self::new(position, Vector3::repeat(scale), Quat::from(IDENTITY_QUAT), opacity, color)
    }

    pub fn covariance(&self) -> Result<Matrix3<f64>> {
        build_covariance(&self.scale, &self.rotation)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.position.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidParameter("non-finite position".into()));
        }
        if self.scale.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidParameter(format!("scale must be positive, got {:?}", self.scale.as_slice())));
        }
        if !(self.rotation.norm() > 0.0) {
            return Err(Error::InvalidParameter("zero quaternion".into()));
        }
        if !(self.opacity >= 0.0) {
            return Err(Error::InvalidParameter(format!("opacity must be non-negative, got {}", self.opacity)));
        }
        Ok(())
    }
}

/// Canonical scene state: an ordered list of Gaussians.
pub type GaussianSet = Vec<Gaussian3D>;

/// Normalizes `q`, returning the identity for a zero quaternion.
pub fn normalize_quat(q: &Quat) -> Quat {
    let n = q.norm();
    if n > 0.0 {
        q / n
    } else {
        Quat::from(IDENTITY_QUAT)
    }
}

/// Rotation matrix of the (normalized) quaternion `q`.
pub fn rotation_matrix(q: &Quat) -> Matrix3<f64> {
    let q = normalize_quat(q);
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Pulls a gradient w.r.t. the rotation matrix back to the raw (unnormalized) quaternion.
pub fn rotation_matrix_backward(q: &Quat, d_rot: &Matrix3<f64>) -> Quat {
    let norm = q.norm();
    let qn = normalize_quat(q);
    let (w, x, y, z) = (qn[0], qn[1], qn[2], qn[3]);
    let g = d_rot;
    let dw = 2.0 * (-z * g[(0, 1)] + y * g[(0, 2)] + z * g[(1, 0)] - x * g[(1, 2)] - y * g[(2, 0)] + x * g[(2, 1)]);
    let dx = 2.0 * (y * g[(0, 1)] + z * g[(0, 2)] + y * g[(1, 0)] - 2.0 * x * g[(1, 1)] - w * g[(1, 2)] + z * g[(2, 0)]
        + w * g[(2, 1)]
        - 2.0 * x * g[(2, 2)]);
    let dy = 2.0 * (-2.0 * y * g[(0, 0)] + x * g[(0, 1)] + w * g[(0, 2)] + x * g[(1, 0)] + z * g[(1, 2)] - w * g[(2, 0)]
        + z * g[(2, 1)]
        - 2.0 * y * g[(2, 2)]);
    let dz = 2.0 * (-2.0 * z * g[(0, 0)] - w * g[(0, 1)] + x * g[(0, 2)] + w * g[(1, 0)] - 2.0 * z * g[(1, 1)]
        + y * g[(1, 2)]
        + x * g[(2, 0)]
        + y * g[(2, 1)]);
    let d_unit = Quat::new(dw, dx, dy, dz);
    if norm > 0.0 {
        (d_unit - qn * qn.dot(&d_unit)) / norm
    } else {
        Quat::zeros()
    }
}

/// `R S Sᵀ Rᵀ` for per-axis scales `s` and rotation `q`.
pub fn build_covariance(scale: &Vector3<f64>, q: &Quat) -> Result<Matrix3<f64>> {
    if scale.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::InvalidParameter(format!("scale must be positive, got {:?}", scale.as_slice())));
    }
    let r = rotation_matrix(q);
    let m = r * Matrix3::from_diagonal(scale);
    Ok(m * m.transpose())
}

/// Gradients of `build_covariance` w.r.t. scale and raw quaternion given `dL/dΣ`.
pub fn covariance_backward(scale: &Vector3<f64>, q: &Quat, d_cov: &Matrix3<f64>) -> (Vector3<f64>, Quat) {
    let g = 0.5 * (d_cov + d_cov.transpose());
    let r = rotation_matrix(q);
    let rgr = r.transpose() * g * r;
    let d_scale = Vector3::new(2.0 * scale[0] * rgr[(0, 0)], 2.0 * scale[1] * rgr[(1, 1)], 2.0 * scale[2] * rgr[(2, 2)]);
    let d2 = Matrix3::from_diagonal(&scale.component_mul(scale));
    let d_rot = 2.0 * g * r * d2;
    (d_scale, rotation_matrix_backward(q, &d_rot))
}

/// Pinhole camera with an OpenCV-style frame (x right, y down, z forward).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    /// Rotation block of the world-to-camera transform.
    pub rotation: Matrix3<f64>,
    /// Translation of the world-to-camera transform.
    pub translation: Vector3<f64>,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub near: f64,
}

impl Camera {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let cam = Self { rotation, translation, fx, fy, cx, cy, width, height, near: DEFAULT_NEAR };
        cam.validate()?;
        Ok(cam)
    }

    /// Camera at `eye` looking at `target`, vertical field of view `fov_y` in radians.
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        fov_y: f64,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let forward = (target - eye).normalize();
        let right = forward.cross(&up);
        if right.norm() < 1e-12 {
            return Err(Error::InvalidParameter("look_at: up is parallel to the view direction".into()));
        }
        let right = right.normalize();
        let down = forward.cross(&right);
        let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let translation = -(rotation * eye);
        let f = 0.5 * height as f64 / (0.5 * fov_y).tan();
        Self::new(rotation, translation, f, f, 0.5 * width as f64, 0.5 * height as f64, width, height)
    }

    pub fn validate(&self) -> Result<()> {
        let err = (self.rotation * self.rotation.transpose() - Matrix3::identity()).abs().max();
        if !(err <= 1e-9) {
            return Err(Error::InvalidParameter(format!("camera rotation not orthonormal (error {err:e})")));
        }
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::InvalidParameter("focal lengths must be positive".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidParameter("image size must be at least 1x1".into()));
        }
        Ok(())
    }

    pub fn to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Pinhole Jacobian of the screen projection at camera-space point `t`.
    pub fn jacobian(&self, t: &Vector3<f64>) -> Matrix2x3<f64> {
        let iz = 1.0 / t.z;
        let iz2 = iz * iz;
        Matrix2x3::new(self.fx * iz, 0.0, -self.fx * t.x * iz2, 0.0, self.fy * iz, -self.fy * t.y * iz2)
    }

    pub fn project_point(&self, t: &Vector3<f64>) -> Vector2<f64> {
        Vector2::new(self.fx * t.x / t.z + self.cx, self.fy * t.y / t.z + self.cy)
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }
}

/// A Gaussian after projection onto the image plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectedGaussian {
    /// Screen-space mean in pixels.
    pub mean: Vector2<f64>,
    /// Screen-space covariance (px²), dilation included.
    pub cov: Matrix2<f64>,
    pub depth: f64,
    pub index: usize,
    /// Camera-space position.
    pub cam_pos: Vector3<f64>,
}

impl ProjectedGaussian {
    /// Inverse of the screen covariance.
    pub fn conic(&self) -> Result<Matrix2<f64>> {
        let det = self.cov.determinant();
        if !(det > 0.0) || !det.is_finite() {
            return Err(Error::NumericalDegeneracy(format!("singular screen covariance (det {det:e})")));
        }
        let c = &self.cov;
        Ok(Matrix2::new(c[(1, 1)], -c[(0, 1)], -c[(1, 0)], c[(0, 0)]) / det)
    }

    /// Largest eigenvalue of the screen covariance.
    pub fn max_eigenvalue(&self) -> f64 {
        let (a, b, c) = (self.cov[(0, 0)], 0.5 * (self.cov[(0, 1)] + self.cov[(1, 0)]), self.cov[(1, 1)]);
        let mid = 0.5 * (a + c);
        mid + (0.25 * (a - c) * (a - c) + b * b).sqrt()
    }
}

/// `J W Σ Wᵀ Jᵀ` without the dilation term, for a camera-space point `t`.
pub fn screen_covariance(cam: &Camera, t: &Vector3<f64>, cov3: &Matrix3<f64>) -> Matrix2<f64> {
    let j = cam.jacobian(t);
    let m = cam.rotation * cov3 * cam.rotation.transpose();
    j * m * j.transpose()
}

/// Projects `g` (with source index `index`) through `cam`; `Ok(None)` when culled by the near plane.
pub fn project_gaussian(g: &Gaussian3D, index: usize, cam: &Camera) -> Result<Option<ProjectedGaussian>> {
    let t = cam.to_camera(&g.position);
    if !(t.z > cam.near) {
        return Ok(None);
    }
    let cov3 = g.covariance()?;
    let cov = screen_covariance(cam, &t, &cov3) + Matrix2::identity() * COV2D_DILATION;
    Ok(Some(ProjectedGaussian { mean: cam.project_point(&t), cov, depth: t.z, index, cam_pos: t }))
}

/// `exp(-½ dᵀ Σ′⁻¹ d)` with `d = x - mean`.
pub fn eval_density(pg: &ProjectedGaussian, x: &Vector2<f64>) -> Result<f64> {
    let conic = pg.conic()?;
    let d = x - pg.mean;
    Ok((-0.5 * d.dot(&(conic * d))).exp())
}
