//! Brute-force reference computations.
//!
//! Nothing in here calls into the modules it is used to check: covariance is
//! computed in two explicit passes, blending walks the fragment list with a
//! literal running product, gradients come from central differences and
//! neighbour search sorts every pair.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FiniteDiffConfig {
    pub step: f64,
    pub rel_tolerance: f64,
    pub abs_floor: f64,
}

impl FiniteDiffConfig {
    pub const POSITIONS: Self = Self { step: 1e-5, rel_tolerance: 1e-3, abs_floor: 1e-8 };
    pub const OPACITY: Self = Self { step: 1e-6, rel_tolerance: 1e-3, abs_floor: 1e-8 };

    pub fn new(step: f64, rel_tolerance: f64, abs_floor: f64) -> Result<Self> {
        if !(step > 0.0) || !(rel_tolerance > 0.0) || !(abs_floor >= 0.0) {
            return Err(Error::InvalidParameter("finite-difference step and tolerance must be positive".into()));
        }
        Ok(Self { step, rel_tolerance, abs_floor })
    }

    /// Whether `analytic` agrees with `numeric` under this tolerance.
    pub fn accepts(&self, analytic: f64, numeric: f64) -> bool {
        let err = (analytic - numeric).abs();
        err <= self.abs_floor || err <= self.rel_tolerance * analytic.abs().max(numeric.abs())
    }
}

impl Default for FiniteDiffConfig {
    fn default() -> Self {
        Self::POSITIONS
    }
}

/// Population mean and covariance in two passes.
pub fn twopass_covariance(points: &[Vector3<f64>]) -> Result<(Vector3<f64>, Matrix3<f64>)> {
    if points.is_empty() {
        return Err(Error::EmptyGroup);
    }
    let n = points.len() as f64;
    let mut mean = [0.0; 3];
    for p in points {
        for a in 0..3 {
            mean[a] += p[a];
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    let mut k = [[0.0; 3]; 3];
    for p in points {
        for a in 0..3 {
            for b in 0..3 {
                k[a][b] += (p[a] - mean[a]) * (p[b] - mean[b]);
            }
        }
    }
    let cov = Matrix3::from_fn(|a, b| k[a][b] / n);
    Ok((Vector3::new(mean[0], mean[1], mean[2]), cov))
}

/// Central-difference gradient of `f` at `x`.
pub fn finite_diff_gradient<F>(mut f: F, x: &[f64], cfg: &FiniteDiffConfig) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut work = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for k in 0..x.len() {
        work[k] = x[k] + cfg.step;
        let fp = f(&work);
        work[k] = x[k] - cfg.step;
        let fm = f(&work);
        work[k] = x[k];
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite { coordinate: k });
        }
        grad.push((fp - fm) / (2.0 * cfg.step));
    }
    Ok(grad)
}

/// Literal front-to-back evaluation of `C = Σ T_i (1 - e^{-α_i}) c_i + T_{N+1} bg`.
pub fn reference_blend(fragments: &[(f64, [f64; 3])], background: [f64; 3]) -> [f64; 3] {
    let mut out = [0.0; 3];
    for (i, (alpha, color)) in fragments.iter().enumerate() {
        let mut exponent = 0.0;
        for (a, _) in &fragments[..i] {
            exponent += a;
        }
        let t = (-exponent).exp();
        for ch in 0..3 {
            out[ch] += t * (1.0 - (-alpha).exp()) * color[ch];
        }
    }
    let total: f64 = fragments.iter().map(|(a, _)| a).sum();
    let t_end = (-total).exp();
    for ch in 0..3 {
        out[ch] += t_end * background[ch];
    }
    out
}

/// All-pairs nearest neighbours sorted by (distance, index), excluding self.
pub fn brute_force_knn(points: &[Vector3<f64>], k: usize) -> Vec<Vec<usize>> {
    points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mut all: Vec<(f64, usize)> = points
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(j, q)| ((p - q).norm_squared(), j))
                .collect();
            all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            all.into_iter().take(k).map(|(_, j)| j).collect()
        })
        .collect()
}

/// Best-fit proper rotation mapping `src` vectors onto `dst` vectors, via the
/// quaternion (Horn) method. Independent of any SVD.
pub fn horn_rotation(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> Matrix3<f64> {
    let mut s = Matrix3::zeros();
    for (a, b) in src.iter().zip(dst) {
        s += a * b.transpose();
    }
    let (sxx, sxy, sxz) = (s[(0, 0)], s[(0, 1)], s[(0, 2)]);
    let (syx, syy, syz) = (s[(1, 0)], s[(1, 1)], s[(1, 2)]);
    let (szx, szy, szz) = (s[(2, 0)], s[(2, 1)], s[(2, 2)]);
    let n = nalgebra::Matrix4::new(
        sxx + syy + szz,
        syz - szy,
        szx - sxz,
        sxy - syx,
        syz - szy,
        sxx - syy - szz,
        sxy + syx,
        szx + sxz,
        szx - sxz,
        sxy + syx,
        -sxx + syy - szz,
        syz + szy,
        sxy - syx,
        szx + sxz,
        syz + szy,
        -sxx - syy + szz,
    );
    let eig = n.symmetric_eigen();
    let (best, _) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .expect("4 eigenvalues");
    let q = eig.eigenvectors.column(best);
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    Matrix3::new(
        w * w + x * x - y * y - z * z,
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        w * w - x * x + y * y - z * z,
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        w * w - x * x - y * y + z * z,
    )
}
