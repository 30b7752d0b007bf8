//! Closed-form symmetric 3×3 eigendecomposition, eigenvalue gradients and the
//! Huber penalty used by spectral regularization.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};

pub const DEFAULT_HUBER_DELTA: f64 = 1.0;

/// Eigenpairs of a symmetric 3×3 matrix, eigenvalues ascending.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EigenResult {
    pub values: [f64; 3],
    pub vectors: [Vector3<f64>; 3],
    /// Some pair of eigenvalues is closer than `1e-9·max(1, ‖K‖)`.
    pub degenerate: bool,
}

/// Eigendecomposition of `k` (symmetrized first).
///
/// Trigonometric solution of the characteristic cubic on the shifted and
/// scaled matrix, one guarded Newton step per root, and eigenvectors from
/// row cross products plus a 2×2 solve in the orthogonal complement. The
/// reported eigenvalues are the Rayleigh quotients of those eigenvectors.
pub fn eig3_sym(k: &Matrix3<f64>) -> Result<EigenResult> {
    if k.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("eig3_sym: non-finite matrix entry".into()));
    }
    let a = 0.5 * (k + k.transpose());
    let max_abs = a.abs().max();
    if max_abs == 0.0 {
        return Ok(EigenResult {
            values: [0.0; 3],
            vectors: [Vector3::x(), Vector3::y(), Vector3::z()],
            degenerate: true,
        });
    }
    let s = a / max_abs;
    let off = s[(0, 1)] * s[(0, 1)] + s[(0, 2)] * s[(0, 2)] + s[(1, 2)] * s[(1, 2)];

    let (mut values, mut vectors) = if off > 0.0 {
        let q = s.trace() / 3.0;
        let b00 = s[(0, 0)] - q;
        let b11 = s[(1, 1)] - q;
        let b22 = s[(2, 2)] - q;
        let p = ((b00 * b00 + b11 * b11 + b22 * b22 + 2.0 * off) / 6.0).sqrt();
        let c00 = b11 * b22 - s[(1, 2)] * s[(1, 2)];
        let c01 = s[(0, 1)] * b22 - s[(1, 2)] * s[(0, 2)];
        let c02 = s[(0, 1)] * s[(1, 2)] - b11 * s[(0, 2)];
        let det = (b00 * c00 - s[(0, 1)] * c01 + s[(0, 2)] * c02) / (p * p * p);
        let half_det = (0.5 * det).clamp(-1.0, 1.0);
        let angle = half_det.acos() / 3.0;
        let beta2 = 2.0 * angle.cos();
        let beta0 = 2.0 * (angle + 2.0 * PI / 3.0).cos();
        let beta1 = -(beta0 + beta2);
        let mut values = [q + p * beta0, q + p * beta1, q + p * beta2];
        for v in &mut values {
            *v = newton_polish(&s, *v);
        }
        let vectors = if half_det >= 0.0 {
            let v2 = eigenvector_from_rows(&s, values[2]);
            let v1 = eigenvector_in_complement(&s, &v2, values[1]);
            [v1.cross(&v2), v1, v2]
        } else {
            let v0 = eigenvector_from_rows(&s, values[0]);
            let v1 = eigenvector_in_complement(&s, &v0, values[1]);
            [v0, v1, v0.cross(&v1)]
        };
        // Rayleigh quotients stay accurate at (near-)repeated roots, where acos loses ~√ε
        for (value, v) in values.iter_mut().zip(&vectors) {
            let v = v.normalize();
            *value = v.dot(&(s * v));
        }
        (values, vectors)
    } else {
        ([s[(0, 0)], s[(1, 1)], s[(2, 2)]], [Vector3::x(), Vector3::y(), Vector3::z()])
    };

    // ascending, stable in the solver's slot order
    let mut order = [0usize, 1, 2];
    order.sort_by(|&i, &j| values[i].total_cmp(&values[j]).then(i.cmp(&j)));
    let sorted_values = order.map(|i| values[i] * max_abs);
    let sorted_vectors = order.map(|i| canonical_sign(vectors[i].normalize()));
    values = sorted_values;
    vectors = sorted_vectors;

    let gap_tol = 1e-9 * a.norm().max(1.0);
    let degenerate = values[1] - values[0] < gap_tol || values[2] - values[1] < gap_tol;
    Ok(EigenResult { values, vectors, degenerate })
}

fn char_poly(s: &Matrix3<f64>, x: f64) -> (f64, f64) {
    // det(S - xI) = -x³ + tr x² - c x + det
    let tr = s.trace();
    let c = s[(0, 0)] * s[(1, 1)] + s[(0, 0)] * s[(2, 2)] + s[(1, 1)] * s[(2, 2)]
        - s[(0, 1)] * s[(1, 0)]
        - s[(0, 2)] * s[(2, 0)]
        - s[(1, 2)] * s[(2, 1)];
    let det = s.determinant();
    let f = ((-x + tr) * x - c) * x + det;
    let df = (-3.0 * x + 2.0 * tr) * x - c;
    (f, df)
}

fn newton_polish(s: &Matrix3<f64>, x: f64) -> f64 {
    let (f, df) = char_poly(s, x);
    if df == 0.0 || f == 0.0 {
        return x;
    }
    let candidate = x - f / df;
    let (fc, _) = char_poly(s, candidate);
    if candidate.is_finite() && fc.abs() < f.abs() && (candidate - x).abs() < 1e-6 {
        candidate
    } else {
        x
    }
}

fn eigenvector_from_rows(s: &Matrix3<f64>, value: f64) -> Vector3<f64> {
    let r0 = Vector3::new(s[(0, 0)] - value, s[(0, 1)], s[(0, 2)]);
    let r1 = Vector3::new(s[(0, 1)], s[(1, 1)] - value, s[(1, 2)]);
    let r2 = Vector3::new(s[(0, 2)], s[(1, 2)], s[(2, 2)] - value);
    let c = [r0.cross(&r1), r0.cross(&r2), r1.cross(&r2)];
    let best = (0..3).max_by(|&i, &j| c[i].norm_squared().total_cmp(&c[j].norm_squared()).then(j.cmp(&i))).unwrap();
    let n = c[best].norm();
    if n > 0.0 {
        c[best] / n
    } else {
        Vector3::x()
    }
}

fn orthogonal_complement(w: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let u = if w.x.abs() > w.y.abs() {
        let inv = 1.0 / (w.x * w.x + w.z * w.z).sqrt();
        Vector3::new(-w.z * inv, 0.0, w.x * inv)
    } else {
        let inv = 1.0 / (w.y * w.y + w.z * w.z).sqrt();
        Vector3::new(0.0, w.z * inv, -w.y * inv)
    };
    (u, w.cross(&u))
}

fn eigenvector_in_complement(s: &Matrix3<f64>, known: &Vector3<f64>, value: f64) -> Vector3<f64> {
    let (u, v) = orthogonal_complement(known);
    let au = s * u;
    let av = s * v;
    let mut m00 = u.dot(&au) - value;
    let mut m01 = u.dot(&av);
    let mut m11 = v.dot(&av) - value;
    let (a00, a01, a11) = (m00.abs(), m01.abs(), m11.abs());
    if a00 >= a11 {
        if a00.max(a01) > 0.0 {
            if a00 >= a01 {
                m01 /= m00;
                m00 = 1.0 / (1.0 + m01 * m01).sqrt();
                m01 *= m00;
            } else {
                m00 /= m01;
                m01 = 1.0 / (1.0 + m00 * m00).sqrt();
                m00 *= m01;
            }
            m01 * u - m00 * v
        } else {
            u
        }
    } else if a11.max(a01) > 0.0 {
        if a11 >= a01 {
            m01 /= m11;
            m11 = 1.0 / (1.0 + m01 * m01).sqrt();
            m01 *= m11;
        } else {
            m11 /= m01;
            m01 = 1.0 / (1.0 + m11 * m11).sqrt();
            m11 *= m01;
        }
        m11 * u - m01 * v
    } else {
        u
    }
}

/// Flips `v` so its first clearly nonzero component is positive.
fn canonical_sign(v: Vector3<f64>) -> Vector3<f64> {
    match v.iter().find(|c| c.abs() > 1e-12) {
        Some(&c) if c < 0.0 => -v,
        _ => v,
    }
}

/// `dL/dK = Σ_r (dL/dσ_r) v_r v_rᵀ`.
pub fn eigenvalue_backward(res: &EigenResult, d_values: &[f64; 3]) -> Matrix3<f64> {
    let mut out = Matrix3::zeros();
    for (v, &g) in res.vectors.iter().zip(d_values) {
        out += g * v * v.transpose();
    }
    out
}

/// Huber penalty of the residual `a - b`.
pub fn huber(a: f64, b: f64, delta: f64) -> f64 {
    let r = (a - b).abs();
    if r <= delta {
        0.5 * r * r
    } else {
        delta * (r - 0.5 * delta)
    }
}

/// Derivative of [`huber`] with respect to `a` (negate for `b`).
pub fn huber_grad(a: f64, b: f64, delta: f64) -> f64 {
    let r = a - b;
    if r.abs() <= delta {
        r
    } else {
        delta * r.signum()
    }
}
