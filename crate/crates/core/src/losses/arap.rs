use nalgebra::{Matrix3, Vector3};

use super::TermResult;

/// Who is compared with whom inside one ARAP term.
#[derive(Debug, Clone, PartialEq)]
pub enum Neighborhood {
    /// Pairs `(anchor, j)` for every listed neighbour, e.g. a KNN list.
    Anchored { anchor: usize, neighbors: Vec<usize> },
    /// Every unordered pair of members, e.g. a ray group.
    Clique(Vec<usize>),
}

impl Neighborhood {
    fn pairs(&self) -> Vec<(usize, usize)> {
        match self {
            Neighborhood::Anchored { anchor, neighbors } => {
                neighbors.iter().filter(|&&j| j != *anchor).map(|&j| (*anchor, j)).collect()
            }
            Neighborhood::Clique(m) => {
                let mut out = Vec::with_capacity(m.len() * m.len().saturating_sub(1) / 2);
                for (a, &i) in m.iter().enumerate() {
                    for &j in &m[a + 1..] {
                        if i != j {
                            out.push((i, j));
                        }
                    }
                }
                out
            }
        }
    }
}

/// Proper rotation minimizing `Σ‖dst_k − R·src_k‖²` (SVD of the
/// cross-covariance, reflection corrected).
pub fn procrustes_rotation(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> Matrix3<f64> {
    let mut h = Matrix3::zeros();
    for (a, b) in src.iter().zip(dst) {
        h += a * b.transpose();
    }
    let svd = h.svd(true, true);
    let (u, v_t) = (svd.u.expect("u requested"), svd.v_t.expect("v_t requested"));
    let v = v_t.transpose();
    let d = (v * u.transpose()).determinant().signum();
    v * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, if d == 0.0 { 1.0 } else { d })) * u.transpose()
}

/// Mean over all neighbour pairs of `‖(x′_i − x′_j) − R(x_i − x_j)‖²`, one
/// rotation per neighbourhood. Rotations are held fixed in the gradient.
pub fn arap_loss(neighborhoods: &[Neighborhood], pos_t: &[Vector3<f64>], pos_t2: &[Vector3<f64>]) -> TermResult {
    let mut res = TermResult::zero(pos_t.len());
    let mut sum = 0.0;
    let mut src = Vec::new();
    let mut dst = Vec::new();
    for hood in neighborhoods {
        let pairs = hood.pairs();
        if pairs.is_empty() {
            continue;
        }
        src.clear();
        dst.clear();
        match hood {
            Neighborhood::Anchored { .. } => {
                for &(i, j) in &pairs {
                    src.push(pos_t[j] - pos_t[i]);
                    dst.push(pos_t2[j] - pos_t2[i]);
                }
            }
            Neighborhood::Clique(m) => {
                let n = m.len() as f64;
                let c = m.iter().map(|&i| pos_t[i]).sum::<Vector3<f64>>() / n;
                let c2 = m.iter().map(|&i| pos_t2[i]).sum::<Vector3<f64>>() / n;
                src.extend(m.iter().map(|&i| pos_t[i] - c));
                dst.extend(m.iter().map(|&i| pos_t2[i] - c2));
            }
        }
        let rot = procrustes_rotation(&src, &dst);
        for (i, j) in pairs {
            let r = (pos_t2[i] - pos_t2[j]) - rot * (pos_t[i] - pos_t[j]);
            sum += r.norm_squared();
            res.count += 1;
            let back = rot.transpose() * r * 2.0;
            res.grad_t2[i] += 2.0 * r;
            res.grad_t2[j] -= 2.0 * r;
            res.grad_t[i] -= back;
            res.grad_t[j] += back;
        }
    }
    res.finish(sum)
}
