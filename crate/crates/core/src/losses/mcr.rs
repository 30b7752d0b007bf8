use nalgebra::Vector3;

use super::TermResult;

pub const DEFAULT_EPSILON: f64 = 1e-8;

/// Members moving less than this (world units) are not penalized.
pub const DEFAULT_MOTION_THRESHOLD: f64 = 1e-4;

/// Mean over moving (group, member) pairs of `1 - d_i·d̄ / (‖d_i‖‖d̄‖ + ε)`.
///
/// `d̄` averages the displacements of every group member, moving or not, so
/// each pair's gradient reaches all members of its group.
pub fn mcr_loss(
    groups: &[Vec<usize>],
    pos_t: &[Vector3<f64>],
    pos_t2: &[Vector3<f64>],
    epsilon: f64,
    motion_threshold: f64,
) -> TermResult {
    let mut res = TermResult::zero(pos_t.len());
    let mut sum = 0.0;
    let mut disp = Vec::new();
    for members in groups.iter().filter(|g| !g.is_empty()) {
        disp.clear();
        disp.extend(members.iter().map(|&i| pos_t2[i] - pos_t[i]));
        let inv_n = 1.0 / members.len() as f64;
        let mean = disp.iter().sum::<Vector3<f64>>() * inv_n;
        let mean_norm = mean.norm();
        let mut d_mean = Vector3::zeros();
        for (slot, &i) in members.iter().enumerate() {
            let d = disp[slot];
            let d_norm = d.norm();
            if !(d_norm > motion_threshold) {
                continue;
            }
            let dot = d.dot(&mean);
            let denom = d_norm * mean_norm + epsilon;
            sum += 1.0 - dot / denom;
            res.count += 1;

            let scale = dot / (denom * denom);
            let g_d = -(mean / denom - scale * mean_norm * d / d_norm);
            let g_mean = if mean_norm > 0.0 { -(d / denom - scale * d_norm * mean / mean_norm) } else { -d / denom };
            res.grad_t2[i] += g_d;
            res.grad_t[i] -= g_d;
            d_mean += g_mean;
        }
        if d_mean != Vector3::zeros() {
            let share = d_mean * inv_n;
            for &i in members {
                res.grad_t2[i] += share;
                res.grad_t[i] -= share;
            }
        }
    }
    res.finish(sum)
}
