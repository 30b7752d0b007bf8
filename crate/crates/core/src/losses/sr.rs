use nalgebra::Vector3;

use super::TermResult;
use crate::error::Result;
use crate::spectral::{eig3_sym, eigenvalue_backward, huber, huber_grad};
use crate::streaming_stats::{covariance_backward, GroupStats};

/// Mean over groups with more than one member of
/// `Σ_r Huber(σ_{t,r}, σ_{t+Δt,r})`, eigenvalues ascending.
///
/// Both covariances use the same member list (the one found at time `t`),
/// accumulated in the given member order.
pub fn sr_loss(groups: &[Vec<usize>], pos_t: &[Vector3<f64>], pos_t2: &[Vector3<f64>], delta: f64) -> Result<TermResult> {
    let mut res = TermResult::zero(pos_t.len());
    let mut sum = 0.0;
    for members in groups.iter().filter(|g| g.len() > 1) {
        let stats_t = GroupStats::from_points(members.iter().map(|&i| &pos_t[i]));
        let stats_t2 = GroupStats::from_points(members.iter().map(|&i| &pos_t2[i]));
        let eig_t = eig3_sym(stats_t.covariance())?;
        let eig_t2 = eig3_sym(stats_t2.covariance())?;
        let mut d_t = [0.0; 3];
        let mut d_t2 = [0.0; 3];
        for r in 0..3 {
            let (a, b) = (eig_t.values[r], eig_t2.values[r]);
            sum += huber(a, b, delta);
            let g = huber_grad(a, b, delta);
            d_t[r] = g;
            d_t2[r] = -g;
        }
        res.count += 1;
        let g_t = covariance_backward(&stats_t, &eigenvalue_backward(&eig_t, &d_t))?;
        let g_t2 = covariance_backward(&stats_t2, &eigenvalue_backward(&eig_t2, &d_t2))?;
        for ((&i, a), b) in members.iter().zip(g_t).zip(g_t2) {
            res.grad_t[i] += a;
            res.grad_t2[i] += b;
        }
    }
    Ok(res.finish(sum))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{finite_diff_gradient, FiniteDiffConfig};
    use crate::spectral::DEFAULT_HUBER_DELTA;
    use crate::types::{rotation_matrix, Quat};
    use nalgebra::Matrix3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vector3<f64>> {
        (0..n).map(|_| Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-0.5..0.5), rng.gen_range(-0.2..0.2))).collect()
    }

    fn random_rotation(rng: &mut ChaCha8Rng) -> Matrix3<f64> {
        rotation_matrix(&Quat::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
    }

    #[test]
    fn rigid_motion_has_zero_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pos_t = random_points(&mut rng, 10);
        let r = random_rotation(&mut rng);
        let shift = Vector3::new(0.3, -2.0, 1.0);
        let pos_t2: Vec<_> = pos_t.iter().map(|p| r * p + shift).collect();
        let res = sr_loss(&[(0..10).collect()], &pos_t, &pos_t2, DEFAULT_HUBER_DELTA).unwrap();
        assert_eq!(res.count, 1);
        assert!(res.value < 1e-9);
    }

    #[test]
    fn dilation_example() {
        // principal axes along x, y, z with variances 0.01, 0.02, 0.03
        let (a, b, c) = (0.01f64.sqrt(), 0.02f64.sqrt(), 0.03f64.sqrt());
        let pos_t = vec![
            Vector3::new(a, 0.0, 0.0),
            Vector3::new(-a, 0.0, 0.0),
            Vector3::new(0.0, b, 0.0),
            Vector3::new(0.0, -b, 0.0),
            Vector3::new(0.0, 0.0, c),
            Vector3::new(0.0, 0.0, -c),
        ];
        // the six points give variances (a²/3, b²/3, c²/3); rescale to hit (0.01, 0.02, 0.03)
        let pos_t: Vec<_> = pos_t.iter().map(|p| p * 3f64.sqrt()).collect();
        let k = GroupStats::from_points(&pos_t).finalize().unwrap().1;
        assert!((k - Matrix3::from_diagonal(&Vector3::new(0.01, 0.02, 0.03))).abs().max() < 1e-15);
        let centroid = Vector3::zeros();
        let pos_t2: Vec<_> = pos_t.iter().map(|p| centroid + 2.0 * (p - centroid)).collect();
        let res = sr_loss(&[(0..6).collect()], &pos_t, &pos_t2, 1.0).unwrap();
        let expected = 0.5 * (0.03f64.powi(2) + 0.06f64.powi(2) + 0.09f64.powi(2));
        assert!((res.value - expected).abs() < 1e-12, "{} vs {expected}", res.value);
        assert!((expected - 0.0063).abs() < 1e-15);
    }

    #[test]
    fn singletons_are_skipped() {
        let pos = vec![Vector3::zeros(), Vector3::new(1.0, 0.0, 0.0)];
        let moved = vec![Vector3::new(0.5, 0.0, 0.0), Vector3::new(3.0, 0.0, 0.0)];
        let res = sr_loss(&[vec![0], vec![1]], &pos, &moved, 1.0).unwrap();
        assert_eq!(res.count, 0);
        assert_eq!(res.value, 0.0);
    }

    #[test]
    fn anisotropic_stretch_is_penalized() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pos_t = random_points(&mut rng, 8);
        let pos_t2: Vec<_> = pos_t.iter().map(|p| Vector3::new(2.0 * p.x, p.y, p.z)).collect();
        assert!(sr_loss(&[(0..8).collect()], &pos_t, &pos_t2, 1.0).unwrap().value > 0.0);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for size in [3, 7, 20] {
            let pos_t = random_points(&mut rng, size);
            let pos_t2: Vec<_> = pos_t
                .iter()
                .map(|p| p + Vector3::new(rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3)))
                .collect();
            let groups = vec![(0..size).collect::<Vec<_>>()];
            // a small δ exercises both Huber branches
            let delta = 0.01;
            let res = sr_loss(&groups, &pos_t, &pos_t2, delta).unwrap();
            let flat: Vec<f64> = pos_t.iter().chain(&pos_t2).flat_map(|p| p.iter().copied()).collect();
            let cfg = FiniteDiffConfig::new(1e-6, 1e-4, 1e-9).unwrap();
            let fd = finite_diff_gradient(
                |x| {
                    let pts: Vec<_> = x.chunks(3).map(|c| Vector3::new(c[0], c[1], c[2])).collect();
                    sr_loss(&groups, &pts[..size], &pts[size..], delta).unwrap().value
                },
                &flat,
                &cfg,
            )
            .unwrap();
            let analytic: Vec<f64> = res.grad_t.iter().chain(&res.grad_t2).flat_map(|p| p.iter().copied()).collect();
            for (k, (a, b)) in analytic.iter().zip(&fd).enumerate() {
                assert!(cfg.accepts(*a, *b), "size {size} coordinate {k}: {a} vs {b}");
            }
        }
    }
}
