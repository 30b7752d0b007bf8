//! The oracle suite behind `rrgs verify`: every analytic path compared with
//! its brute-force reference, with a report of the worst error per check.

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{mcr_loss, photometric_loss, sr_loss, DEFAULT_EPSILON, DEFAULT_MOTION_THRESHOLD};
use crate::oracle::{finite_diff_gradient, reference_blend, twopass_covariance, FiniteDiffConfig};
use crate::rasterizer::{flatten_gaussians, render, render_backward, unflatten_gaussians, Image, RenderOptions, PARAMS_PER_GAUSSIAN};
use crate::spectral::{eig3_sym, eigenvalue_backward};
use crate::streaming_stats::{covariance_backward, GroupStats};
use crate::types::{normalize_quat, Camera, Gaussian3D, Quat};

/// Deliberate defects for checking that the suite catches them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Fault {
    /// Negates the covariance gradient before it is compared.
    CovarianceBackwardSign,
}

impl std::str::FromStr for Fault {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "covariance-backward-sign" => Ok(Fault::CovarianceBackwardSign),
            other => Err(Error::InvalidParameter(format!("unknown fault {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    /// Number of scalar comparisons.
    pub compared: usize,
    pub max_abs_error: f64,
    /// Worst relative error among comparisons above the absolute floor.
    pub max_rel_error: f64,
    pub rel_tolerance: f64,
    pub abs_floor: f64,
    pub passed: bool,
}

impl CheckResult {
    fn new(name: &str, rel_tolerance: f64, abs_floor: f64) -> Self {
        Self { name: name.into(), compared: 0, max_abs_error: 0.0, max_rel_error: 0.0, rel_tolerance, abs_floor, passed: true }
    }

    /// Values whose reference magnitude is below the floor must agree absolutely
    /// within the floor; all others relatively within the tolerance.
    fn compare(&mut self, value: f64, reference: f64) {
        self.compared += 1;
        let err = (value - reference).abs();
        self.max_abs_error = self.max_abs_error.max(err);
        if !err.is_finite() {
            self.passed = false;
            self.max_abs_error = f64::INFINITY;
            return;
        }
        if value.abs() < self.abs_floor && reference.abs() < self.abs_floor {
            self.passed &= err < self.abs_floor;
        } else {
            let rel = err / value.abs().max(reference.abs());
            self.max_rel_error = self.max_rel_error.max(rel);
            self.passed &= rel < self.rel_tolerance;
        }
    }

    fn compare_abs(&mut self, value: f64, reference: f64) {
        self.compared += 1;
        let err = (value - reference).abs();
        self.max_abs_error = self.max_abs_error.max(err);
        self.passed &= err < self.abs_floor;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub passed: bool,
    pub checks: Vec<CheckResult>,
}

impl VerifyReport {
    pub fn failed_checks(&self) -> Vec<&str> {
        self.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect()
    }
}

fn point(rng: &mut ChaCha8Rng, r: f64) -> Vector3<f64> {
    Vector3::new(rng.gen_range(-r..r), rng.gen_range(-r..r), rng.gen_range(-r..r))
}

fn random_symmetric(rng: &mut ChaCha8Rng) -> Matrix3<f64> {
    let a = Matrix3::from_fn(|_, _| rng.gen_range(-1.0..1.0));
    a + a.transpose()
}

fn flat(v: &[Vector3<f64>]) -> Vec<f64> {
    v.iter().flat_map(|p| p.iter().copied()).collect()
}

fn unflat(x: &[f64]) -> Vec<Vector3<f64>> {
    x.chunks(3).map(|c| Vector3::new(c[0], c[1], c[2])).collect()
}

/// Streaming covariance vs two-pass on random groups (sizes 1–100, coordinates in ±10).
pub fn welford_check(groups: usize, seed: u64) -> CheckResult {
    let mut res = CheckResult::new("welford_vs_twopass", f64::INFINITY, 1e-10);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..groups {
        let n = rng.gen_range(1..=100);
        let pts: Vec<_> = (0..n).map(|_| point(&mut rng, 10.0)).collect();
        let mut stats = GroupStats::without_history();
        for p in &pts {
            stats.update(p);
        }
        let (_, k) = stats.finalize().expect("non-empty");
        let (_, k2) = twopass_covariance(&pts).expect("non-empty");
        for (a, b) in k.iter().zip(k2.iter()) {
            res.compare_abs(*a, *b);
        }
    }
    res
}

/// `covariance_backward` vs central differences of `⟨A, K⟩` and `trace K`.
pub fn covariance_gradient_check(fault: Option<Fault>, seed: u64) -> Result<CheckResult> {
    let mut res = CheckResult::new("covariance_backward", 1e-5, 1e-9);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = FiniteDiffConfig::new(1e-6, 1e-5, 1e-9)?;
    for n in [2, 3, 5, 10, 30] {
        let pts: Vec<_> = (0..n).map(|_| point(&mut rng, 2.0)).collect();
        for a in [random_symmetric(&mut rng), Matrix3::identity()] {
            let stats = GroupStats::from_points(&pts);
            let mut analytic = flat(&covariance_backward(&stats, &a)?);
            if fault == Some(Fault::CovarianceBackwardSign) {
                analytic.iter_mut().for_each(|g| *g = -*g);
            }
            let numeric = finite_diff_gradient(|x| twopass_covariance(&unflat(x)).expect("non-empty").1.dot(&a), &flat(&pts), &cfg)?;
            for (x, y) in analytic.iter().zip(&numeric) {
                res.compare(*x, *y);
            }
        }
    }
    Ok(res)
}

/// `eigenvalue_backward` vs central differences of sorted eigenvalues.
pub fn eigen_gradient_check(seed: u64) -> Result<CheckResult> {
    let mut res = CheckResult::new("eigenvalue_backward", 1e-5, 1e-9);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = FiniteDiffConfig::new(1e-6, 1e-5, 1e-9)?;
    let mut done = 0;
    while done < 20 {
        let k = random_symmetric(&mut rng);
        let eig = eig3_sym(&k)?;
        if eig.values[1] - eig.values[0] < 1e-2 || eig.values[2] - eig.values[1] < 1e-2 {
            continue;
        }
        done += 1;
        let w = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
        let analytic = eigenvalue_backward(&eig, &w);
        // perturb the six free entries symmetrically; the gradient w.r.t. an
        // off-diagonal pair is the sum of the two mirrored entries
        let idx = [(0, 0), (1, 1), (2, 2), (0, 1), (0, 2), (1, 2)];
        let x0: Vec<f64> = idx.iter().map(|&(a, b)| k[(a, b)]).collect();
        let numeric = finite_diff_gradient(
            |x| {
                let mut m = Matrix3::zeros();
                for (&(a, b), v) in idx.iter().zip(x) {
                    m[(a, b)] = *v;
                    m[(b, a)] = *v;
                }
                // independent path: nalgebra's own symmetric solver
                let mut s: Vec<f64> = m.symmetric_eigenvalues().iter().copied().collect();
                s.sort_by(f64::total_cmp);
                s.iter().zip(&w).map(|(a, b)| a * b).sum()
            },
            &x0,
            &cfg,
        )?;
        for (&(a, b), y) in idx.iter().zip(&numeric) {
            let x = if a == b { analytic[(a, b)] } else { analytic[(a, b)] + analytic[(b, a)] };
            res.compare(x, *y);
        }
    }
    Ok(res)
}

fn displaced(rng: &mut ChaCha8Rng, n: usize) -> (Vec<Vector3<f64>>, Vec<Vector3<f64>>) {
    let a: Vec<_> = (0..n).map(|_| point(rng, 1.0)).collect();
    let b = a.iter().map(|p| p + point(rng, 0.3) + Vector3::new(0.1, 0.0, 0.0)).collect();
    (a, b)
}

fn position_loss_check(
    name: &str,
    seed: u64,
    f: impl Fn(&[Vec<usize>], &[Vector3<f64>], &[Vector3<f64>]) -> Result<(f64, Vec<Vector3<f64>>, Vec<Vector3<f64>>)>,
) -> Result<CheckResult> {
    let mut res = CheckResult::new(name, 1e-4, 1e-9);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = FiniteDiffConfig::new(1e-6, 1e-4, 1e-9)?;
    for size in [3, 5, 10, 20] {
        let (a, b) = displaced(&mut rng, size + 2);
        let groups = vec![(0..size).collect::<Vec<_>>(), vec![size - 1, size, size + 1]];
        let (_, ga, gb) = f(&groups, &a, &b)?;
        let n = a.len();
        let x0: Vec<f64> = flat(&a).into_iter().chain(flat(&b)).collect();
        let numeric = finite_diff_gradient(
            |x| {
                let p = unflat(x);
                f(&groups, &p[..n], &p[n..]).map(|r| r.0).unwrap_or(f64::NAN)
            },
            &x0,
            &cfg,
        )?;
        for (x, y) in flat(&ga).iter().chain(&flat(&gb)).zip(&numeric) {
            res.compare(*x, *y);
        }
    }
    Ok(res)
}

pub fn mcr_gradient_check(seed: u64) -> Result<CheckResult> {
    position_loss_check("mcr_gradient", seed, |g, a, b| {
        let r = mcr_loss(g, a, b, DEFAULT_EPSILON, DEFAULT_MOTION_THRESHOLD);
        Ok((r.value, r.grad_t, r.grad_t2))
    })
}

pub fn sr_gradient_check(seed: u64) -> Result<CheckResult> {
    position_loss_check("sr_gradient", seed, |g, a, b| {
        // small δ so both Huber branches are exercised
        let r = sr_loss(g, a, b, 0.02)?;
        Ok((r.value, r.grad_t, r.grad_t2))
    })
}

/// Random scene of `n` Gaussians in the unit cube, viewed from `z = −4`.
pub fn random_test_scene(n: usize, size: usize, seed: u64) -> Result<(Vec<Gaussian3D>, Camera)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gaussians = (0..n)
        .map(|_| Gaussian3D {
            position: point(&mut rng, 0.8),
            scale: Vector3::new(rng.gen_range(0.08..0.3), rng.gen_range(0.08..0.3), rng.gen_range(0.08..0.3)),
            rotation: normalize_quat(&Quat::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            )),
            opacity: rng.gen_range(0.3..1.5),
            color: Vector3::new(rng.gen(), rng.gen(), rng.gen()),
        })
        .collect();
    let cam = Camera::look_at(Vector3::new(0.3, -0.4, -4.0), Vector3::zeros(), Vector3::y(), 0.7, size, size)?;
    Ok((gaussians, cam))
}

/// Composited image vs literal blending, and the `Σw + T = 1` identity.
pub fn blend_check(seed: u64) -> Result<(CheckResult, CheckResult)> {
    let mut blend = CheckResult::new("blend_vs_reference", f64::INFINITY, 1e-12);
    let mut energy = CheckResult::new("compositing_identity", f64::INFINITY, 1e-9);
    for s in 0..3 {
        let (gs, cam) = random_test_scene(30, 32, seed + s)?;
        let opts = RenderOptions { background: [0.2, 0.4, 0.6], retain_fragments: true };
        let out = render(&gs, &cam, &opts)?;
        let frags = out.fragments.as_ref().expect("retained");
        for (p, list) in frags.iter().enumerate() {
            let pairs: Vec<(f64, [f64; 3])> = list.iter().map(|f| (f.alpha, gs[f.index].color.into())).collect();
            let want = reference_blend(&pairs, opts.background);
            for ch in 0..3 {
                blend.compare_abs(out.image.data[p][ch], want[ch]);
            }
            let total: f64 = list.iter().map(|f| f.weight).sum::<f64>() + out.final_transmittance[p];
            energy.compare_abs(total, 1.0);
        }
    }
    Ok((blend, energy))
}

/// The discrete state the loss is smooth within: which Gaussians were
/// composited at which pixel, in order, and on which side of the target each
/// rendered value lies (the ℓ1 kink).
fn structure(gs: &[Gaussian3D], cam: &Camera, target: &Image) -> Result<(Vec<Vec<usize>>, Vec<bool>)> {
    let out = render(gs, cam, &RenderOptions::default())?;
    let above = out.image.data.iter().zip(&target.data).flat_map(|(r, t)| (0..3).map(move |c| r[c] > t[c])).collect();
    Ok((out.fragments.expect("retained").into_iter().map(|f| f.into_iter().map(|f| f.index).collect()).collect(), above))
}

/// Photometric-loss gradient through the renderer vs central differences
/// (h = 1e-5, 1e-6 for opacity), on every parameter of every Gaussian.
///
/// The α skip and the transmittance early-out make the image piecewise
/// smooth, and ℓ1 has a kink wherever a rendered value meets its target;
/// when a probe at `x ± h` changes which fragments are composited or flips
/// a residual's sign, the step is shrunk (×0.1, up to twice) so both probes
/// stay on the base point's smooth piece. Probes that still straddle a
/// boundary count as failures.
pub fn render_gradient_check(n: usize, size: usize, seed: u64) -> Result<CheckResult> {
    let mut res = CheckResult::new("render_gradient", 1e-3, 1e-8);
    let (gs, cam) = random_test_scene(n, size, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let target = Image { width: size, height: size, data: (0..size * size).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect() };
    let lambda = 0.2;
    let loss = |gs: &[Gaussian3D]| -> Result<f64> {
        let out = render(gs, &cam, &RenderOptions { retain_fragments: false, ..Default::default() })?;
        Ok(photometric_loss(&out.image, &target, lambda)?.value)
    };
    let out = render(&gs, &cam, &RenderOptions::default())?;
    let photo = photometric_loss(&out.image, &target, lambda)?;
    let analytic = render_backward(&out, &photo.grad)?.flatten();
    let base = structure(&gs, &cam, &target)?;
    let x0 = flatten_gaussians(&gs);
    for (k, a) in analytic.iter().enumerate() {
        let h0 = if k % PARAMS_PER_GAUSSIAN == 10 { 1e-6 } else { 1e-5 };
        let mut numeric = None;
        for h in [h0, h0 * 0.1, h0 * 0.01] {
            let mut xp = x0.clone();
            xp[k] += h;
            let mut xm = x0.clone();
            xm[k] -= h;
            let (gp, gm) = (unflatten_gaussians(&xp), unflatten_gaussians(&xm));
            if structure(&gp, &cam, &target)? == base && structure(&gm, &cam, &target)? == base {
                numeric = Some((loss(&gp)? - loss(&gm)?) / (2.0 * h));
                break;
            }
        }
        match numeric {
            Some(v) => res.compare(*a, v),
            None => {
                res.compared += 1;
                res.passed = false;
            }
        }
    }
    Ok(res)
}

/// Image gradient of ℓ1 + D-SSIM vs central differences.
pub fn photometric_gradient_check(seed: u64) -> Result<CheckResult> {
    let mut res = CheckResult::new("photometric_gradient", 1e-4, 1e-9);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (10, 8);
    let mut img = || Image { width: w, height: h, data: (0..w * h).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect() };
    let (a, b) = (img(), img());
    let cfg = FiniteDiffConfig::new(1e-6, 1e-4, 1e-9)?;
    let analytic = photometric_loss(&a, &b, 0.2)?.grad;
    let x0: Vec<f64> = a.data.iter().flatten().copied().collect();
    let numeric = finite_diff_gradient(
        |x| {
            let r = Image { width: w, height: h, data: x.chunks(3).map(|c| [c[0], c[1], c[2]]).collect() };
            photometric_loss(&r, &b, 0.2).map(|p| p.value).unwrap_or(f64::NAN)
        },
        &x0,
        &cfg,
    )?;
    for (x, y) in analytic.data.iter().flatten().zip(&numeric) {
        res.compare(*x, *y);
    }
    Ok(res)
}

/// Runs every check. Errors inside a check mark it failed rather than aborting.
pub fn run_verify(fault: Option<Fault>) -> VerifyReport {
    let failed = |name: &str| CheckResult {
        name: name.into(),
        compared: 0,
        max_abs_error: f64::INFINITY,
        max_rel_error: f64::INFINITY,
        rel_tolerance: 0.0,
        abs_floor: 0.0,
        passed: false,
    };
    let mut checks = vec![welford_check(200, 1)];
    checks.push(covariance_gradient_check(fault, 2).unwrap_or_else(|_| failed("covariance_backward")));
    checks.push(eigen_gradient_check(3).unwrap_or_else(|_| failed("eigenvalue_backward")));
    checks.push(mcr_gradient_check(4).unwrap_or_else(|_| failed("mcr_gradient")));
    checks.push(sr_gradient_check(5).unwrap_or_else(|_| failed("sr_gradient")));
    match blend_check(6) {
        Ok((a, b)) => checks.extend([a, b]),
        Err(_) => checks.extend([failed("blend_vs_reference"), failed("compositing_identity")]),
    }
    checks.push(render_gradient_check(20, 32, 7).unwrap_or_else(|_| failed("render_gradient")));
    checks.push(photometric_gradient_check(8).unwrap_or_else(|_| failed("photometric_gradient")));
    VerifyReport { passed: checks.iter().all(|c| c.passed), checks }
}
