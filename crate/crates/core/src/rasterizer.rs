//! Depth-sorted per-pixel compositing with `C = Σ T_i (1 - e^{-α_i}) c_i + T_{N+1}·bg`,
//! `T_i = e^{-Σ_{j<i} α_j}`, and its exact reverse pass.

use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{covariance_backward, project_gaussian, Camera, Gaussian3D, ProjectedGaussian, Quat};

/// Fragments with `α < ALPHA_MIN` never enter a pixel's list.
pub const ALPHA_MIN: f64 = 1.0 / 255.0;

/// Compositing stops once transmittance drops below this.
pub const TRANSMITTANCE_MIN: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RenderOptions {
    pub background: [f64; 3],
    /// Keep per-pixel fragment records (needed for grouping and backward).
    pub retain_fragments: bool,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self { background: [0.0; 3], retain_fragments: true }
    }
}

/// One composited Gaussian at one pixel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Fragment {
    pub index: usize,
    pub depth: f64,
    /// `α_i = o_i·G_i(x)`.
    pub alpha: f64,
    /// Screen density `G_i(x)`.
    pub density: f64,
    /// Transmittance before this fragment.
    pub transmittance: f64,
    /// Contribution weight `T_i (1 - e^{-α_i})`.
    pub weight: f64,
}

/// Simple row-major RGB image of `f64` samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<[f64; 3]>,
}

impl Image {
    pub fn filled(width: usize, height: usize, value: [f64; 3]) -> Self {
        Self { width, height, data: vec![value; width * height] }
    }

    pub fn get(&self, row: usize, col: usize) -> [f64; 3] {
        self.data[row * self.width + col]
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height
    }
}

/// Image plus everything the grouping and reverse passes need.
#[derive(Debug, Clone)]
pub struct RenderOutput {
    pub image: Image,
    /// Per-pixel composited fragments in depth order (row-major pixels).
    pub fragments: Option<Vec<Vec<Fragment>>>,
    /// Transmittance left after the last composited fragment, per pixel.
    pub final_transmittance: Vec<f64>,
    pub background: [f64; 3],
    pub camera: Camera,
    pub gaussians: Vec<Gaussian3D>,
    pub projected: Vec<Option<ProjectedGaussian>>,
}

impl RenderOutput {
    pub fn width(&self) -> usize {
        self.image.width
    }

    pub fn height(&self) -> usize {
        self.image.height
    }

    pub fn pixel_fragments(&self, row: usize, col: usize) -> Option<&[Fragment]> {
        self.fragments.as_ref().map(|f| f[row * self.image.width + col].as_slice())
    }
}

/// Per-Gaussian gradients of a scalar loss.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianGradients {
    pub position: Vec<Vector3<f64>>,
    pub scale: Vec<Vector3<f64>>,
    pub rotation: Vec<Quat>,
    pub opacity: Vec<f64>,
    pub color: Vec<Vector3<f64>>,
}

impl GaussianGradients {
    pub fn zeros(n: usize) -> Self {
        Self {
            position: vec![Vector3::zeros(); n],
            scale: vec![Vector3::zeros(); n],
            rotation: vec![Quat::zeros(); n],
            opacity: vec![0.0; n],
            color: vec![Vector3::zeros(); n],
        }
    }

    pub fn len(&self) -> usize {
        self.position.len()
    }

    pub fn is_empty(&self) -> bool {
        self.position.is_empty()
    }

    /// Flattened as `[μ(3), s(3), q(4), o, c(3)]` per Gaussian.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len() * PARAMS_PER_GAUSSIAN);
        for i in 0..self.len() {
            out.extend(self.position[i].iter());
            out.extend(self.scale[i].iter());
            out.extend(self.rotation[i].iter());
            out.push(self.opacity[i]);
            out.extend(self.color[i].iter());
        }
        out
    }
}

pub const PARAMS_PER_GAUSSIAN: usize = 14;

/// Flattens Gaussians in the same layout as [`GaussianGradients::flatten`].
pub fn flatten_gaussians(gs: &[Gaussian3D]) -> Vec<f64> {
    let mut out = Vec::with_capacity(gs.len() * PARAMS_PER_GAUSSIAN);
    for g in gs {
        out.extend(g.position.iter());
        out.extend(g.scale.iter());
        out.extend(g.rotation.iter());
        out.push(g.opacity);
        out.extend(g.color.iter());
    }
    out
}

/// Inverse of [`flatten_gaussians`].
pub fn unflatten_gaussians(x: &[f64]) -> Vec<Gaussian3D> {
    x.chunks(PARAMS_PER_GAUSSIAN)
        .map(|c| Gaussian3D {
            position: Vector3::new(c[0], c[1], c[2]),
            scale: Vector3::new(c[3], c[4], c[5]),
            rotation: Quat::new(c[6], c[7], c[8], c[9]),
            opacity: c[10],
            color: Vector3::new(c[11], c[12], c[13]),
        })
        .collect()
}

/// Sorts `(index, depth)` pairs by depth, ties by index.
pub fn sort_fragments(fragments: &mut [(usize, f64)]) {
    fragments.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
}

#[derive(Clone, Copy)]
struct Splat {
    proj: ProjectedGaussian,
    conic: Matrix2<f64>,
    opacity: f64,
    color: Vector3<f64>,
    // inclusive pixel bounds
    rows: (usize, usize),
    cols: (usize, usize),
}

fn splat_for(g: &Gaussian3D, proj: ProjectedGaussian, cam: &Camera) -> Result<Option<Splat>> {
    let conic = proj.conic()?;
    let level = 255.0 * g.opacity;
    if !(level >= 1.0) {
        return Ok(None);
    }
    // α ≥ 1/255 requires dᵀΣ′⁻¹d ≤ 2 ln(255 o), and dᵀΣ′⁻¹d ≥ |d|²/λ_max
    let radius = (2.0 * level.ln() * proj.max_eigenvalue()).sqrt() + 1.0;
    let c0 = (proj.mean.x - radius - 0.5).floor();
    let c1 = (proj.mean.x + radius - 0.5).ceil();
    let r0 = (proj.mean.y - radius - 0.5).floor();
    let r1 = (proj.mean.y + radius - 0.5).ceil();
    if c1 < 0.0 || r1 < 0.0 || c0 > (cam.width - 1) as f64 || r0 > (cam.height - 1) as f64 {
        return Ok(None);
    }
    let clamp = |v: f64, hi: usize| v.max(0.0).min(hi as f64) as usize;
    Ok(Some(Splat {
        proj,
        conic,
        opacity: g.opacity,
        color: g.color,
        rows: (clamp(r0, cam.height - 1), clamp(r1, cam.height - 1)),
        cols: (clamp(c0, cam.width - 1), clamp(c1, cam.width - 1)),
    }))
}

fn pixel_center(row: usize, col: usize) -> Vector2<f64> {
    Vector2::new(col as f64 + 0.5, row as f64 + 0.5)
}

struct PixelResult {
    color: [f64; 3],
    final_t: f64,
    fragments: Vec<Fragment>,
}

fn shade_pixel(row: usize, col: usize, splats: &[&Splat], background: [f64; 3]) -> PixelResult {
    let x = pixel_center(row, col);
    let mut candidates: Vec<(usize, f64, f64, f64, Vector3<f64>)> = Vec::new();
    for s in splats {
        if col < s.cols.0 || col > s.cols.1 {
            continue;
        }
        let d = x - s.proj.mean;
        let density = (-0.5 * d.dot(&(s.conic * d))).exp();
        let alpha = s.opacity * density;
        if alpha >= ALPHA_MIN {
            candidates.push((s.proj.index, s.proj.depth, alpha, density, s.color));
        }
    }
    candidates.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));

    let mut color = [0.0; 3];
    let mut t = 1.0;
    let mut fragments = Vec::with_capacity(candidates.len());
    for (index, depth, alpha, density, c) in candidates {
        if t < TRANSMITTANCE_MIN {
            break;
        }
        let decay = (-alpha).exp();
        let weight = t * (1.0 - decay);
        for ch in 0..3 {
            color[ch] += weight * c[ch];
        }
        fragments.push(Fragment { index, depth, alpha, density, transmittance: t, weight });
        t *= decay;
    }
    for ch in 0..3 {
        color[ch] += t * background[ch];
    }
    PixelResult { color, final_t: t, fragments }
}

/// Renders `gaussians` through `cam`.
pub fn render(gaussians: &[Gaussian3D], cam: &Camera, opts: &RenderOptions) -> Result<RenderOutput> {
    cam.validate()?;
    let projected: Vec<Option<ProjectedGaussian>> =
        gaussians.iter().enumerate().map(|(i, g)| project_gaussian(g, i, cam)).collect::<Result<_>>()?;
    let mut splats = Vec::new();
    for (g, p) in gaussians.iter().zip(&projected) {
        if let Some(p) = p {
            if let Some(s) = splat_for(g, *p, cam)? {
                splats.push(s);
            }
        }
    }

    let (w, h) = (cam.width, cam.height);
    let rows: Vec<Vec<PixelResult>> = (0..h)
        .into_par_iter()
        .map(|row| {
            let active: Vec<&Splat> = splats.iter().filter(|s| row >= s.rows.0 && row <= s.rows.1).collect();
            (0..w).map(|col| shade_pixel(row, col, &active, opts.background)).collect()
        })
        .collect();

    let mut image = Image::filled(w, h, opts.background);
    let mut final_transmittance = Vec::with_capacity(w * h);
    let mut fragments = Vec::with_capacity(if opts.retain_fragments { w * h } else { 0 });
    for (p, px) in rows.into_iter().flatten().enumerate() {
        image.data[p] = px.color;
        final_transmittance.push(px.final_t);
        if opts.retain_fragments {
            fragments.push(px.fragments);
        }
    }
    Ok(RenderOutput {
        image,
        fragments: opts.retain_fragments.then_some(fragments),
        final_transmittance,
        background: opts.background,
        camera: *cam,
        gaussians: gaussians.to_vec(),
        projected,
    })
}

#[derive(Clone, Copy, Default)]
struct ScreenGrad {
    mean: Vector2<f64>,
    conic: Matrix2<f64>,
    opacity: f64,
    color: Vector3<f64>,
}

/// Exact reverse pass of [`render`] for an upstream image gradient.
pub fn render_backward(out: &RenderOutput, d_image: &Image) -> Result<GaussianGradients> {
    let fragments = out
        .fragments
        .as_ref()
        .ok_or_else(|| Error::ContractViolation("render_backward needs retained fragments".into()))?;
    if !d_image.same_shape(&out.image) {
        return Err(Error::InvalidInput("image gradient shape does not match render".into()));
    }
    let n = out.gaussians.len();
    let (w, h) = (out.width(), out.height());
    let bg = Vector3::from(out.background);
    let conics: Vec<Option<Matrix2<f64>>> =
        out.projected.iter().map(|p| p.as_ref().and_then(|p| p.conic().ok())).collect();

    // one buffer per row, reduced in row order afterwards
    let per_row: Vec<Vec<ScreenGrad>> = (0..h)
        .into_par_iter()
        .map(|row| {
            let mut acc = vec![ScreenGrad::default(); n];
            for col in 0..w {
                let p = row * w + col;
                let frags = &fragments[p];
                if frags.is_empty() {
                    continue;
                }
                let g_c = Vector3::from(d_image.data[p]);
                if g_c == Vector3::zeros() {
                    continue;
                }
                let x = pixel_center(row, col);
                let mut suffix = out.final_transmittance[p] * bg;
                for f in frags.iter().rev() {
                    let gauss = &out.gaussians[f.index];
                    let t_next = f.transmittance * (-f.alpha).exp();
                    let d_alpha = g_c.dot(&(t_next * gauss.color - suffix));
                    suffix += f.weight * gauss.color;
                    let slot = &mut acc[f.index];
                    slot.color += f.weight * g_c;
                    slot.opacity += d_alpha * f.density;
                    let d_density = d_alpha * gauss.opacity;
                    let proj = out.projected[f.index].as_ref().expect("fragment from a projected Gaussian");
                    let conic = conics[f.index].expect("fragment from an invertible splat");
                    let d = x - proj.mean;
                    slot.mean += d_density * f.density * (conic * d);
                    slot.conic += (-0.5 * d_density * f.density) * (d * d.transpose());
                }
            }
            acc
        })
        .collect();

    let mut screen = vec![ScreenGrad::default(); n];
    for row in per_row {
        for (s, r) in screen.iter_mut().zip(row) {
            s.mean += r.mean;
            s.conic += r.conic;
            s.opacity += r.opacity;
            s.color += r.color;
        }
    }

    let cam = &out.camera;
    let mut grads = GaussianGradients::zeros(n);
    for i in 0..n {
        let (Some(proj), Some(conic)) = (out.projected[i].as_ref(), conics[i]) else {
            continue;
        };
        let sg = &screen[i];
        grads.opacity[i] = sg.opacity;
        grads.color[i] = sg.color;
        let g = &out.gaussians[i];
        let t = proj.cam_pos;
        let cov3 = g.covariance()?;
        let m = cam.rotation * cov3 * cam.rotation.transpose();
        let j = cam.jacobian(&t);

        let d_cov2 = -(conic.transpose() * sg.conic * conic.transpose());
        let d_cov2 = 0.5 * (d_cov2 + d_cov2.transpose());
        let d_m: Matrix3<f64> = j.transpose() * d_cov2 * j;
        let d_j = 2.0 * d_cov2 * j * m;

        let (fx, fy) = (cam.fx, cam.fy);
        let iz = 1.0 / t.z;
        let iz2 = iz * iz;
        let iz3 = iz2 * iz;
        let mut d_t = j.transpose() * sg.mean;
        d_t.x += d_j[(0, 2)] * (-fx * iz2);
        d_t.y += d_j[(1, 2)] * (-fy * iz2);
        d_t.z += d_j[(0, 0)] * (-fx * iz2)
            + d_j[(0, 2)] * (2.0 * fx * t.x * iz3)
            + d_j[(1, 1)] * (-fy * iz2)
            + d_j[(1, 2)] * (2.0 * fy * t.y * iz3);
        grads.position[i] = cam.rotation.transpose() * d_t;

        let d_cov3 = cam.rotation.transpose() * d_m * cam.rotation;
        let (d_s, d_q) = covariance_backward(&g.scale, &g.rotation, &d_cov3);
        grads.scale[i] = d_s;
        grads.rotation[i] = d_q;
    }
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::reference_blend;
    use crate::types::{normalize_quat, IDENTITY_QUAT};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn camera(w: usize, h: usize) -> Camera {
        Camera::look_at(Vector3::new(0.0, 0.0, -4.0), Vector3::zeros(), Vector3::new(0.0, -1.0, 0.0), 0.7, w, h).unwrap()
    }

    pub(crate) fn random_scene(rng: &mut ChaCha8Rng, n: usize) -> Vec<Gaussian3D> {
        (0..n)
            .map(|_| Gaussian3D {
                position: Vector3::new(rng.gen_range(-0.8..0.8), rng.gen_range(-0.8..0.8), rng.gen_range(-0.8..0.8)),
                scale: Vector3::new(rng.gen_range(0.08..0.3), rng.gen_range(0.08..0.3), rng.gen_range(0.08..0.3)),
                rotation: normalize_quat(&Quat::new(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                )),
                opacity: rng.gen_range(0.3..1.5),
                color: Vector3::new(rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)),
            })
            .collect()
    }

    #[test]
    fn sort_examples() {
        let mut a = vec![(3, 2.0), (1, 1.0)];
        sort_fragments(&mut a);
        assert_eq!(a, vec![(1, 1.0), (3, 2.0)]);
        let mut b = vec![(5, 1.0), (2, 1.0)];
        sort_fragments(&mut b);
        assert_eq!(b, vec![(2, 1.0), (5, 1.0)]);
    }

    #[test]
    fn sort_matches_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut v: Vec<(usize, f64)> = (0..100).map(|i| (i, (rng.gen_range(0..20) as f64) * 0.5)).collect();
        let mut reference = v.clone();
        // insertion sort on the (depth, index) key
        for i in 1..reference.len() {
            let mut j = i;
            while j > 0 && (reference[j - 1].1, reference[j - 1].0) > (reference[j].1, reference[j].0) {
                reference.swap(j - 1, j);
                j -= 1;
            }
        }
        sort_fragments(&mut v);
        assert_eq!(v, reference);
    }

    #[test]
    fn empty_scene_is_background() {
        let opts = RenderOptions { background: [0.1, 0.2, 0.3], ..Default::default() };
        let out = render(&[], &camera(8, 6), &opts).unwrap();
        assert!(out.image.data.iter().all(|p| *p == [0.1, 0.2, 0.3]));
        assert!(out.final_transmittance.iter().all(|&t| t == 1.0));
    }

    fn two_layer() -> Vec<Gaussian3D> {
        vec![
            Gaussian3D::isotropic(Vector3::new(0.0, 0.0, 0.5), 0.3, 0.9, Vector3::new(0.1, 0.8, 0.3)),
            Gaussian3D::isotropic(Vector3::new(0.0, 0.0, -0.5), 0.3, 0.7, Vector3::new(0.9, 0.2, 0.5)),
        ]
    }

    #[test]
    fn composite_matches_hand_expansion() {
        let cam = camera(16, 16);
        let bg = [0.05, 0.1, 0.2];
        let gs = two_layer();
        let out = render(&gs, &cam, &RenderOptions { background: bg, retain_fragments: true }).unwrap();
        let mut saw_two = false;
        for row in 0..16 {
            for col in 0..16 {
                let frags = out.pixel_fragments(row, col).unwrap();
                let px = out.image.get(row, col);
                match frags {
                    [] => assert_eq!(px, bg),
                    [a] => {
                        let c = gs[a.index].color;
                        for ch in 0..3 {
                            let want = (1.0 - (-a.alpha).exp()) * c[ch] + (-a.alpha).exp() * bg[ch];
                            assert!((px[ch] - want).abs() < 1e-12);
                        }
                    }
                    [a, b] => {
                        saw_two = true;
                        assert_eq!((a.index, b.index), (1, 0));
                        let (c1, c2) = (gs[a.index].color, gs[b.index].color);
                        for ch in 0..3 {
                            let want = (1.0 - (-a.alpha).exp()) * c1[ch]
                                + (-a.alpha).exp() * (1.0 - (-b.alpha).exp()) * c2[ch]
                                + (-a.alpha - b.alpha).exp() * bg[ch];
                            assert!((px[ch] - want).abs() < 1e-12);
                        }
                    }
                    _ => panic!("unexpected fragment count"),
                }
                let blended = reference_blend(
                    &frags.iter().map(|f| (f.alpha, gs[f.index].color.into())).collect::<Vec<_>>(),
                    bg,
                );
                for ch in 0..3 {
                    assert!((px[ch] - blended[ch]).abs() < 1e-12);
                }
            }
        }
        assert!(saw_two);
    }

    #[test]
    fn fragment_invariants_and_energy() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let gs = random_scene(&mut rng, 40);
        let out = render(&gs, &camera(32, 32), &RenderOptions::default()).unwrap();
        for (p, frags) in out.fragments.as_ref().unwrap().iter().enumerate() {
            let mut t = 1.0;
            let mut sum = 0.0;
            let mut depth = f64::NEG_INFINITY;
            for f in frags {
                assert!(f.depth >= depth);
                depth = f.depth;
                assert!((f.transmittance - t).abs() <= 1e-9);
                assert!(0.0 <= f.weight && f.weight <= f.transmittance && f.transmittance <= 1.0);
                t *= (-f.alpha).exp();
                sum += f.weight;
            }
            assert!((sum + out.final_transmittance[p] - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn permutation_invariant_image() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let gs = random_scene(&mut rng, 30);
        let mut perm: Vec<usize> = (0..gs.len()).collect();
        for i in (1..perm.len()).rev() {
            perm.swap(i, rng.gen_range(0..=i));
        }
        let shuffled: Vec<_> = perm.iter().map(|&i| gs[i]).collect();
        let cam = camera(24, 24);
        let a = render(&gs, &cam, &RenderOptions::default()).unwrap();
        let b = render(&shuffled, &cam, &RenderOptions::default()).unwrap();
        assert_eq!(a.image, b.image);
    }

    #[test]
    fn backward_needs_fragments() {
        let out = render(&two_layer(), &camera(8, 8), &RenderOptions { retain_fragments: false, ..Default::default() }).unwrap();
        let d = Image::filled(8, 8, [1.0; 3]);
        assert!(matches!(render_backward(&out, &d), Err(Error::ContractViolation(_))));
    }

    #[test]
    fn zero_cotangent_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let gs = random_scene(&mut rng, 10);
        let out = render(&gs, &camera(16, 16), &RenderOptions::default()).unwrap();
        let g = render_backward(&out, &Image::filled(16, 16, [0.0; 3])).unwrap();
        assert!(g.flatten().iter().all(|&v| v == 0.0));
    }

    fn weighted_sum(gs: &[Gaussian3D], cam: &Camera, weights: &Image) -> f64 {
        let out = render(gs, cam, &RenderOptions { background: [0.2, 0.3, 0.1], retain_fragments: false }).unwrap();
        out.image.data.iter().zip(&weights.data).map(|(a, b)| a[0] * b[0] + a[1] * b[1] + a[2] * b[2]).sum()
    }

    #[test]
    fn single_gaussian_opacity_gradient() {
        let cam = camera(16, 16);
        let gs = vec![Gaussian3D::new(
            Vector3::new(0.1, -0.05, 0.2),
            Vector3::new(0.3, 0.2, 0.25),
            Quat::from(IDENTITY_QUAT),
            0.8,
            Vector3::new(0.6, 0.3, 0.9),
        )];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let weights = Image {
            width: 16,
            height: 16,
            data: (0..256).map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]).collect(),
        };
        let out = render(&gs, &cam, &RenderOptions { background: [0.2, 0.3, 0.1], retain_fragments: true }).unwrap();
        let analytic = render_backward(&out, &weights).unwrap().opacity[0];
        let h = 1e-5;
        let mut plus = gs.clone();
        plus[0].opacity += h;
        let mut minus = gs.clone();
        minus[0].opacity -= h;
        let fd = (weighted_sum(&plus, &cam, &weights) - weighted_sum(&minus, &cam, &weights)) / (2.0 * h);
        assert!((fd - analytic).abs() <= 1e-4 * analytic.abs(), "{fd} vs {analytic}");
    }
}
