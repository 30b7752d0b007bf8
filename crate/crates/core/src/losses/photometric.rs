use crate::error::{Error, Result};
use crate::rasterizer::Image;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

#[derive(Debug, Clone, PartialEq)]
pub struct PhotometricResult {
    /// `(1 − λ)·ℓ1 + λ·dssim`.
    pub value: f64,
    pub l1: f64,
    /// `(1 − SSIM) / 2`.
    pub dssim: f64,
    /// Gradient of `value` w.r.t. the rendered image.
    pub grad: Image,
}

fn window() -> [f64; SSIM_WINDOW] {
    let half = (SSIM_WINDOW / 2) as f64;
    let mut w = [0.0; SSIM_WINDOW];
    for (k, v) in w.iter_mut().enumerate() {
        let x = k as f64 - half;
        *v = (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Separable Gaussian filter with zero padding and same-size output. The
/// kernel is symmetric, so this is also its own adjoint.
fn blur(plane: &[f64], width: usize, height: usize, kernel: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as isize;
    let mut tmp = vec![0.0; plane.len()];
    for r in 0..height {
        for c in 0..width {
            let mut acc = 0.0;
            for (k, w) in kernel.iter().enumerate() {
                let cc = c as isize + k as isize - half;
                if cc >= 0 && (cc as usize) < width {
                    acc += w * plane[r * width + cc as usize];
                }
            }
            tmp[r * width + c] = acc;
        }
    }
    let mut out = vec![0.0; plane.len()];
    for r in 0..height {
        for c in 0..width {
            let mut acc = 0.0;
            for (k, w) in kernel.iter().enumerate() {
                let rr = r as isize + k as isize - half;
                if rr >= 0 && (rr as usize) < height {
                    acc += w * tmp[rr as usize * width + c];
                }
            }
            out[r * width + c] = acc;
        }
    }
    out
}

fn channel(img: &Image, ch: usize) -> Vec<f64> {
    img.data.iter().map(|p| p[ch]).collect()
}

/// Mean SSIM of one channel and, if `upstream` is given, `upstream ·
/// ∂(mean SSIM)/∂x` for that channel.
fn ssim_channel(x: &[f64], y: &[f64], w: usize, h: usize, upstream: Option<f64>) -> (f64, Option<Vec<f64>>) {
    let kernel = window();
    let mu_x = blur(x, w, h, &kernel);
    let mu_y = blur(y, w, h, &kernel);
    let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).collect::<Vec<_>>();
    let e_xx = blur(&sq(x, x), w, h, &kernel);
    let e_yy = blur(&sq(y, y), w, h, &kernel);
    let e_xy = blur(&sq(x, y), w, h, &kernel);
    let n = x.len();
    let mut total = 0.0;
    let (mut d_mu, mut d_xx, mut d_xy) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    for p in 0..n {
        let (mx, my) = (mu_x[p], mu_y[p]);
        let a1 = 2.0 * mx * my + SSIM_C1;
        let a2 = 2.0 * (e_xy[p] - mx * my) + SSIM_C2;
        let b1 = mx * mx + my * my + SSIM_C1;
        let b2 = (e_xx[p] - mx * mx) + (e_yy[p] - my * my) + SSIM_C2;
        let s = a1 * a2 / (b1 * b2);
        total += s;
        if let Some(g) = upstream {
            let g = g / n as f64;
            d_mu[p] = g * (2.0 * my * (a2 - a1) / (b1 * b2) - 2.0 * mx * s * (1.0 / b1 - 1.0 / b2));
            d_xx[p] = -g * s / b2;
            d_xy[p] = g * 2.0 * a1 / (b1 * b2);
        }
    }
    let grad = upstream.map(|_| {
        let g_mu = blur(&d_mu, w, h, &kernel);
        let g_xx = blur(&d_xx, w, h, &kernel);
        let g_xy = blur(&d_xy, w, h, &kernel);
        (0..n).map(|p| g_mu[p] + 2.0 * x[p] * g_xx[p] + y[p] * g_xy[p]).collect()
    });
    (total / n as f64, grad)
}

fn check_shapes(a: &Image, b: &Image) -> Result<()> {
    if !a.same_shape(b) || a.data.len() != a.width * a.height || b.data.len() != b.width * b.height {
        return Err(Error::InvalidInput(format!(
            "image sizes differ: {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    if a.data.is_empty() {
        return Err(Error::InvalidInput("empty image".into()));
    }
    Ok(())
}

/// Channel-averaged mean SSIM (11×11 Gaussian window, σ = 1.5, zero padding).
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    check_shapes(a, b)?;
    let s: f64 = (0..3).map(|ch| ssim_channel(&channel(a, ch), &channel(b, ch), a.width, a.height, None).0).sum();
    Ok(s / 3.0)
}

/// `(1 − λ)·mean|r − t| + λ·(1 − SSIM(r, t))/2` and its gradient w.r.t. `r`.
pub fn photometric_loss(rendered: &Image, target: &Image, lambda_dssim: f64) -> Result<PhotometricResult> {
    check_shapes(rendered, target)?;
    if !(0.0..=1.0).contains(&lambda_dssim) {
        return Err(Error::InvalidParameter(format!("lambda_dssim must lie in [0, 1], got {lambda_dssim}")));
    }
    let (w, h) = (rendered.width, rendered.height);
    let count = (3 * w * h) as f64;
    let mut grad = Image::filled(w, h, [0.0; 3]);
    let mut l1 = 0.0;
    for ((g, r), t) in grad.data.iter_mut().zip(&rendered.data).zip(&target.data) {
        for ch in 0..3 {
            let d = r[ch] - t[ch];
            l1 += d.abs();
            g[ch] = (1.0 - lambda_dssim) * if d > 0.0 { 1.0 } else if d < 0.0 { -1.0 } else { 0.0 } / count;
        }
    }
    l1 /= count;

    let mut ssim_sum = 0.0;
    for ch in 0..3 {
        let upstream = (lambda_dssim != 0.0).then_some(-0.5 * lambda_dssim / 3.0);
        let (s, g) = ssim_channel(&channel(rendered, ch), &channel(target, ch), w, h, upstream);
        ssim_sum += s;
        if let Some(g) = g {
            for (px, v) in grad.data.iter_mut().zip(g) {
                px[ch] += v;
            }
        }
    }
    let dssim = (1.0 - ssim_sum / 3.0) / 2.0;
    Ok(PhotometricResult { value: (1.0 - lambda_dssim) * l1 + lambda_dssim * dssim, l1, dssim, grad })
}
