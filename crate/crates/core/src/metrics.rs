//! Image-quality metrics reported after training.

use crate::error::{Error, Result};
use crate::rasterizer::Image;

/// Largest PSNR written to reports; identical images would otherwise be infinite.
pub const PSNR_CAP_DB: f64 = 200.0;

/// Mean squared error pooled over all pixels and channels.
pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    if !a.same_shape(b) || a.data.is_empty() {
        return Err(Error::InvalidInput(format!("image sizes differ: {}x{} vs {}x{}", a.width, a.height, b.width, b.height)));
    }
    let sum: f64 = a.data.iter().zip(&b.data).flat_map(|(p, q)| (0..3).map(move |c| (p[c] - q[c]).powi(2))).sum();
    Ok(sum / (3 * a.data.len()) as f64)
}

/// PSNR for unit peak, `10·log10(1/MSE)`, capped at [`PSNR_CAP_DB`].
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    let m = mse(a, b)?;
    Ok(if m == 0.0 { PSNR_CAP_DB } else { (-10.0 * m.log10()).min(PSNR_CAP_DB) })
}

pub use crate::losses::ssim;

/// Averages PSNR over image pairs by pooling their MSE.
pub fn mean_psnr<'a>(pairs: impl IntoIterator<Item = (&'a Image, &'a Image)>) -> Result<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for (a, b) in pairs {
        sum += mse(a, b)?;
        n += 1;
    }
    if n == 0 {
        return Err(Error::InvalidInput("no images to compare".into()));
    }
    let m = sum / n as f64;
    Ok(if m == 0.0 { PSNR_CAP_DB } else { (-10.0 * m.log10()).min(PSNR_CAP_DB) })
}
