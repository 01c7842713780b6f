//! Novel-view image quality metrics.

#[cfg(not(feature = "std"))]
use num_traits::Float;

use alloc::vec::Vec;

/// Sentinel reported for identical images (zero MSE).
pub const PSNR_CAP: f64 = 99.0;

#[derive(Debug, Clone, PartialEq)]
pub enum MetricsError {
    ShapeMismatch,
    /// SSIM needs at least one full 11x11 window.
    ImageTooSmall { width: usize, height: usize },
}

impl core::fmt::Display for MetricsError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            MetricsError::ShapeMismatch => write!(f, "metric inputs have mismatched shapes"),
            MetricsError::ImageTooSmall { width, height } => {
                write!(f, "image {width}x{height} is smaller than the 11x11 SSIM window")
            }
        }
    }
}

impl core::error::Error for MetricsError {}

/// Peak signal-to-noise ratio in dB over a unit dynamic range, capped at
/// [`PSNR_CAP`].
pub fn psnr(a: &[f64], b: &[f64]) -> Result<f64, MetricsError> {
    if a.len() != b.len() || a.is_empty() {
        return Err(MetricsError::ShapeMismatch);
    }
    let mse: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    if mse <= 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01; // (K1 * L)^2 with L = 1
const SSIM_C2: f64 = 0.03 * 0.03;

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in &mut w {
        *v /= sum;
    }
    w
}

/// Separable valid-mode Gaussian filter; output is
/// `(height - 10) x (width - 10)`.
fn filter_valid(img: &[f64], width: usize, height: usize, win: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let ow = width - SSIM_WINDOW + 1;
    // Horizontal pass.
    let mut tmp = alloc::vec![0.0; ow * height];
    for y in 0..height {
        for x in 0..ow {
            let mut acc = 0.0;
            for (k, wk) in win.iter().enumerate() {
                acc += wk * img[y * width + x + k];
            }
            tmp[y * ow + x] = acc;
        }
    }
    // Vertical pass.
    let oh = height - SSIM_WINDOW + 1;
    let mut out = alloc::vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            for (k, wk) in win.iter().enumerate() {
                acc += wk * tmp[(y + k) * ow + x];
            }
            out[y * ow + x] = acc;
        }
    }
    out
}

/// Structural similarity over a single luminance plane in [0, 1], averaged
/// over all valid 11x11 Gaussian window positions.
pub fn ssim(a: &[f64], b: &[f64], width: usize, height: usize) -> Result<f64, MetricsError> {
    if a.len() != width * height || b.len() != a.len() {
        return Err(MetricsError::ShapeMismatch);
    }
    if width < SSIM_WINDOW || height < SSIM_WINDOW {
        return Err(MetricsError::ImageTooSmall { width, height });
    }
    let win = gaussian_window();
    let a2: Vec<f64> = a.iter().map(|x| x * x).collect();
    let b2: Vec<f64> = b.iter().map(|x| x * x).collect();
    let ab: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();

    let mu_a = filter_valid(a, width, height, &win);
    let mu_b = filter_valid(b, width, height, &win);
    let m_a2 = filter_valid(&a2, width, height, &win);
    let m_b2 = filter_valid(&b2, width, height, &win);
    let m_ab = filter_valid(&ab, width, height, &win);

    let mut total = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = m_a2[i] - ma * ma;
        let vb = m_b2[i] - mb * mb;
        let cov = m_ab[i] - ma * mb;
        total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
            / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
    }
    Ok(total / mu_a.len() as f64)
}

/// SSIM of interleaved RGB images: the per-channel values averaged.
pub fn ssim_rgb(a: &[f64], b: &[f64], width: usize, height: usize) -> Result<f64, MetricsError> {
    if a.len() != width * height * 3 || b.len() != a.len() {
        return Err(MetricsError::ShapeMismatch);
    }
    let mut total = 0.0;
    for c in 0..3 {
        let pa: Vec<f64> = a.chunks_exact(3).map(|px| px[c]).collect();
        let pb: Vec<f64> = b.chunks_exact(3).map(|px| px[c]).collect();
        total += ssim(&pa, &pb, width, height)?;
    }
    Ok(total / 3.0)
}
