use alloc::vec::Vec;

#[cfg(not(feature = "std"))]
use num_traits::Float;

use crate::field::GaussianField;
use crate::geom::{CameraIntrinsics, Pose};
use crate::parallel::map_rows;

use super::{
    bucket_rows, prepare_splats, RenderOptions, Splat, ALPHA_CLAMP, FOOTPRINT_SIGMA,
    TRANSMITTANCE_CUTOFF,
};

/// One rendered view.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    pub width: usize,
    pub height: usize,
    /// Row-major `height * width * 3`, values in [0, 1].
    pub color: Vec<f64>,
    /// Row-major `height * width` accumulated opacity in [0, 1].
    pub alpha: Vec<f64>,
    /// Number of splats that contributed to each pixel.
    pub contrib_count: Vec<u32>,
}

impl RenderOutput {
    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.color[i], self.color[i + 1], self.color[i + 2]]
    }
}

/// Renders the field into an `width x height` image, compositing depth-sorted
/// splats front to back over a constant background.
pub fn render(
    field: &GaussianField,
    pose: &Pose,
    k: &CameraIntrinsics,
    opts: &RenderOptions,
) -> RenderOutput {
    assert!(!field.is_empty(), "cannot render an empty field");
    let (w, h) = (k.width as usize, k.height as usize);
    let splats = prepare_splats(field, pose, k);
    let rows = bucket_rows(&splats, h);
    let bg = opts.background;

    let row_results = map_rows(h, opts.workers, |y| {
        let mut color = alloc::vec![0.0f64; w * 3];
        let mut alpha = alloc::vec![0.0f64; w];
        let mut count = alloc::vec![0u32; w];
        for x in 0..w {
            let (rgb, a, n) = composite_pixel(&splats, &rows[y], x as f64, y as f64, &bg);
            color[x * 3] = rgb[0];
            color[x * 3 + 1] = rgb[1];
            color[x * 3 + 2] = rgb[2];
            alpha[x] = a;
            count[x] = n;
        }
        (color, alpha, count)
    });

    let mut out = RenderOutput {
        width: w,
        height: h,
        color: Vec::with_capacity(w * h * 3),
        alpha: Vec::with_capacity(w * h),
        contrib_count: Vec::with_capacity(w * h),
    };
    for (color, alpha, count) in row_results {
        out.color.extend_from_slice(&color);
        out.alpha.extend_from_slice(&alpha);
        out.contrib_count.extend_from_slice(&count);
    }
    out
}

/// Front-to-back compositing for one pixel.
fn composite_pixel(
    splats: &[Splat],
    row: &[u32],
    px: f64,
    py: f64,
    bg: &[f64; 3],
) -> ([f64; 3], f64, u32) {
    let cutoff = FOOTPRINT_SIGMA * FOOTPRINT_SIGMA;
    let mut rgb = [0.0f64; 3];
    let mut transmittance = 1.0f64;
    let mut count = 0u32;

    for &si in row {
        let s = &splats[si as usize];
        let xi = px as usize;
        if xi < s.x0 || xi > s.x1 {
            continue;
        }
        let dx = px - s.center.x;
        let dy = py - s.center.y;
        let m = &s.inv_cov;
        let q = m[(0, 0)] * dx * dx + (m[(0, 1)] + m[(1, 0)]) * dx * dy + m[(1, 1)] * dy * dy;
        if q > cutoff {
            continue;
        }
        let e = (-0.5 * q).exp();
        let a = (s.alpha * e).min(ALPHA_CLAMP);
        let weight = a * transmittance;
        rgb[0] += s.color[0] * weight;
        rgb[1] += s.color[1] * weight;
        rgb[2] += s.color[2] * weight;
        count += 1;
        transmittance *= 1.0 - a;
        if transmittance < TRANSMITTANCE_CUTOFF {
            break;
        }
    }

    rgb[0] += bg[0] * transmittance;
    rgb[1] += bg[1] * transmittance;
    rgb[2] += bg[2] * transmittance;
    (rgb, 1.0 - transmittance, count)
}
