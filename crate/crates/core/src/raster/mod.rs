//! Differentiable forward/backward rendering of a Gaussian field.
//!
//! The forward pass projects every primitive to screen space (EWA-style
//! first-order covariance projection with a small isotropic low-pass), sorts
//! by depth, and alpha-composites front to back per pixel. The backward pass
//! replays each pixel's compositing chain and hand-chains gradients to every
//! primitive parameter and to a 6-dof pose twist evaluated at identity.
//!
//! Rendering parallelizes over pixel rows; per-row partial gradients are
//! reduced in row order, so output bits never depend on the worker count.

mod backward;
mod forward;

pub use backward::{render_backward, RenderGradients};
pub use forward::{render, RenderOutput};

#[cfg(not(feature = "std"))]
use num_traits::Float;

use alloc::vec::Vec;
use nalgebra::{Matrix2, Matrix2x3, Vector2, Vector3};

use crate::field::{sh_color, sigmoid, GaussianField, GaussianPrimitive};
use crate::geom::{projection_jacobian_at, CameraIntrinsics, Pose, DEPTH_EPS};

/// Isotropic screen-space low-pass added to every projected covariance, in
/// squared pixels. Keeps sub-pixel splats rasterizable.
pub const BLUR_EPS: f64 = 0.3;

/// Splats are evaluated only within this Mahalanobis radius of their 2D
/// footprint.
pub const FOOTPRINT_SIGMA: f64 = 3.0;

/// Per-splat alpha is clamped here to keep `1 - alpha` invertible in the
/// backward pass.
pub const ALPHA_CLAMP: f64 = 0.999;

/// Front-to-back compositing stops once transmittance falls below this.
pub const TRANSMITTANCE_CUTOFF: f64 = 1e-4;

/// Rendering knobs shared by the forward and backward passes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderOptions {
    pub background: [f64; 3],
    /// Row-parallel worker hint; results are identical for any value.
    pub workers: usize,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self { background: [0.0; 3], workers: 1 }
    }
}

/// Projects one primitive to screen space: center, 2D covariance (including
/// the low-pass floor), and depth. `None` when the primitive sits behind the
/// camera.
pub fn project_gaussian_2d(
    g: &GaussianPrimitive,
    pose: &Pose,
    k: &CameraIntrinsics,
) -> Option<(Vector2<f64>, Matrix2<f64>, f64)> {
    let p_cam = pose.transform(g.mu);
    if p_cam.z <= DEPTH_EPS {
        return None;
    }
    let j = projection_jacobian_at(p_cam, k)?;
    let w = pose.rotation_matrix();
    let b = j * w;
    let cov2d = b * g.covariance() * b.transpose() + Matrix2::identity() * BLUR_EPS;
    let inv_z = 1.0 / p_cam.z;
    let center = Vector2::new(k.fx * p_cam.x * inv_z + k.cx, k.fy * p_cam.y * inv_z + k.cy);
    Some((center, cov2d, p_cam.z))
}

/// A primitive projected into one view, with everything the per-pixel loops
/// need.
#[derive(Debug, Clone)]
pub(crate) struct Splat {
    pub prim: usize,
    pub center: Vector2<f64>,
    pub depth: f64,
    /// Inverse of the blurred 2D covariance.
    pub inv_cov: Matrix2<f64>,
    pub alpha: f64,
    pub color: [f64; 3],
    /// Pre-clamp SH evaluation, needed to gate gradients at the clamp.
    pub color_raw: [f64; 3],
    /// Inclusive pixel bounds of the 3-sigma footprint.
    pub x0: usize,
    pub x1: usize,
    pub y0: usize,
    pub y1: usize,
    // Cached forward state for the backward chain.
    pub p_cam: Vector3<f64>,
    pub j: Matrix2x3<f64>,
    pub view_dir: Vector3<f64>,
    pub view_len: f64,
}

/// Projects, culls, and depth-sorts the field for one view. Ties in depth
/// break by primitive index so the order is canonical.
pub(crate) fn prepare_splats(field: &GaussianField, pose: &Pose, k: &CameraIntrinsics) -> Vec<Splat> {
    let w_mat = pose.rotation_matrix();
    let cam_center = pose.camera_center();
    let mut splats = Vec::with_capacity(field.primitives.len());

    for (prim, g) in field.primitives.iter().enumerate() {
        let p_cam = pose.transform(g.mu);
        if p_cam.z <= DEPTH_EPS {
            continue;
        }
        let j = match projection_jacobian_at(p_cam, k) {
            Some(j) => j,
            None => continue,
        };
        let b = j * w_mat;
        let cov2d = b * g.covariance() * b.transpose() + Matrix2::identity() * BLUR_EPS;
        let inv_cov = match invert_sym2(&cov2d) {
            Some(m) => m,
            None => continue,
        };
        let inv_z = 1.0 / p_cam.z;
        let center = Vector2::new(k.fx * p_cam.x * inv_z + k.cx, k.fy * p_cam.y * inv_z + k.cy);

        // Conservative bounding box from the largest 2D eigenvalue.
        let radius = FOOTPRINT_SIGMA * max_eigen2(&cov2d).sqrt();
        let x0 = (center.x - radius).ceil().max(0.0);
        let x1 = (center.x + radius).floor().min(k.width as f64 - 1.0);
        let y0 = (center.y - radius).ceil().max(0.0);
        let y1 = (center.y + radius).floor().min(k.height as f64 - 1.0);
        if x0 > x1 || y0 > y1 {
            continue;
        }

        let m = g.mu - cam_center;
        let view_len = m.norm();
        let view_dir = m / view_len;
        let color_raw = sh_raw(&g.sh, field.sh_degree, view_dir);

        splats.push(Splat {
            prim,
            center,
            depth: p_cam.z,
            inv_cov,
            alpha: sigmoid(g.opacity_logit),
            color: color_raw.map(|c| c.clamp(0.0, 1.0)),
            color_raw,
            x0: x0 as usize,
            x1: x1 as usize,
            y0: y0 as usize,
            y1: y1 as usize,
            p_cam,
            j,
            view_dir,
            view_len,
        });
    }

    splats.sort_unstable_by(|a, b| a.depth.total_cmp(&b.depth).then(a.prim.cmp(&b.prim)));
    splats
}

/// Pre-clamp SH color (the raw affine-in-coefficients value).
fn sh_raw(sh: &[f64], degree: usize, dir: Vector3<f64>) -> [f64; 3] {
    let full = sh_color(sh, degree, dir);
    // sh_color clamps; recompute the raw sums so the backward pass can gate
    // on clamp saturation.
    let n = crate::field::sh_coeff_count(degree);
    let mut basis = [0.0; 16];
    crate::field::sh_basis(degree, dir, &mut basis[..n]);
    let mut raw = [0.0; 3];
    for (c, out) in raw.iter_mut().enumerate() {
        *out = 0.5 + (0..n).map(|k| sh[k * 3 + c] * basis[k]).sum::<f64>();
    }
    debug_assert!(raw.iter().zip(&full).all(|(r, f)| (r.clamp(0.0, 1.0) - f).abs() < 1e-15));
    raw
}

/// Per-row lists of indices into the sorted splat array, preserving depth
/// order.
pub(crate) fn bucket_rows(splats: &[Splat], height: usize) -> Vec<Vec<u32>> {
    let mut rows = alloc::vec![Vec::new(); height];
    for (i, s) in splats.iter().enumerate() {
        for row in rows.iter_mut().take(s.y1 + 1).skip(s.y0) {
            row.push(i as u32);
        }
    }
    rows
}

pub(crate) fn invert_sym2(m: &Matrix2<f64>) -> Option<Matrix2<f64>> {
    let det = m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)];
    if !(det.is_finite() && det > 1e-300) {
        return None;
    }
    Some(Matrix2::new(m[(1, 1)], -m[(0, 1)], -m[(1, 0)], m[(0, 0)]) / det)
}

fn max_eigen2(m: &Matrix2<f64>) -> f64 {
    let half_trace = 0.5 * (m[(0, 0)] + m[(1, 1)]);
    let half_diff = 0.5 * (m[(0, 0)] - m[(1, 1)]);
    half_trace + (half_diff * half_diff + m[(0, 1)] * m[(1, 0)]).sqrt()
}
