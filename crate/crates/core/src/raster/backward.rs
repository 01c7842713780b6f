use alloc::vec::Vec;

#[cfg(not(feature = "std"))]
use num_traits::Float;

use nalgebra::{Matrix2, Vector2, Vector3};

use crate::field::{
    build_covariance_backward, sh_basis, sh_basis_grad, sh_coeff_count, GaussianField,
};
use crate::geom::{CameraIntrinsics, Pose};
use crate::parallel::map_rows;

use super::{
    bucket_rows, prepare_splats, RenderOptions, Splat, ALPHA_CLAMP, FOOTPRINT_SIGMA,
    TRANSMITTANCE_CUTOFF,
};

/// Gradients of a scalar image loss with respect to every primitive
/// parameter and a pose twist evaluated at the identity increment.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderGradients {
    pub mu: Vec<Vector3<f64>>,
    pub opacity_logit: Vec<f64>,
    pub log_scale: Vec<Vector3<f64>>,
    pub rotation: Vec<[f64; 4]>,
    /// `n_primitives * coeff_count * 3`, laid out like the primitive SH.
    pub sh: Vec<f64>,
    /// `(omega, v)` twist gradient for the view pose.
    pub pose_twist: [f64; 6],
}

impl RenderGradients {
    pub fn zeros(n_primitives: usize, sh_degree: usize) -> Self {
        Self {
            mu: alloc::vec![Vector3::zeros(); n_primitives],
            opacity_logit: alloc::vec![0.0; n_primitives],
            log_scale: alloc::vec![Vector3::zeros(); n_primitives],
            rotation: alloc::vec![[0.0; 4]; n_primitives],
            sh: alloc::vec![0.0; n_primitives * sh_coeff_count(sh_degree) * 3],
            pose_twist: [0.0; 6],
        }
    }

    pub fn all_finite(&self) -> bool {
        self.mu.iter().all(|v| v.iter().all(|x| x.is_finite()))
            && self.opacity_logit.iter().all(|x| x.is_finite())
            && self.log_scale.iter().all(|v| v.iter().all(|x| x.is_finite()))
            && self.rotation.iter().flatten().all(|x| x.is_finite())
            && self.sh.iter().all(|x| x.is_finite())
            && self.pose_twist.iter().all(|x| x.is_finite())
    }

    /// Euclidean norm of each primitive's position gradient, the densify
    /// signal for adaptive density control.
    pub fn position_grad_vectors(&self) -> &[Vector3<f64>] {
        &self.mu
    }

    /// Element-wise accumulation of another view's gradients (pose twist
    /// excluded: twists are per view).
    pub fn accumulate_field(&mut self, other: &Self) {
        debug_assert_eq!(self.mu.len(), other.mu.len());
        for (a, b) in self.mu.iter_mut().zip(&other.mu) {
            *a += b;
        }
        for (a, b) in self.opacity_logit.iter_mut().zip(&other.opacity_logit) {
            *a += b;
        }
        for (a, b) in self.log_scale.iter_mut().zip(&other.log_scale) {
            *a += b;
        }
        for (a, b) in self.rotation.iter_mut().zip(&other.rotation) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        for (a, b) in self.sh.iter_mut().zip(&other.sh) {
            *a += b;
        }
    }
}

/// Screen-space gradient accumulator for one splat in one row.
#[derive(Debug, Clone, Copy)]
struct SplatAccum {
    d_center: Vector2<f64>,
    d_m: Matrix2<f64>,
    d_color: [f64; 3],
    d_alpha_raw: f64,
}

impl SplatAccum {
    fn zero() -> Self {
        Self {
            d_center: Vector2::zeros(),
            d_m: Matrix2::zeros(),
            d_color: [0.0; 3],
            d_alpha_raw: 0.0,
        }
    }
}

/// Backward pass of [`super::render`]: gradients of
/// `sum_pixels <upstream, color>` for the identical scene, pose, intrinsics
/// and options. The compositing tape is replayed internally, so visibility
/// and sorting always match the forward pass by construction.
pub fn render_backward(
    field: &GaussianField,
    pose: &Pose,
    k: &CameraIntrinsics,
    opts: &RenderOptions,
    upstream: &[f64],
) -> RenderGradients {
    assert!(!field.is_empty(), "cannot backpropagate through an empty field");
    let (w, h) = (k.width as usize, k.height as usize);
    assert_eq!(upstream.len(), w * h * 3, "upstream gradient shape mismatch");

    let splats = prepare_splats(field, pose, k);
    let rows = bucket_rows(&splats, h);
    let bg = opts.background;

    // Per-row accumulation aligned with each row's splat bucket; reduced in
    // row order below so bits are worker-count independent.
    let row_results = map_rows(h, opts.workers, |y| {
        let bucket = &rows[y];
        let mut acc = alloc::vec![SplatAccum::zero(); bucket.len()];
        let mut contribs: Vec<(usize, f64, f64, f64)> = Vec::with_capacity(64);
        for x in 0..w {
            pixel_backward(
                &splats,
                bucket,
                x,
                y,
                &bg,
                &upstream[(y * w + x) * 3..(y * w + x) * 3 + 3],
                &mut acc,
                &mut contribs,
            );
        }
        acc
    });

    let mut global = alloc::vec![SplatAccum::zero(); splats.len()];
    for (y, acc) in row_results.into_iter().enumerate() {
        for (bi, a) in rows[y].iter().zip(acc) {
            let g = &mut global[*bi as usize];
            g.d_center += a.d_center;
            g.d_m += a.d_m;
            g.d_color[0] += a.d_color[0];
            g.d_color[1] += a.d_color[1];
            g.d_color[2] += a.d_color[2];
            g.d_alpha_raw += a.d_alpha_raw;
        }
    }

    chain_to_parameters(field, pose, k, &splats, &global)
}

/// Replays one pixel's compositing chain and accumulates screen-space
/// gradients for every contributing splat.
#[allow(clippy::too_many_arguments)]
fn pixel_backward(
    splats: &[Splat],
    bucket: &[u32],
    x: usize,
    y: usize,
    bg: &[f64; 3],
    g_pix: &[f64],
    acc: &mut [SplatAccum],
    contribs: &mut Vec<(usize, f64, f64, f64)>,
) {
    let cutoff = FOOTPRINT_SIGMA * FOOTPRINT_SIGMA;
    let (px, py) = (x as f64, y as f64);
    contribs.clear();

    // Forward replay: identical arithmetic to the render loop.
    let mut transmittance = 1.0f64;
    for (bi, &si) in bucket.iter().enumerate() {
        let s = &splats[si as usize];
        if x < s.x0 || x > s.x1 {
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
        contribs.push((bi, e, a, transmittance));
        transmittance *= 1.0 - a;
        if transmittance < TRANSMITTANCE_CUTOFF {
            break;
        }
    }

    // Reverse sweep: suffix color behind each splat, background included.
    let mut suffix = [bg[0] * transmittance, bg[1] * transmittance, bg[2] * transmittance];
    for &(bi, e, a, t_before) in contribs.iter().rev() {
        let si = bucket[bi] as usize;
        let s = &splats[si];
        let accum = &mut acc[bi];

        let mut d_aprime = 0.0;
        for ch in 0..3 {
            accum.d_color[ch] += g_pix[ch] * a * t_before;
            d_aprime += g_pix[ch] * (s.color[ch] * t_before - suffix[ch] / (1.0 - a));
        }

        if s.alpha * e < ALPHA_CLAMP {
            accum.d_alpha_raw += e * d_aprime;
            let de = s.alpha * d_aprime;
            let dq = -0.5 * e * de;
            let dx = px - s.center.x;
            let dy = py - s.center.y;
            let m = &s.inv_cov;
            // dq/dd = 2 M d, dq/dM = d d^T.
            let md = Vector2::new(m[(0, 0)] * dx + m[(0, 1)] * dy, m[(1, 0)] * dx + m[(1, 1)] * dy);
            accum.d_center -= md * (2.0 * dq);
            accum.d_m[(0, 0)] += dq * dx * dx;
            accum.d_m[(0, 1)] += dq * dx * dy;
            accum.d_m[(1, 0)] += dq * dy * dx;
            accum.d_m[(1, 1)] += dq * dy * dy;
        }

        for ch in 0..3 {
            suffix[ch] += s.color[ch] * a * t_before;
        }
    }
}

/// Chains accumulated screen-space gradients through projection, covariance,
/// spherical harmonics, and the pose.
fn chain_to_parameters(
    field: &GaussianField,
    pose: &Pose,
    k: &CameraIntrinsics,
    splats: &[Splat],
    accums: &[SplatAccum],
) -> RenderGradients {
    let mut grads = RenderGradients::zeros(field.primitives.len(), field.sh_degree);
    let n_coeff = sh_coeff_count(field.sh_degree);
    let r0 = pose.rotation_matrix();
    let t0 = pose.translation();
    let mut basis = [0.0; 16];
    let mut basis_grad = [Vector3::zeros(); 16];
    let mut twist = [0.0f64; 6];

    for (s, acc) in splats.iter().zip(accums) {
        let g = &field.primitives[s.prim];
        let alpha = s.alpha;

        // Opacity through the sigmoid.
        grads.opacity_logit[s.prim] += alpha * (1.0 - alpha) * acc.d_alpha_raw;

        // Color: through the SH clamp to coefficients and the view direction.
        sh_basis(field.sh_degree, s.view_dir, &mut basis[..n_coeff]);
        sh_basis_grad(field.sh_degree, s.view_dir, &mut basis_grad[..n_coeff]);
        let mut d_dir = Vector3::zeros();
        for ch in 0..3 {
            if s.color_raw[ch] <= 0.0 || s.color_raw[ch] >= 1.0 {
                continue; // clamp saturated: no gradient through this channel
            }
            let gch = acc.d_color[ch];
            if gch == 0.0 {
                continue;
            }
            let base = s.prim * n_coeff * 3;
            for kk in 0..n_coeff {
                grads.sh[base + kk * 3 + ch] += basis[kk] * gch;
                d_dir += basis_grad[kk] * (g.sh[kk * 3 + ch] * gch);
            }
        }
        // dir = m / |m| with m = mu - camera_center.
        let dm_vec = (d_dir - s.view_dir * s.view_dir.dot(&d_dir)) / s.view_len;
        grads.mu[s.prim] += dm_vec;
        let u = r0 * dm_vec;
        twist[3] += u.x;
        twist[4] += u.y;
        twist[5] += u.z;
        let tu = t0.cross(&u);
        twist[0] -= tu.x;
        twist[1] -= tu.y;
        twist[2] -= tu.z;

        // Inverse covariance: dL/dCov2d = -M G M for M = Cov2d^{-1}.
        let m = s.inv_cov;
        let d_cov2d = -(m * acc.d_m * m);

        // Cov2d = B Sigma B^T + blur I with B = J W.
        let b = s.j * r0;
        let sigma = g.covariance();
        let d_sigma = b.transpose() * d_cov2d * b;
        let db = (d_cov2d + d_cov2d.transpose()) * b * sigma;
        let dj = db * r0.transpose();
        let dw = s.j.transpose() * db;

        let (d_ls, d_quat) = build_covariance_backward(g.log_scale, g.rotation, &d_sigma);
        grads.log_scale[s.prim] += d_ls;
        for (dst, src) in grads.rotation[s.prim].iter_mut().zip(d_quat) {
            *dst += src;
        }

        // Projection center and Jacobian entries both pull on p_cam.
        let mut d_pcam = s.j.transpose() * acc.d_center;
        let (xc, yc, zc) = (s.p_cam.x, s.p_cam.y, s.p_cam.z);
        let iz2 = 1.0 / (zc * zc);
        let iz3 = iz2 / zc;
        d_pcam.x += dj[(0, 2)] * (-k.fx * iz2);
        d_pcam.y += dj[(1, 2)] * (-k.fy * iz2);
        d_pcam.z += dj[(0, 0)] * (-k.fx * iz2)
            + dj[(1, 1)] * (-k.fy * iz2)
            + dj[(0, 2)] * (2.0 * k.fx * xc * iz3)
            + dj[(1, 2)] * (2.0 * k.fy * yc * iz3);

        // p_cam = R mu + t.
        grads.mu[s.prim] += r0.transpose() * d_pcam;
        twist[3] += d_pcam.x;
        twist[4] += d_pcam.y;
        twist[5] += d_pcam.z;
        let a_vec = r0 * g.mu;
        let ap = a_vec.cross(&d_pcam);
        twist[0] += ap.x;
        twist[1] += ap.y;
        twist[2] += ap.z;

        // W itself rotates with the twist: dL/domega_j = <dW, [e_j]x W>.
        for c in 0..3 {
            let wc = Vector3::new(r0[(0, c)], r0[(1, c)], r0[(2, c)]);
            let gc = Vector3::new(dw[(0, c)], dw[(1, c)], dw[(2, c)]);
            let cr = wc.cross(&gc);
            twist[0] += cr.x;
            twist[1] += cr.y;
            twist[2] += cr.z;
        }
    }

    grads.pose_twist = twist;
    grads
}
