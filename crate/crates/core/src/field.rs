//! The Gaussian scene representation: anisotropic primitives with
//! log-scale/quaternion covariance, spherical-harmonic color, and adaptive
//! density control.

#[cfg(not(feature = "std"))]
use num_traits::Float;

use alloc::vec::Vec;
use nalgebra::{Matrix3, Vector3};

use crate::rng::{seeded, standard_normal};

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse of [`sigmoid`] for y in (0, 1).
pub fn logit(y: f64) -> f64 {
    (y / (1.0 - y)).ln()
}

pub const SH_C0: f64 = 0.28209479177387814;
pub const SH_C1: f64 = 0.4886025119029199;
pub const SH_C2: [f64; 5] = [
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
];
pub const SH_C3: [f64; 7] = [
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
];

pub fn sh_coeff_count(degree: usize) -> usize {
    (degree + 1) * (degree + 1)
}

/// One splat. Opacity is stored as a logit and scales as logarithms so the
/// optimizer can move freely while alpha stays in (0,1) and the covariance
/// stays positive definite.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPrimitive {
    pub mu: Vector3<f64>,
    pub opacity_logit: f64,
    pub log_scale: Vector3<f64>,
    /// Unit quaternion `(w, x, y, z)`; re-normalized after optimizer steps.
    pub rotation: [f64; 4],
    /// `(degree+1)^2 * 3` values, basis-major: `sh[k * 3 + channel]`.
    pub sh: Vec<f64>,
}

impl GaussianPrimitive {
    /// Isotropic primitive with a DC-only gray color, useful as a seed.
    pub fn isotropic(mu: Vector3<f64>, scale: f64, opacity: f64, rgb: [f64; 3], degree: usize) -> Self {
        let mut sh = alloc::vec![0.0; sh_coeff_count(degree) * 3];
        for c in 0..3 {
            sh[c] = (rgb[c] - 0.5) / SH_C0;
        }
        Self {
            mu,
            opacity_logit: logit(opacity.clamp(1e-6, 1.0 - 1e-6)),
            log_scale: Vector3::repeat(scale.ln()),
            rotation: [1.0, 0.0, 0.0, 0.0],
            sh,
        }
    }

    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit)
    }

    pub fn covariance(&self) -> Matrix3<f64> {
        build_covariance(self.log_scale, self.rotation)
    }
}

/// An ordered set of primitives sharing one SH degree.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianField {
    pub primitives: Vec<GaussianPrimitive>,
    pub sh_degree: usize,
}

impl GaussianField {
    pub fn new(primitives: Vec<GaussianPrimitive>, sh_degree: usize) -> Self {
        let n = sh_coeff_count(sh_degree) * 3;
        debug_assert!(primitives.iter().all(|p| p.sh.len() == n));
        Self { primitives, sh_degree }
    }

    pub fn len(&self) -> usize {
        self.primitives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.primitives.is_empty()
    }
}

/// Normalizes a raw quaternion, returning the unit quaternion and the
/// original norm.
pub fn normalize_quat(q: [f64; 4]) -> ([f64; 4], f64) {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    ([q[0] / n, q[1] / n, q[2] / n, q[3] / n], n)
}

/// Rotation matrix of a unit quaternion `(w, x, y, z)`.
pub fn quat_to_matrix(q: [f64; 4]) -> Matrix3<f64> {
    let [w, x, y, z] = q;
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Pulls a gradient on the rotation matrix back to the raw (unnormalized)
/// quaternion, differentiating through the normalization.
pub fn quat_to_matrix_backward(q_raw: [f64; 4], d_r: &Matrix3<f64>) -> [f64; 4] {
    let (q, norm) = normalize_quat(q_raw);
    let [w, x, y, z] = q;
    // dR/dw, dR/dx, dR/dy, dR/dz for the unit quaternion.
    let dw = Matrix3::new(0.0, -2.0 * z, 2.0 * y, 2.0 * z, 0.0, -2.0 * x, -2.0 * y, 2.0 * x, 0.0);
    let dx = Matrix3::new(0.0, 2.0 * y, 2.0 * z, 2.0 * y, -4.0 * x, -2.0 * w, 2.0 * z, 2.0 * w, -4.0 * x);
    let dy = Matrix3::new(-4.0 * y, 2.0 * x, 2.0 * w, 2.0 * x, 0.0, 2.0 * z, -2.0 * w, 2.0 * z, -4.0 * y);
    let dz = Matrix3::new(-4.0 * z, -2.0 * w, 2.0 * x, 2.0 * w, -4.0 * z, 2.0 * y, 2.0 * x, 2.0 * y, 0.0);
    let g_unit = [
        dw.component_mul(d_r).sum(),
        dx.component_mul(d_r).sum(),
        dy.component_mul(d_r).sum(),
        dz.component_mul(d_r).sum(),
    ];
    // Through q_hat = q / |q|: g = (g_unit - q_hat (q_hat . g_unit)) / |q|.
    let dot = q[0] * g_unit[0] + q[1] * g_unit[1] + q[2] * g_unit[2] + q[3] * g_unit[3];
    [
        (g_unit[0] - q[0] * dot) / norm,
        (g_unit[1] - q[1] * dot) / norm,
        (g_unit[2] - q[2] * dot) / norm,
        (g_unit[3] - q[3] * dot) / norm,
    ]
}

/// `Sigma = R S S^T R^T` with `S = diag(exp(log_scale))`. Positive definite
/// for any finite input.
pub fn build_covariance(log_scale: Vector3<f64>, rotation: [f64; 4]) -> Matrix3<f64> {
    let (q, _) = normalize_quat(rotation);
    let r = quat_to_matrix(q);
    let s = Vector3::new(log_scale.x.exp(), log_scale.y.exp(), log_scale.z.exp());
    let m = Matrix3::from_columns(&[r.column(0) * s.x, r.column(1) * s.y, r.column(2) * s.z]);
    m * m.transpose()
}

/// Backward of [`build_covariance`]: maps a gradient on Sigma to gradients
/// on the log-scales and the raw quaternion.
pub fn build_covariance_backward(
    log_scale: Vector3<f64>,
    rotation: [f64; 4],
    d_sigma: &Matrix3<f64>,
) -> (Vector3<f64>, [f64; 4]) {
    let (q, _) = normalize_quat(rotation);
    let r = quat_to_matrix(q);
    let s = Vector3::new(log_scale.x.exp(), log_scale.y.exp(), log_scale.z.exp());
    let m = Matrix3::from_columns(&[r.column(0) * s.x, r.column(1) * s.y, r.column(2) * s.z]);
    // Sigma = M M^T  =>  dL/dM = (G + G^T) M.
    let dm = (d_sigma + d_sigma.transpose()) * m;
    // M = R diag(s): dL/dR = dM diag(s); dL/ds_i = (R^T dM)_{ii}.
    let dr = Matrix3::from_columns(&[dm.column(0) * s.x, dm.column(1) * s.y, dm.column(2) * s.z]);
    let rt_dm = r.transpose() * dm;
    let d_log_scale = Vector3::new(rt_dm[(0, 0)] * s.x, rt_dm[(1, 1)] * s.y, rt_dm[(2, 2)] * s.z);
    let d_quat = quat_to_matrix_backward(rotation, &dr);
    (d_log_scale, d_quat)
}

/// Evaluates the splat density `alpha * exp(-1/2 (p-mu)^T Sigma^-1 (p-mu))`.
pub fn eval_gaussian(p: Vector3<f64>, g: &GaussianPrimitive) -> f64 {
    let sigma = g.covariance();
    let inv = sigma.try_inverse().expect("covariance is positive definite");
    let d = p - g.mu;
    g.opacity() * (-0.5 * (d.transpose() * inv * d)[(0, 0)]).exp()
}

/// Evaluates the real SH basis up to `degree` at a unit direction.
/// `out` must hold `(degree+1)^2` entries.
pub fn sh_basis(degree: usize, dir: Vector3<f64>, out: &mut [f64]) {
    let (x, y, z) = (dir.x, dir.y, dir.z);
    out[0] = SH_C0;
    if degree >= 1 {
        out[1] = -SH_C1 * y;
        out[2] = SH_C1 * z;
        out[3] = -SH_C1 * x;
    }
    if degree >= 2 {
        out[4] = SH_C2[0] * x * y;
        out[5] = SH_C2[1] * y * z;
        out[6] = SH_C2[2] * (2.0 * z * z - x * x - y * y);
        out[7] = SH_C2[3] * x * z;
        out[8] = SH_C2[4] * (x * x - y * y);
    }
    if degree >= 3 {
        out[9] = SH_C3[0] * y * (3.0 * x * x - y * y);
        out[10] = SH_C3[1] * x * y * z;
        out[11] = SH_C3[2] * y * (4.0 * z * z - x * x - y * y);
        out[12] = SH_C3[3] * z * (2.0 * z * z - 3.0 * x * x - 3.0 * y * y);
        out[13] = SH_C3[4] * x * (4.0 * z * z - x * x - y * y);
        out[14] = SH_C3[5] * z * (x * x - y * y);
        out[15] = SH_C3[6] * x * (x * x - 3.0 * y * y);
    }
}

/// Gradients of each basis function with respect to the direction
/// components, treating (x, y, z) as free coordinates.
pub fn sh_basis_grad(degree: usize, dir: Vector3<f64>, out: &mut [Vector3<f64>]) {
    let (x, y, z) = (dir.x, dir.y, dir.z);
    out[0] = Vector3::zeros();
    if degree >= 1 {
        out[1] = Vector3::new(0.0, -SH_C1, 0.0);
        out[2] = Vector3::new(0.0, 0.0, SH_C1);
        out[3] = Vector3::new(-SH_C1, 0.0, 0.0);
    }
    if degree >= 2 {
        out[4] = Vector3::new(SH_C2[0] * y, SH_C2[0] * x, 0.0);
        out[5] = Vector3::new(0.0, SH_C2[1] * z, SH_C2[1] * y);
        out[6] = Vector3::new(-2.0 * SH_C2[2] * x, -2.0 * SH_C2[2] * y, 4.0 * SH_C2[2] * z);
        out[7] = Vector3::new(SH_C2[3] * z, 0.0, SH_C2[3] * x);
        out[8] = Vector3::new(2.0 * SH_C2[4] * x, -2.0 * SH_C2[4] * y, 0.0);
    }
    if degree >= 3 {
        out[9] = Vector3::new(SH_C3[0] * 6.0 * x * y, SH_C3[0] * (3.0 * x * x - 3.0 * y * y), 0.0);
        out[10] = Vector3::new(SH_C3[1] * y * z, SH_C3[1] * x * z, SH_C3[1] * x * y);
        out[11] = Vector3::new(
            -2.0 * SH_C3[2] * x * y,
            SH_C3[2] * (4.0 * z * z - x * x - 3.0 * y * y),
            8.0 * SH_C3[2] * y * z,
        );
        out[12] = Vector3::new(
            -6.0 * SH_C3[3] * x * z,
            -6.0 * SH_C3[3] * y * z,
            SH_C3[3] * (6.0 * z * z - 3.0 * x * x - 3.0 * y * y),
        );
        out[13] = Vector3::new(
            SH_C3[4] * (4.0 * z * z - 3.0 * x * x - y * y),
            -2.0 * SH_C3[4] * x * y,
            8.0 * SH_C3[4] * x * z,
        );
        out[14] = Vector3::new(2.0 * SH_C3[5] * x * z, -2.0 * SH_C3[5] * y * z, SH_C3[5] * (x * x - y * y));
        out[15] = Vector3::new(SH_C3[6] * (3.0 * x * x - 3.0 * y * y), -6.0 * SH_C3[6] * x * y, 0.0);
    }
}

/// View-dependent color: `clamp(0.5 + sum_k c_k B_k(dir), 0, 1)` per
/// channel.
pub fn sh_color(sh: &[f64], degree: usize, view_dir: Vector3<f64>) -> [f64; 3] {
    let mut basis = [0.0; 16];
    let n = sh_coeff_count(degree);
    sh_basis(degree, view_dir, &mut basis[..n]);
    let mut rgb = [0.0; 3];
    for (c, out) in rgb.iter_mut().enumerate() {
        let mut acc = 0.5;
        for (k, b) in basis[..n].iter().enumerate() {
            acc += sh[k * 3 + c] * b;
        }
        *out = acc.clamp(0.0, 1.0);
    }
    rgb
}

/// Thresholds steering clone/split/prune decisions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdcConfig {
    /// Primitives with opacity below this are removed.
    pub prune_opacity: f64,
    /// Positional-gradient norm above which a primitive densifies.
    pub densify_grad: f64,
    /// Largest axis scale separating the clone regime from the split regime.
    pub split_scale: f64,
}

impl AdcConfig {
    /// Defaults scaled to the scene extent.
    pub fn for_extent(extent: f64) -> Self {
        Self { prune_opacity: 0.005, densify_grad: 2e-4, split_scale: 0.01 * extent }
    }
}

const SPLIT_LOG_SHRINK: f64 = 0.47000362924573563; // ln 1.6

/// One densify/prune pass.
///
/// - opacity below `prune_opacity` removes the primitive (never emptying the
///   field: the highest-opacity one survives a total prune);
/// - gradient norm above `densify_grad` with all scales below `split_scale`
///   clones the primitive, shifting the copy along the gradient by its
///   largest axis scale;
/// - otherwise an over-sized primitive splits into two children with scales
///   shrunk by ln 1.6 and positions drawn from the parent Gaussian
///   (rejection-sampled inside the 4-sigma Mahalanobis shell, so children
///   never land in the far tail).
///
/// Deterministic for a fixed seed: the RNG is consumed in primitive order.
pub fn adaptive_density_control(
    field: &GaussianField,
    position_grads: &[Vector3<f64>],
    cfg: &AdcConfig,
    seed: u64,
) -> GaussianField {
    assert_eq!(field.primitives.len(), position_grads.len(), "one gradient per primitive");
    let mut rng = seeded(seed);
    let mut out: Vec<GaussianPrimitive> = Vec::with_capacity(field.primitives.len());

    for (g, grad) in field.primitives.iter().zip(position_grads) {
        if g.opacity() < cfg.prune_opacity {
            continue;
        }
        let gnorm = grad.norm();
        if gnorm <= cfg.densify_grad {
            out.push(g.clone());
            continue;
        }
        let max_scale = g.log_scale.max().exp();
        if max_scale < cfg.split_scale {
            // Clone: keep the original, shift the copy along the gradient.
            out.push(g.clone());
            let mut child = g.clone();
            if gnorm > 0.0 {
                child.mu += grad / gnorm * max_scale;
            }
            out.push(child);
        } else {
            // Split into two sampled children with shrunk scales.
            let (q, _) = normalize_quat(g.rotation);
            let r = quat_to_matrix(q);
            let s = Vector3::new(g.log_scale.x.exp(), g.log_scale.y.exp(), g.log_scale.z.exp());
            for _ in 0..2 {
                let z = sample_ball3(&mut rng, 4.0);
                let offset = r * Vector3::new(s.x * z.x, s.y * z.y, s.z * z.z);
                let mut child = g.clone();
                child.mu += offset;
                child.log_scale -= Vector3::repeat(SPLIT_LOG_SHRINK);
                out.push(child);
            }
        }
    }

    if out.is_empty() && !field.primitives.is_empty() {
        let best = field
            .primitives
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.opacity_logit.total_cmp(&b.1.opacity_logit))
            .map(|(i, _)| i)
            .unwrap();
        out.push(field.primitives[best].clone());
    }

    GaussianField { primitives: out, sh_degree: field.sh_degree }
}

/// Standard-normal 3-vector rejection-sampled to `|z| < bound`.
fn sample_ball3(rng: &mut rand_chacha::ChaCha8Rng, bound: f64) -> Vector3<f64> {
    loop {
        let z = Vector3::new(standard_normal(rng), standard_normal(rng), standard_normal(rng));
        if z.norm_squared() < bound * bound {
            return z;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{seeded, uniform};
    use approx::assert_relative_eq;

    fn random_primitive(rng: &mut rand_chacha::ChaCha8Rng, degree: usize) -> GaussianPrimitive {
        let q = [
            uniform(rng, -1.0, 1.0),
            uniform(rng, -1.0, 1.0),
            uniform(rng, -1.0, 1.0),
            uniform(rng, -1.0, 1.0),
        ];
        let mut sh = alloc::vec![0.0; sh_coeff_count(degree) * 3];
        for c in sh.iter_mut() {
            *c = uniform(rng, -0.5, 0.5);
        }
        GaussianPrimitive {
            mu: Vector3::new(uniform(rng, -1.0, 1.0), uniform(rng, -1.0, 1.0), uniform(rng, -1.0, 1.0)),
            opacity_logit: uniform(rng, -3.0, 3.0),
            log_scale: Vector3::new(uniform(rng, -3.0, 0.0), uniform(rng, -3.0, 0.0), uniform(rng, -3.0, 0.0)),
            rotation: normalize_quat(q).0,
            sh,
        }
    }

    #[test]
    fn covariance_unit_scales_identity_rotation() {
        let sigma = build_covariance(Vector3::zeros(), [1.0, 0.0, 0.0, 0.0]);
        assert_relative_eq!(sigma, Matrix3::identity(), epsilon = 1e-15);
    }

    #[test]
    fn covariance_axis_aligned() {
        let sigma = build_covariance(Vector3::new(2.0f64.ln(), 0.0, 0.0), [1.0, 0.0, 0.0, 0.0]);
        assert_relative_eq!(sigma, Matrix3::from_diagonal(&Vector3::new(4.0, 1.0, 1.0)), epsilon = 1e-12);
    }

    #[test]
    fn covariance_determinant_oracle() {
        let mut rng = seeded(21);
        for _ in 0..200 {
            let ls = Vector3::new(uniform(&mut rng, -2.0, 1.0), uniform(&mut rng, -2.0, 1.0), uniform(&mut rng, -2.0, 1.0));
            let q = normalize_quat([
                uniform(&mut rng, -1.0, 1.0),
                uniform(&mut rng, -1.0, 1.0),
                uniform(&mut rng, -1.0, 1.0),
                uniform(&mut rng, -1.0, 1.0),
            ])
            .0;
            let sigma = build_covariance(ls, q);
            let det_expected = (2.0 * ls.sum()).exp();
            assert_relative_eq!(sigma.determinant(), det_expected, max_relative = 1e-9);
            // Symmetry within 1e-12.
            assert!((sigma - sigma.transpose()).norm() < 1e-12);
        }
    }

    #[test]
    fn covariance_is_psd_cholesky() {
        let mut rng = seeded(22);
        for _ in 0..1000 {
            let ls = Vector3::new(uniform(&mut rng, -4.0, 2.0), uniform(&mut rng, -4.0, 2.0), uniform(&mut rng, -4.0, 2.0));
            let q = [
                uniform(&mut rng, -1.0, 1.0),
                uniform(&mut rng, -1.0, 1.0),
                uniform(&mut rng, -1.0, 1.0),
                uniform(&mut rng, -1.0, 1.0),
            ];
            let sigma = build_covariance(ls, normalize_quat(q).0);
            assert!(nalgebra::Cholesky::new(sigma).is_some(), "not PSD: {sigma}");
        }
    }

    #[test]
    fn eval_gaussian_center_and_unit_sphere() {
        let mut g = random_primitive(&mut seeded(3), 0);
        g.log_scale = Vector3::zeros();
        g.rotation = [1.0, 0.0, 0.0, 0.0];
        let alpha = g.opacity();
        assert_relative_eq!(eval_gaussian(g.mu, &g), alpha, epsilon = 1e-12);
        let p = g.mu + Vector3::new(1.0, 0.0, 0.0);
        assert_relative_eq!(eval_gaussian(p, &g), alpha * (-0.5f64).exp(), epsilon = 1e-12);
    }

    #[test]
    fn eval_gaussian_matches_explicit_inverse() {
        let mut rng = seeded(4);
        for _ in 0..100 {
            let g = random_primitive(&mut rng, 0);
            let p = g.mu + Vector3::new(uniform(&mut rng, -0.5, 0.5), uniform(&mut rng, -0.5, 0.5), uniform(&mut rng, -0.5, 0.5));
            // Independent route: adjugate inverse of the dense covariance.
            let s = build_covariance(g.log_scale, g.rotation);
            let det = s[(0, 0)] * (s[(1, 1)] * s[(2, 2)] - s[(1, 2)] * s[(2, 1)])
                - s[(0, 1)] * (s[(1, 0)] * s[(2, 2)] - s[(1, 2)] * s[(2, 0)])
                + s[(0, 2)] * (s[(1, 0)] * s[(2, 1)] - s[(1, 1)] * s[(2, 0)]);
            let mut inv = Matrix3::zeros();
            for i in 0..3 {
                for j in 0..3 {
                    let (a, b) = ((i + 1) % 3, (i + 2) % 3);
                    let (c, d) = ((j + 1) % 3, (j + 2) % 3);
                    inv[(j, i)] = (s[(a, c)] * s[(b, d)] - s[(a, d)] * s[(b, c)]) / det;
                }
            }
            let diff = p - g.mu;
            let expected = g.opacity() * (-0.5 * (diff.transpose() * inv * diff)[(0, 0)]).exp();
            assert_relative_eq!(eval_gaussian(p, &g), expected, epsilon = 1e-10);
        }
    }

    #[test]
    fn eval_gaussian_bounded_by_alpha() {
        let mut rng = seeded(5);
        let g = random_primitive(&mut rng, 0);
        let alpha = g.opacity();
        for _ in 0..200 {
            let p = Vector3::new(uniform(&mut rng, -2.0, 2.0), uniform(&mut rng, -2.0, 2.0), uniform(&mut rng, -2.0, 2.0));
            let v = eval_gaussian(p, &g);
            assert!(v <= alpha + 1e-15);
            if (p - g.mu).norm() > 1e-9 {
                assert!(v < alpha);
            }
        }
    }

    #[test]
    fn sh_dc_is_direction_independent() {
        let sh = [0.3, -0.2, 0.8];
        let a = sh_color(&sh, 0, Vector3::new(0.0, 0.0, 1.0));
        let b = sh_color(&sh, 0, Vector3::new(1.0, 0.0, 0.0).normalize());
        assert_eq!(a, b);
    }

    #[test]
    fn sh_degree1_band_is_odd() {
        // Only l=1 coefficients active: the raw (pre-offset) sum negates with
        // the direction.
        let mut sh = alloc::vec![0.0; 4 * 3];
        sh[1 * 3] = 0.7;
        sh[2 * 3] = -0.4;
        sh[3 * 3] = 0.2;
        let dir = Vector3::new(0.3, -0.5, 0.8).normalize();
        let mut basis = [0.0; 4];
        sh_basis(1, dir, &mut basis);
        let raw_pos: f64 = (1..4).map(|k| sh[k * 3] * basis[k]).sum();
        sh_basis(1, -dir, &mut basis);
        let raw_neg: f64 = (1..4).map(|k| sh[k * 3] * basis[k]).sum();
        assert_relative_eq!(raw_pos, -raw_neg, epsilon = 1e-12);
    }

    #[test]
    fn sh_matches_independent_basis_table() {
        // Independent oracle: constants derived from the closed-form
        // normalization factors instead of the hard-coded table.
        let pi = core::f64::consts::PI;
        let c0 = 0.5 * (1.0 / pi).sqrt();
        let c1 = (3.0 / (4.0 * pi)).sqrt();
        let c20 = 0.5 * (15.0 / pi).sqrt();
        let c22 = 0.25 * (5.0 / pi).sqrt();
        let c24 = 0.25 * (15.0 / pi).sqrt();
        let mut rng = seeded(6);
        for _ in 0..100 {
            let dir = Vector3::new(
                uniform(&mut rng, -1.0, 1.0),
                uniform(&mut rng, -1.0, 1.0),
                uniform(&mut rng, -1.0, 1.0),
            )
            .normalize();
            let (x, y, z) = (dir.x, dir.y, dir.z);
            let expected = [
                c0,
                -c1 * y,
                c1 * z,
                -c1 * x,
                c20 * x * y,
                -c20 * y * z,
                c22 * (2.0 * z * z - x * x - y * y),
                -c20 * x * z,
                c24 * (x * x - y * y),
            ];
            let mut basis = [0.0; 9];
            sh_basis(2, dir, &mut basis);
            for k in 0..9 {
                assert_relative_eq!(basis[k], expected[k], epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn sh_color_random_coeff_evaluation() {
        let mut rng = seeded(7);
        for degree in 0..=3usize {
            let n = sh_coeff_count(degree);
            let mut sh = alloc::vec![0.0; n * 3];
            for c in sh.iter_mut() {
                *c = uniform(&mut rng, -0.3, 0.3);
            }
            let dir = Vector3::new(0.2, 0.4, -0.9).normalize();
            let mut basis = [0.0; 16];
            sh_basis(degree, dir, &mut basis[..n]);
            let color = sh_color(&sh, degree, dir);
            for ch in 0..3 {
                let raw: f64 = 0.5 + (0..n).map(|k| sh[k * 3 + ch] * basis[k]).sum::<f64>();
                assert_relative_eq!(color[ch], raw.clamp(0.0, 1.0), epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn adc_noop_when_nothing_triggers() {
        let mut rng = seeded(8);
        let prims: Vec<_> = (0..10).map(|_| random_primitive(&mut rng, 1)).collect();
        let field = GaussianField::new(prims, 1);
        let grads = alloc::vec![Vector3::zeros(); field.len()];
        let cfg = AdcConfig::for_extent(1.0);
        let out = adaptive_density_control(&field, &grads, &cfg, 99);
        assert_eq!(out, field);
    }

    #[test]
    fn adc_prunes_transparent_primitive() {
        let mut rng = seeded(9);
        let mut prims: Vec<_> = (0..5).map(|_| random_primitive(&mut rng, 0)).collect();
        prims[2].opacity_logit = -20.0;
        let field = GaussianField::new(prims, 0);
        let grads = alloc::vec![Vector3::zeros(); field.len()];
        let out = adaptive_density_control(&field, &grads, &AdcConfig::for_extent(1.0), 1);
        assert_eq!(out.len(), 4);
    }

    #[test]
    fn adc_never_empties_the_field() {
        let mut rng = seeded(10);
        let mut prims: Vec<_> = (0..3).map(|_| random_primitive(&mut rng, 0)).collect();
        for p in &mut prims {
            p.opacity_logit = -20.0;
        }
        prims[1].opacity_logit = -19.0;
        let field = GaussianField::new(prims.clone(), 0);
        let grads = alloc::vec![Vector3::zeros(); 3];
        let out = adaptive_density_control(&field, &grads, &AdcConfig::for_extent(1.0), 1);
        assert_eq!(out.len(), 1);
        assert_eq!(out.primitives[0], prims[1]);
    }

    #[test]
    fn adc_split_children_stay_within_four_sigma() {
        let mut rng = seeded(11);
        let cfg = AdcConfig { prune_opacity: 0.005, densify_grad: 2e-4, split_scale: 0.01 };
        for trial in 0..1000 {
            let mut g = random_primitive(&mut rng, 0);
            g.log_scale = Vector3::new(-2.0, -2.5, -3.0); // max scale 0.135 > split_scale
            g.opacity_logit = 2.0;
            let parent = g.clone();
            let field = GaussianField::new(alloc::vec![g], 0);
            let grads = alloc::vec![Vector3::new(1e-3, 0.0, 0.0)];
            let out = adaptive_density_control(&field, &grads, &cfg, trial as u64);
            assert_eq!(out.len(), 2);
            let sigma = parent.covariance();
            let inv = sigma.try_inverse().unwrap();
            for child in &out.primitives {
                let d = child.mu - parent.mu;
                let m2 = (d.transpose() * inv * d)[(0, 0)];
                assert!(m2 < 16.0, "Mahalanobis^2 {m2} on trial {trial}");
                assert_relative_eq!(child.log_scale, parent.log_scale - Vector3::repeat(SPLIT_LOG_SHRINK));
            }
        }
    }

    #[test]
    fn adc_clone_shifts_along_gradient() {
        let mut g = random_primitive(&mut seeded(12), 0);
        g.log_scale = Vector3::repeat(-6.0); // tiny: clone regime
        g.opacity_logit = 1.0;
        let field = GaussianField::new(alloc::vec![g.clone()], 0);
        let grads = alloc::vec![Vector3::new(0.0, 1e-2, 0.0)];
        let cfg = AdcConfig::for_extent(1.0);
        let out = adaptive_density_control(&field, &grads, &cfg, 7);
        assert_eq!(out.len(), 2);
        assert_eq!(out.primitives[0], g);
        let shift = out.primitives[1].mu - g.mu;
        assert_relative_eq!(shift, Vector3::new(0.0, (-6.0f64).exp(), 0.0), epsilon = 1e-12);
    }

    #[test]
    fn adc_is_seed_deterministic() {
        let mut rng = seeded(13);
        let prims: Vec<_> = (0..20).map(|_| random_primitive(&mut rng, 1)).collect();
        let field = GaussianField::new(prims, 1);
        let grads: Vec<_> = (0..20)
            .map(|_| Vector3::new(uniform(&mut rng, -1e-3, 1e-3), uniform(&mut rng, -1e-3, 1e-3), 0.0))
            .collect();
        let cfg = AdcConfig { prune_opacity: 0.005, densify_grad: 2e-4, split_scale: 0.05 };
        let a = adaptive_density_control(&field, &grads, &cfg, 31);
        let b = adaptive_density_control(&field, &grads, &cfg, 31);
        assert_eq!(a, b);
    }
}
