//! Gaussian-guided positional anchoring: projecting point-map anchors into a
//! view and turning the 2D locations into a learnable positional embedding
//! shared by every fusion stage.

#[cfg(not(feature = "std"))]
use num_traits::Float;

use alloc::string::String;
use alloc::vec::Vec;

use crate::geom::{project_point, CameraIntrinsics, PointMap, Pose};
use crate::nn::{tanh_backward, tanh_forward, Linear, Param, ParamVisitor};
use crate::rng::seeded;

/// Projected point-map anchors for one view.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSet {
    /// Pixel coordinates, one per point-map entry (row-major).
    pub uv: Vec<[f64; 2]>,
    /// False for behind-camera, out-of-image, or invalid point-map entries.
    pub valid: Vec<bool>,
}

/// Projects every valid point-map entry into the view. Anchors behind the
/// camera or outside `[0, W) x [0, H)` are flagged invalid.
pub fn anchor_points(pmap: &PointMap, pose: &Pose, k: &CameraIntrinsics) -> AnchorSet {
    let mut uv = alloc::vec![[0.0f64; 2]; pmap.len()];
    let mut valid = alloc::vec![false; pmap.len()];
    for i in 0..pmap.len() {
        if !pmap.valid[i] {
            continue;
        }
        if let Some((u, _)) = project_point(pmap.points[i], pose, k) {
            if (0.0..k.width as f64).contains(&u.x) && (0.0..k.height as f64).contains(&u.y) {
                uv[i] = [u.x, u.y];
                valid[i] = true;
            }
        }
    }
    AnchorSet { uv, valid }
}

/// Learnable positional encoder: per-frequency scales applied to both
/// normalized coordinates, sin/cos features, then a two-layer MLP.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionalEncoder {
    /// One learnable scale per frequency.
    pub lambda: Param,
    pub w0: Linear,
    pub w1: Linear,
    pub frequencies: usize,
    pub hidden: usize,
    pub out_dim: usize,
}

impl PositionalEncoder {
    /// Frequencies initialize geometrically at `2^f * pi`.
    pub fn new(frequencies: usize, hidden: usize, out_dim: usize, seed: u64) -> Self {
        let mut rng = seeded(seed);
        let lambda = Param::new(
            (0..frequencies)
                .map(|f| (1u64 << f) as f64 * core::f64::consts::PI)
                .collect(),
        );
        Self {
            lambda,
            w0: Linear::new(4 * frequencies, hidden, &mut rng),
            w1: Linear::new(hidden, out_dim, &mut rng),
            frequencies,
            hidden,
            out_dim,
        }
    }

    pub fn feature_dim(&self) -> usize {
        4 * self.frequencies
    }

    /// Normalizes pixel coordinates to [-1, 1].
    pub fn normalize_uv(uv: [f64; 2], k: &CameraIntrinsics) -> [f64; 2] {
        [2.0 * uv[0] / k.width as f64 - 1.0, 2.0 * uv[1] / k.height as f64 - 1.0]
    }

    /// Pre-MLP sin/cos features of a normalized coordinate pair: the sin
    /// block `sin(lambda_f * u_c)` over (frequency, coordinate), then the
    /// matching cos block.
    pub fn pre_mlp_features(&self, u_hat: [f64; 2], out: &mut [f64]) {
        let nf = self.frequencies;
        debug_assert_eq!(out.len(), 4 * nf);
        for f in 0..nf {
            let l = self.lambda.value[f];
            for c in 0..2 {
                let arg = l * u_hat[c];
                out[f * 2 + c] = arg.sin();
                out[2 * nf + f * 2 + c] = arg.cos();
            }
        }
    }

    /// Full encoding of one pixel coordinate.
    pub fn encode(&self, uv: [f64; 2], k: &CameraIntrinsics) -> Vec<f64> {
        let u_hat = Self::normalize_uv(uv, k);
        let mut feats = alloc::vec![0.0; self.feature_dim()];
        self.pre_mlp_features(u_hat, &mut feats);
        let mut hidden = alloc::vec![0.0; self.hidden];
        self.w0.forward(&feats, &mut hidden);
        tanh_forward(&mut hidden);
        let mut out = alloc::vec![0.0; self.out_dim];
        self.w1.forward(&hidden, &mut out);
        out
    }

    pub fn visit(&mut self, f: &mut ParamVisitor) {
        f(String::from("pe.lambda"), &mut self.lambda);
        f(String::from("pe.mlp.w0"), &mut self.w0.weight);
        f(String::from("pe.mlp.b0"), &mut self.w0.bias);
        f(String::from("pe.mlp.w1"), &mut self.w1.weight);
        f(String::from("pe.mlp.b1"), &mut self.w1.bias);
    }

    pub fn zero_grads(&mut self) {
        self.visit(&mut |_, p| p.zero_grad());
    }
}

/// Dense positional grid with per-pixel anchors for one view.
#[derive(Debug, Clone, PartialEq)]
pub struct PeGrid {
    pub width: usize,
    pub height: usize,
    pub out_dim: usize,
    /// `height * width * out_dim` positional embeddings.
    pub data: Vec<f64>,
    /// Reference points for deformable sampling; invalid anchors fall back
    /// to the pixel's own coordinates.
    pub anchors: Vec<[f64; 2]>,
    /// Validity flags from the anchor projection.
    pub valid: Vec<bool>,
}

impl PeGrid {
    pub fn pe(&self, x: usize, y: usize) -> &[f64] {
        let i = (y * self.width + x) * self.out_dim;
        &self.data[i..i + self.out_dim]
    }
}

/// Forward tape: everything needed to backpropagate the grid without
/// recomputation.
#[derive(Debug, Clone)]
pub struct PeGridTape {
    u_hat: Vec<[f64; 2]>,
    feats: Vec<f64>,
    hidden: Vec<f64>,
}

/// Builds the dense positional grid: every pixel carries the encoding of its
/// own anchor, and invalid anchors receive the encoding of the normalized
/// origin.
pub fn pe_grid(pmap: &PointMap, pose: &Pose, k: &CameraIntrinsics, enc: &PositionalEncoder) -> (PeGrid, PeGridTape) {
    let (w, h) = (pmap.width, pmap.height);
    assert_eq!(w, k.width as usize, "point map must be pixel-aligned with the view");
    assert_eq!(h, k.height as usize);
    let anchors = anchor_points(pmap, pose, k);
    let nf = enc.feature_dim();
    let mut grid = PeGrid {
        width: w,
        height: h,
        out_dim: enc.out_dim,
        data: alloc::vec![0.0; w * h * enc.out_dim],
        anchors: alloc::vec![[0.0; 2]; w * h],
        valid: anchors.valid.clone(),
    };
    let mut tape = PeGridTape {
        u_hat: alloc::vec![[0.0; 2]; w * h],
        feats: alloc::vec![0.0; w * h * nf],
        hidden: alloc::vec![0.0; w * h * enc.hidden],
    };

    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let u_hat = if anchors.valid[i] {
                grid.anchors[i] = anchors.uv[i];
                PositionalEncoder::normalize_uv(anchors.uv[i], k)
            } else {
                grid.anchors[i] = [x as f64, y as f64];
                [0.0, 0.0]
            };
            tape.u_hat[i] = u_hat;
            let feats = &mut tape.feats[i * nf..(i + 1) * nf];
            enc.pre_mlp_features(u_hat, feats);
            let hidden = &mut tape.hidden[i * enc.hidden..(i + 1) * enc.hidden];
            enc.w0.forward(feats, hidden);
            tanh_forward(hidden);
            enc.w1.forward(hidden, &mut grid.data[i * enc.out_dim..(i + 1) * enc.out_dim]);
        }
    }
    (grid, tape)
}

/// Accumulates encoder parameter gradients from a gradient on the dense
/// grid. Anchors are treated as fixed inputs.
pub fn pe_grid_backward(enc: &mut PositionalEncoder, tape: &PeGridTape, d_grid: &[f64]) {
    let nf = enc.feature_dim();
    let n_px = tape.u_hat.len();
    debug_assert_eq!(d_grid.len(), n_px * enc.out_dim);
    let mut d_hidden = alloc::vec![0.0; enc.hidden];
    let mut d_feats = alloc::vec![0.0; nf];
    for i in 0..n_px {
        let dy = &d_grid[i * enc.out_dim..(i + 1) * enc.out_dim];
        if dy.iter().all(|g| *g == 0.0) {
            continue;
        }
        let hidden = &tape.hidden[i * enc.hidden..(i + 1) * enc.hidden];
        let feats = &tape.feats[i * nf..(i + 1) * nf];
        d_hidden.fill(0.0);
        enc.w1.backward(hidden, dy, Some(&mut d_hidden));
        tanh_backward(hidden, &mut d_hidden);
        d_feats.fill(0.0);
        enc.w0.backward(feats, &d_hidden, Some(&mut d_feats));
        // Through the sin/cos features to the frequency scales.
        let u_hat = tape.u_hat[i];
        for f in 0..enc.frequencies {
            let mut acc = 0.0;
            for c in 0..2 {
                let s = feats[f * 2 + c];
                let cv = feats[2 * enc.frequencies + f * 2 + c];
                // d sin(l u)/dl = u cos(l u); d cos(l u)/dl = -u sin(l u).
                acc += d_feats[f * 2 + c] * u_hat[c] * cv;
                acc -= d_feats[2 * enc.frequencies + f * 2 + c] * u_hat[c] * s;
            }
            enc.lambda.grad[f] += acc;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::se3_apply_increment;
    use crate::rng::{standard_normal, uniform};
    use nalgebra::Vector3;

    fn unit_depth_pointmap(k: &CameraIntrinsics) -> PointMap {
        // Back-projected pixel rays at unit depth under the identity pose.
        let (w, h) = (k.width as usize, k.height as usize);
        let mut pm = PointMap::new(w, h);
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                pm.points[i] = Vector3::new((x as f64 - k.cx) / k.fx, (y as f64 - k.cy) / k.fy, 1.0);
                pm.confidence[i] = 1.0;
                pm.valid[i] = true;
            }
        }
        pm
    }

    #[test]
    fn projection_inverts_back_projection() {
        let k = CameraIntrinsics::centered(20.0, 12, 10);
        let pm = unit_depth_pointmap(&k);
        let anchors = anchor_points(&pm, &Pose::identity(), &k);
        for y in 0..10 {
            for x in 0..12 {
                let i = y * 12 + x;
                assert!(anchors.valid[i]);
                assert!((anchors.uv[i][0] - x as f64).abs() < 1e-6);
                assert!((anchors.uv[i][1] - y as f64).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn behind_camera_anchor_is_invalid() {
        let k = CameraIntrinsics::centered(20.0, 8, 8);
        let mut pm = PointMap::new(8, 8);
        pm.points[3] = Vector3::new(0.0, 0.0, -2.0);
        pm.valid[3] = true;
        pm.confidence[3] = 1.0;
        let anchors = anchor_points(&pm, &Pose::identity(), &k);
        assert!(!anchors.valid[3]);
    }

    #[test]
    fn anchors_are_gauge_invariant() {
        // Transforming the points and composing the pose with the inverse
        // leaves the projections unchanged.
        let k = CameraIntrinsics::centered(25.0, 16, 16);
        let mut rng = seeded(7);
        let pm = unit_depth_pointmap(&k);
        for _ in 0..20 {
            let axis = Vector3::new(
                standard_normal(&mut rng),
                standard_normal(&mut rng),
                standard_normal(&mut rng),
            )
            .normalize();
            let angle = uniform(&mut rng, -1.0, 1.0);
            let t0 = Vector3::new(
                uniform(&mut rng, -0.5, 0.5),
                uniform(&mut rng, -0.5, 0.5),
                uniform(&mut rng, -0.5, 0.5),
            );
            let g = Pose::from_rotation_translation(
                nalgebra::UnitQuaternion::from_scaled_axis(axis * angle),
                t0,
            );
            // p -> g(p), pose -> g^{-1} composed after the identity view.
            let mut moved = pm.clone();
            for p in &mut moved.points {
                *p = g.transform(*p);
            }
            let pose2 = Pose::from_rotation_translation(
                g.rotation().inverse(),
                -(g.rotation().inverse() * g.translation()),
            );
            let a = anchor_points(&pm, &Pose::identity(), &k);
            let b = anchor_points(&moved, &pose2, &k);
            for i in 0..a.uv.len() {
                // Validity may legitimately flip within float noise of the
                // image border; interior anchors must agree exactly.
                let interior = a.valid[i]
                    && a.uv[i][0] > 0.5
                    && a.uv[i][0] < k.width as f64 - 0.5
                    && a.uv[i][1] > 0.5
                    && a.uv[i][1] < k.height as f64 - 0.5;
                if interior {
                    assert!(b.valid[i], "interior anchor {i} lost validity");
                    assert!((a.uv[i][0] - b.uv[i][0]).abs() < 1e-6);
                    assert!((a.uv[i][1] - b.uv[i][1]).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn origin_features_are_zero_sin_one_cos() {
        let enc = PositionalEncoder::new(8, 16, 8, 3);
        let mut feats = alloc::vec![0.0; enc.feature_dim()];
        enc.pre_mlp_features([0.0, 0.0], &mut feats);
        let nf = enc.frequencies;
        assert!(feats[..2 * nf].iter().all(|v| *v == 0.0));
        assert!(feats[2 * nf..].iter().all(|v| *v == 1.0));
    }

    #[test]
    fn encoding_has_contract_shape() {
        let k = CameraIntrinsics::centered(20.0, 16, 16);
        let enc = PositionalEncoder::new(4, 12, 10, 1);
        assert_eq!(enc.encode([3.0, 5.0], &k).len(), 10);
        assert_eq!(enc.encode([0.0, 0.0], &k).len(), 10);
    }

    #[test]
    fn pre_mlp_features_are_lipschitz_in_u() {
        let enc = PositionalEncoder::new(8, 16, 8, 11);
        let lmax = enc.lambda.value.iter().cloned().fold(0.0f64, |a, b| a.max(b.abs()));
        let mut rng = seeded(5);
        let mut fa = alloc::vec![0.0; enc.feature_dim()];
        let mut fb = alloc::vec![0.0; enc.feature_dim()];
        for _ in 0..500 {
            let a = [uniform(&mut rng, -1.0, 1.0), uniform(&mut rng, -1.0, 1.0)];
            let b = [uniform(&mut rng, -1.0, 1.0), uniform(&mut rng, -1.0, 1.0)];
            enc.pre_mlp_features(a, &mut fa);
            enc.pre_mlp_features(b, &mut fb);
            let linf = fa
                .iter()
                .zip(&fb)
                .map(|(x, y)| (x - y).abs())
                .fold(0.0f64, f64::max);
            let l1 = (a[0] - b[0]).abs() + (a[1] - b[1]).abs();
            assert!(linf <= lmax * l1 + 1e-12, "Lipschitz violated: {linf} > {lmax} * {l1}");
        }
    }

    #[test]
    fn invalid_anchors_fall_back_to_origin_encoding() {
        let k = CameraIntrinsics::centered(20.0, 8, 8);
        let pm = PointMap::new(8, 8); // all invalid
        let enc = PositionalEncoder::new(4, 12, 6, 2);
        let (grid, _) = pe_grid(&pm, &Pose::identity(), &k, &enc);
        let origin = {
            let mut feats = alloc::vec![0.0; enc.feature_dim()];
            enc.pre_mlp_features([0.0, 0.0], &mut feats);
            let mut hidden = alloc::vec![0.0; enc.hidden];
            enc.w0.forward(&feats, &mut hidden);
            tanh_forward(&mut hidden);
            let mut out = alloc::vec![0.0; enc.out_dim];
            enc.w1.forward(&hidden, &mut out);
            out
        };
        for y in 0..8 {
            for x in 0..8 {
                assert_eq!(grid.pe(x, y), origin.as_slice());
                assert!(!grid.valid[y * 8 + x]);
            }
        }
    }

    #[test]
    fn grid_matches_per_anchor_encoding_bit_exactly() {
        let k = CameraIntrinsics::centered(18.0, 10, 10);
        let pm = unit_depth_pointmap(&k);
        let enc = PositionalEncoder::new(6, 20, 12, 4);
        let (grid, _) = pe_grid(&pm, &Pose::identity(), &k, &enc);
        for y in 0..10 {
            for x in 0..10 {
                let direct = enc.encode(grid.anchors[y * 10 + x], &k);
                assert_eq!(grid.pe(x, y), direct.as_slice());
            }
        }
    }

    #[test]
    fn different_poses_give_different_grids() {
        let k = CameraIntrinsics::centered(18.0, 10, 10);
        let mut pm = unit_depth_pointmap(&k);
        for p in &mut pm.points {
            *p += Vector3::new(0.0, 0.0, 1.5);
        }
        let enc = PositionalEncoder::new(6, 20, 12, 4);
        let pose_a = Pose::identity();
        let mut rng = seeded(9);
        for _ in 0..10 {
            let twist = [
                0.05 * standard_normal(&mut rng),
                0.05 * standard_normal(&mut rng),
                0.05 * standard_normal(&mut rng),
                0.05 * standard_normal(&mut rng),
                0.05 * standard_normal(&mut rng),
                0.05 * standard_normal(&mut rng),
            ];
            let pose_b = se3_apply_increment(&pose_a, &twist);
            let (ga, _) = pe_grid(&pm, &pose_a, &k, &enc);
            let (gb, _) = pe_grid(&pm, &pose_b, &k, &enc);
            assert_ne!(ga.data, gb.data, "grid insensitive to pose change {twist:?}");
        }
    }

    #[test]
    fn lambda_and_mlp_gradients_match_fd() {
        let k = CameraIntrinsics::centered(6.0, 6, 6);
        let pm = unit_depth_pointmap(&k);
        let mut enc = PositionalEncoder::new(3, 8, 5, 6);
        let mut rng = seeded(12);
        let d_grid: Vec<f64> = (0..6 * 6 * 5).map(|_| uniform(&mut rng, -1.0, 1.0)).collect();

        let loss = |enc: &PositionalEncoder| -> f64 {
            let (grid, _) = pe_grid(&pm, &Pose::identity(), &k, enc);
            grid.data.iter().zip(&d_grid).map(|(a, b)| a * b).sum()
        };

        enc.zero_grads();
        let (_, tape) = pe_grid(&pm, &Pose::identity(), &k, &enc);
        pe_grid_backward(&mut enc, &tape, &d_grid);

        let h = 1e-5;
        let check = |name: &str,
                     value: &[f64],
                     grad: &[f64],
                     enc: &PositionalEncoder,
                     set: &dyn Fn(&mut PositionalEncoder, usize, f64)| {
            for i in 0..value.len() {
                let mut ep = enc.clone();
                set(&mut ep, i, value[i] + h);
                let mut em = enc.clone();
                set(&mut em, i, value[i] - h);
                let fd = (loss(&ep) - loss(&em)) / (2.0 * h);
                let a = grad[i];
                let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8);
                assert!(rel < 1e-4, "{name}[{i}]: analytic {a} fd {fd} rel {rel}");
            }
        };
        let e0 = enc.clone();
        check("lambda", &e0.lambda.value, &e0.lambda.grad, &e0, &|e, i, v| e.lambda.value[i] = v);
        check("w0", &e0.w0.weight.value, &e0.w0.weight.grad, &e0, &|e, i, v| e.w0.weight.value[i] = v);
        check("b0", &e0.w0.bias.value, &e0.w0.bias.grad, &e0, &|e, i, v| e.w0.bias.value[i] = v);
        check("w1", &e0.w1.weight.value, &e0.w1.weight.grad, &e0, &|e, i, v| e.w1.weight.value[i] = v);
        check("b1", &e0.w1.bias.value, &e0.w1.bias.grad, &e0, &|e, i, v| e.w1.bias.value[i] = v);
    }
}
