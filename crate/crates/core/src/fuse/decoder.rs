//! Feed-forward decoder mapping fused per-pixel features to Gaussian
//! parameters, anchored on the point map: positions are bounded residuals on
//! the anchor points, opacity and DC color go through sigmoids, scales are
//! clamped into a renderable band, and the quaternion head is identity-biased
//! so a zero decoder yields the identity rotation smoothly.

#[cfg(not(feature = "std"))]
use num_traits::Float;

use alloc::vec::Vec;
use nalgebra::Vector3;

use crate::field::{sh_coeff_count, sigmoid, GaussianField, GaussianPrimitive, SH_C0};
use crate::geom::PointMap;
use crate::nn::{tanh_backward, tanh_forward, Linear, ParamVisitor};
use crate::raster::RenderGradients;
use crate::rng::seeded;

use super::{FeatureMap, FuseError};

/// Raw output layout: [mu 3][alpha 1][log_scale 3][quat 4][sh 3*(d+1)^2].
#[derive(Debug, Clone, PartialEq)]
pub struct GaussDecoder {
    pub l0: Linear,
    pub l1: Linear,
    pub hidden: usize,
    pub sh_degree: usize,
    /// Positions may move at most this far from their anchor, per axis.
    pub offset_scale: f64,
    pub log_scale_min: f64,
    pub log_scale_max: f64,
}

/// Forward intermediates: one entry per decoded primitive.
#[derive(Debug, Clone)]
pub struct DecodeTape {
    /// Pixel index (into the feature map) of each primitive.
    pub pixel_of_primitive: Vec<usize>,
    hidden: Vec<f64>,
    raw: Vec<f64>,
}

impl GaussDecoder {
    pub fn raw_dim(sh_degree: usize) -> usize {
        3 + 1 + 3 + 4 + 3 * sh_coeff_count(sh_degree)
    }

    pub fn new(
        channels: usize,
        hidden: usize,
        sh_degree: usize,
        offset_scale: f64,
        scale_min: f64,
        scale_max: f64,
        seed: u64,
    ) -> Self {
        let mut rng = seeded(seed);
        let out = Self::raw_dim(sh_degree);
        let mut l1 = Linear::new(hidden, out, &mut rng);
        // Scales start at the geometric mean of the clamp band so their
        // gradient is live from the first step.
        let mid = 0.5 * (scale_min.ln() + scale_max.ln());
        for b in l1.bias.value[4..7].iter_mut() {
            *b = mid;
        }
        Self {
            l0: Linear::new(channels, hidden, &mut rng),
            l1,
            hidden,
            sh_degree,
            offset_scale,
            log_scale_min: scale_min.ln(),
            log_scale_max: scale_max.ln(),
        }
    }

    /// Decoder with all-zero weights and biases (contract fixture).
    pub fn zeroed(channels: usize, hidden: usize, sh_degree: usize, offset_scale: f64, scale_min: f64, scale_max: f64) -> Self {
        Self {
            l0: Linear::zeroed(channels, hidden),
            l1: Linear::zeroed(hidden, Self::raw_dim(sh_degree)),
            hidden,
            sh_degree,
            offset_scale,
            log_scale_min: scale_min.ln(),
            log_scale_max: scale_max.ln(),
        }
    }

    /// Decodes one primitive per valid point-map pixel.
    pub fn decode(&self, features: &FeatureMap, pmap: &PointMap) -> Result<(GaussianField, DecodeTape), FuseError> {
        if features.width != pmap.width || features.height != pmap.height {
            return Err(FuseError::ShapeMismatch { what: "features vs point map" });
        }
        if features.channels != self.l0.in_dim {
            return Err(FuseError::ShapeMismatch { what: "decoder input width" });
        }
        let n_valid = pmap.valid_count();
        if n_valid == 0 {
            return Err(FuseError::EmptyPointMap);
        }
        let out_dim = Self::raw_dim(self.sh_degree);
        let n_coeff = sh_coeff_count(self.sh_degree);
        let mut tape = DecodeTape {
            pixel_of_primitive: Vec::with_capacity(n_valid),
            hidden: Vec::with_capacity(n_valid * self.hidden),
            raw: Vec::with_capacity(n_valid * out_dim),
        };
        let mut prims = Vec::with_capacity(n_valid);
        let mut hidden = alloc::vec![0.0; self.hidden];
        let mut raw = alloc::vec![0.0; out_dim];

        for i in 0..pmap.len() {
            if !pmap.valid[i] {
                continue;
            }
            let (x, y) = (i % pmap.width, i / pmap.width);
            self.l0.forward(features.px(x, y), &mut hidden);
            tanh_forward(&mut hidden);
            self.l1.forward(&hidden, &mut raw);

            let anchor = pmap.points[i];
            let mu = anchor
                + Vector3::new(raw[0].tanh(), raw[1].tanh(), raw[2].tanh()) * self.offset_scale;
            let log_scale = Vector3::new(
                raw[4].clamp(self.log_scale_min, self.log_scale_max),
                raw[5].clamp(self.log_scale_min, self.log_scale_max),
                raw[6].clamp(self.log_scale_min, self.log_scale_max),
            );
            let b = [1.0 + raw[7], raw[8], raw[9], raw[10]];
            let bn = (b[0] * b[0] + b[1] * b[1] + b[2] * b[2] + b[3] * b[3]).sqrt();
            let rotation = if bn > 1e-12 {
                [b[0] / bn, b[1] / bn, b[2] / bn, b[3] / bn]
            } else {
                [1.0, 0.0, 0.0, 0.0]
            };
            let mut sh = alloc::vec![0.0; n_coeff * 3];
            for c in 0..3 {
                // DC coefficient chosen so the rendered DC color equals
                // sigmoid(raw).
                sh[c] = (sigmoid(raw[11 + c]) - 0.5) / SH_C0;
            }
            for k in 1..n_coeff {
                for c in 0..3 {
                    sh[k * 3 + c] = raw[11 + k * 3 + c];
                }
            }
            prims.push(GaussianPrimitive {
                mu,
                opacity_logit: raw[3],
                log_scale,
                rotation,
                sh,
            });
            tape.pixel_of_primitive.push(i);
            tape.hidden.extend_from_slice(&hidden);
            tape.raw.extend_from_slice(&raw);
        }
        Ok((GaussianField::new(prims, self.sh_degree), tape))
    }

    /// Chains renderer gradients on the decoded field back to the decoder
    /// weights and the per-pixel features (accumulated into `d_features`).
    pub fn decode_backward(
        &mut self,
        features: &FeatureMap,
        tape: &DecodeTape,
        grads: &RenderGradients,
        d_features: &mut [f64],
    ) {
        let out_dim = Self::raw_dim(self.sh_degree);
        let n_coeff = sh_coeff_count(self.sh_degree);
        let c_in = self.l0.in_dim;
        let mut d_raw = alloc::vec![0.0; out_dim];
        let mut d_hidden = alloc::vec![0.0; self.hidden];

        for (p, &px) in tape.pixel_of_primitive.iter().enumerate() {
            let raw = &tape.raw[p * out_dim..(p + 1) * out_dim];
            d_raw.fill(0.0);
            // mu = anchor + offset_scale * tanh(raw).
            for a in 0..3 {
                let t = raw[a].tanh();
                d_raw[a] = grads.mu[p][a] * self.offset_scale * (1.0 - t * t);
            }
            d_raw[3] = grads.opacity_logit[p];
            for a in 0..3 {
                let inside = raw[4 + a] > self.log_scale_min && raw[4 + a] < self.log_scale_max;
                d_raw[4 + a] = if inside { grads.log_scale[p][a] } else { 0.0 };
            }
            // Identity-biased quaternion: q = b / |b| with b = (1 + w, x, y, z).
            let b = [1.0 + raw[7], raw[8], raw[9], raw[10]];
            let bn = (b[0] * b[0] + b[1] * b[1] + b[2] * b[2] + b[3] * b[3]).sqrt();
            if bn > 1e-12 {
                let q = [b[0] / bn, b[1] / bn, b[2] / bn, b[3] / bn];
                let g = grads.rotation[p];
                let dot = q[0] * g[0] + q[1] * g[1] + q[2] * g[2] + q[3] * g[3];
                for a in 0..4 {
                    d_raw[7 + a] = (g[a] - q[a] * dot) / bn;
                }
            }
            let sh_base = p * n_coeff * 3;
            for c in 0..3 {
                let s = sigmoid(raw[11 + c]);
                d_raw[11 + c] = grads.sh[sh_base + c] * s * (1.0 - s) / SH_C0;
            }
            for k in 1..n_coeff {
                for c in 0..3 {
                    d_raw[11 + k * 3 + c] = grads.sh[sh_base + k * 3 + c];
                }
            }

            let hidden = &tape.hidden[p * self.hidden..(p + 1) * self.hidden];
            d_hidden.fill(0.0);
            self.l1.backward(hidden, &d_raw, Some(&mut d_hidden));
            tanh_backward(hidden, &mut d_hidden);
            let (x, y) = (px % features.width, px / features.width);
            let base = (y * features.width + x) * c_in;
            self.l0.backward(features.px(x, y), &d_hidden, Some(&mut d_features[base..base + c_in]));
        }
    }

    pub fn visit(&mut self, prefix: &str, f: &mut ParamVisitor) {
        self.l0.visit(&alloc::format!("{prefix}.l0"), f);
        self.l1.visit(&alloc::format!("{prefix}.l1"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fuse::FeatureKind;
    use crate::rng::{seeded, uniform};

    fn grid_pointmap(w: usize, h: usize) -> PointMap {
        let mut pm = PointMap::new(w, h);
        for i in 0..w * h {
            pm.points[i] = Vector3::new((i % w) as f64 * 0.1, (i / w) as f64 * 0.1, 1.0 + 0.01 * i as f64);
            pm.confidence[i] = 1.0;
            pm.valid[i] = true;
        }
        pm
    }

    fn random_features(w: usize, h: usize, c: usize, seed: u64) -> FeatureMap {
        let mut rng = seeded(seed);
        FeatureMap {
            width: w,
            height: h,
            channels: c,
            data: (0..w * h * c).map(|_| uniform(&mut rng, -1.0, 1.0)).collect(),
            kind: FeatureKind::MultiModal,
        }
    }

    #[test]
    fn zero_decoder_yields_anchored_defaults() {
        let (w, h, c) = (4, 3, 6);
        let dec = GaussDecoder::zeroed(c, 8, 0, 0.05, 1e-4, 0.2);
        let pmap = grid_pointmap(w, h);
        let feats = random_features(w, h, c, 1);
        let (field, _) = dec.decode(&feats, &pmap).unwrap();
        assert_eq!(field.len(), w * h);
        for (g, anchor) in field.primitives.iter().zip(&pmap.points) {
            assert_eq!(g.mu, *anchor);
            assert!((g.opacity() - 0.5).abs() < 1e-12);
            assert_eq!(g.rotation, [1.0, 0.0, 0.0, 0.0]);
            // DC color 0.5 means zero DC coefficients.
            assert!(g.sh.iter().all(|c| c.abs() < 1e-12));
            // Zero raw scale clamps to the band maximum.
            assert!((g.log_scale.x - 0.2f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn positions_respect_the_tanh_bound() {
        let (w, h, c) = (5, 5, 8);
        let offset_scale = 0.03;
        let dec = GaussDecoder::new(c, 16, 0, offset_scale, 1e-4, 0.2, 2);
        let pmap = grid_pointmap(w, h);
        // Large features push tanh toward saturation.
        let mut feats = random_features(w, h, c, 3);
        for v in feats.data.iter_mut() {
            *v *= 50.0;
        }
        let (field, _) = dec.decode(&feats, &pmap).unwrap();
        let bound = offset_scale * 3.0f64.sqrt() + 1e-12;
        for (g, anchor) in field.primitives.iter().zip(&pmap.points) {
            assert!((g.mu - anchor).norm() <= bound);
        }
    }

    #[test]
    fn invalid_pixels_are_skipped_and_empty_map_errors() {
        let (w, h, c) = (3, 3, 4);
        let dec = GaussDecoder::new(c, 8, 0, 0.05, 1e-4, 0.2, 4);
        let mut pmap = grid_pointmap(w, h);
        pmap.valid[4] = false;
        let feats = random_features(w, h, c, 5);
        let (field, tape) = dec.decode(&feats, &pmap).unwrap();
        assert_eq!(field.len(), 8);
        assert!(!tape.pixel_of_primitive.contains(&4));

        let empty = PointMap::new(w, h);
        assert_eq!(dec.decode(&feats, &empty), Err(FuseError::EmptyPointMap));
    }

    #[test]
    fn decoded_fields_satisfy_primitive_invariants() {
        let (w, h, c) = (6, 6, 8);
        let dec = GaussDecoder::new(c, 16, 1, 0.05, 1e-4, 0.2, 6);
        let pmap = grid_pointmap(w, h);
        let feats = random_features(w, h, c, 7);
        let (field, _) = dec.decode(&feats, &pmap).unwrap();
        for g in &field.primitives {
            let alpha = g.opacity();
            assert!(alpha > 0.0 && alpha < 1.0);
            let qn: f64 = g.rotation.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((qn - 1.0).abs() < 1e-9);
            assert!(nalgebra::Cholesky::new(g.covariance()).is_some());
        }
    }

    #[test]
    fn decoder_gradients_match_fd() {
        let (w, h, c) = (3, 3, 6);
        let mut dec = GaussDecoder::new(c, 8, 0, 0.05, 1e-3, 0.2, 8);
        let pmap = grid_pointmap(w, h);
        let feats = random_features(w, h, c, 9);
        let (field, tape) = dec.decode(&feats, &pmap).unwrap();
        let n = field.len();

        // Random linear loss over every decoded parameter.
        let mut rng = seeded(10);
        let mut g = RenderGradients::zeros(n, 0);
        for i in 0..n {
            g.mu[i] = Vector3::new(
                uniform(&mut rng, -1.0, 1.0),
                uniform(&mut rng, -1.0, 1.0),
                uniform(&mut rng, -1.0, 1.0),
            );
            g.opacity_logit[i] = uniform(&mut rng, -1.0, 1.0);
            g.log_scale[i] = Vector3::new(
                uniform(&mut rng, -1.0, 1.0),
                uniform(&mut rng, -1.0, 1.0),
                uniform(&mut rng, -1.0, 1.0),
            );
            g.rotation[i] = [
                uniform(&mut rng, -1.0, 1.0),
                uniform(&mut rng, -1.0, 1.0),
                uniform(&mut rng, -1.0, 1.0),
                uniform(&mut rng, -1.0, 1.0),
            ];
            for cch in 0..3 {
                g.sh[i * 3 + cch] = uniform(&mut rng, -1.0, 1.0);
            }
        }
        // The loss this gradient corresponds to. Rotation gradients coming
        // from the renderer are tangent to the unit sphere; project here so
        // the linear loss matches that structure.
        for i in 0..n {
            let q = field.primitives[i].rotation;
            let dot: f64 = q.iter().zip(&g.rotation[i]).map(|(a, b)| a * b).sum();
            for a in 0..4 {
                g.rotation[i][a] -= q[a] * dot;
            }
        }
        let loss = |dec: &GaussDecoder| -> f64 {
            let (f2, _) = dec.decode(&feats, &pmap).unwrap();
            let mut total = 0.0;
            for i in 0..n {
                let p = &f2.primitives[i];
                total += g.mu[i].dot(&p.mu)
                    + g.opacity_logit[i] * p.opacity_logit
                    + g.log_scale[i].dot(&p.log_scale)
                    + g.rotation[i].iter().zip(&p.rotation).map(|(a, b)| a * b).sum::<f64>()
                    + (0..3).map(|cch| g.sh[i * 3 + cch] * p.sh[cch]).sum::<f64>();
            }
            total
        };

        let mut d_feats = alloc::vec![0.0; feats.data.len()];
        dec.decode_backward(&feats, &tape, &g, &mut d_feats);

        let hh = 1e-5;
        let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-8);
        let mut names = Vec::new();
        dec.visit("dec", &mut |nm, _| names.push(nm));
        for name in names {
            let mut grads = Vec::new();
            dec.visit("dec", &mut |nm, p| {
                if nm == name {
                    grads = p.grad.clone();
                }
            });
            for i in (0..grads.len()).step_by(3) {
                let peek = |delta: f64| {
                    let mut d2 = dec.clone();
                    d2.visit("dec", &mut |nm, p| {
                        if nm == name {
                            p.value[i] += delta;
                        }
                    });
                    loss(&d2)
                };
                let fd = (peek(hh) - peek(-hh)) / (2.0 * hh);
                assert!(
                    rel(grads[i], fd) < 1e-3 || (grads[i] - fd).abs() < 1e-9,
                    "{name}[{i}]: analytic {} fd {fd}",
                    grads[i]
                );
            }
        }
        // Feature gradients.
        for i in (0..feats.data.len()).step_by(5) {
            let mut fp = feats.clone();
            fp.data[i] += hh;
            let mut fm = feats.clone();
            fm.data[i] -= hh;
            let dp = {
                let (f2, _) = dec.decode(&fp, &pmap).unwrap();
                let (f3, _) = dec.decode(&fm, &pmap).unwrap();
                let mut lp = 0.0;
                let mut lm = 0.0;
                for j in 0..n {
                    lp += g.mu[j].dot(&f2.primitives[j].mu)
                        + g.opacity_logit[j] * f2.primitives[j].opacity_logit
                        + g.log_scale[j].dot(&f2.primitives[j].log_scale)
                        + g.rotation[j].iter().zip(&f2.primitives[j].rotation).map(|(a, b)| a * b).sum::<f64>()
                        + (0..3).map(|cch| g.sh[j * 3 + cch] * f2.primitives[j].sh[cch]).sum::<f64>();
                    lm += g.mu[j].dot(&f3.primitives[j].mu)
                        + g.opacity_logit[j] * f3.primitives[j].opacity_logit
                        + g.log_scale[j].dot(&f3.primitives[j].log_scale)
                        + g.rotation[j].iter().zip(&f3.primitives[j].rotation).map(|(a, b)| a * b).sum::<f64>()
                        + (0..3).map(|cch| g.sh[j * 3 + cch] * f3.primitives[j].sh[cch]).sum::<f64>();
                }
                (lp - lm) / (2.0 * hh)
            };
            assert!(
                rel(d_feats[i], dp) < 1e-3 || (d_feats[i] - dp).abs() < 1e-9,
                "feat[{i}]: analytic {} fd {dp}",
                d_feats[i]
            );
        }
    }
}
