#[cfg(not(feature = "std"))]
use num_traits::Float;

use alloc::format;
use alloc::vec::Vec;
use nalgebra::Vector3;

use crate::field::{adaptive_density_control, normalize_quat, AdcConfig, GaussianField};
use crate::geom::{se3_apply_increment, CameraIntrinsics, Pose};
use crate::raster::{render, render_backward, RenderGradients, RenderOptions};
use crate::rng::derive_seed;

use super::adam::{Adam, OptimError};
use super::loss::{
    confidence_loss, confidence_loss_backward, normalized_residuals, photometric_loss,
    photometric_loss_backward, pointmap_regression_loss, pointmap_regression_loss_backward,
    weighted_residual_backward, LossReduction,
};

/// One training view: an observed image and its (coarse) pose.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainView {
    /// `height * width * 3` observed colors in [0, 1].
    pub observed: Vec<f64>,
    pub pose: Pose,
}

/// Optional point-map supervision for the regression/confidence terms.
/// Primitive `i` is anchored to `target_points[i]`; requires density control
/// to stay disabled so the alignment survives.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSupervision {
    pub target_points: Vec<Vector3<f64>>,
    pub valid: Vec<bool>,
    /// Initial per-anchor confidence, refined in log-space during training.
    pub confidence: Vec<f64>,
}

/// Per-group learning rates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LearningRates {
    pub position: f64,
    pub opacity: f64,
    pub log_scale: f64,
    pub rotation: f64,
    pub sh: f64,
    pub pose: f64,
    pub confidence: f64,
}

impl LearningRates {
    /// Defaults scaled to the scene extent.
    pub fn for_extent(extent: f64) -> Self {
        Self {
            position: 1.6e-3 * extent,
            opacity: 0.05,
            log_scale: 5e-3,
            rotation: 1e-3,
            sh: 2.5e-3,
            pose: 1e-4,
            confidence: 0.05,
        }
    }
}

/// Weights combining the objective terms. The regression and confidence
/// terms apply only when anchor supervision is attached.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub photometric: f64,
    pub pointmap_reg: f64,
    pub confidence: f64,
    /// Balancing weight inside the confidence objective.
    pub w_conf: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { photometric: 1.0, pointmap_reg: 0.1, confidence: 0.05, w_conf: 0.2 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizeConfig {
    pub iterations: usize,
    pub lrs: LearningRates,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weights: LossWeights,
    pub reduction: LossReduction,
    pub optimize_field: bool,
    pub optimize_poses: bool,
    pub background: [f64; 3],
    pub workers: usize,
    /// Density control runs every `adc_interval` iterations; 0 disables it.
    pub adc_interval: usize,
    pub adc: AdcConfig,
    pub seed: u64,
    /// Abort when the total loss exceeds this multiple of its initial value.
    pub divergence_factor: f64,
    pub anchors: Option<AnchorSupervision>,
}

impl OptimizeConfig {
    pub fn for_extent(extent: f64) -> Self {
        Self {
            iterations: 1000,
            lrs: LearningRates::for_extent(extent),
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weights: LossWeights::default(),
            reduction: LossReduction::MeanPerPixel,
            optimize_field: true,
            optimize_poses: false,
            background: [0.0; 3],
            workers: 1,
            adc_interval: 0,
            adc: AdcConfig::for_extent(extent),
            seed: 0,
            divergence_factor: 10.0,
            anchors: None,
        }
    }
}

/// One iteration's loss breakdown.
#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub iteration: usize,
    pub photometric: f64,
    pub pointmap_reg: f64,
    pub confidence: f64,
    pub total: f64,
    /// Photometric term per view, in view order.
    pub per_view: Vec<f64>,
}

fn flatten_field(field: &GaussianField) -> [Vec<f64>; 5] {
    let n = field.len();
    let mut mu = Vec::with_capacity(3 * n);
    let mut opacity = Vec::with_capacity(n);
    let mut log_scale = Vec::with_capacity(3 * n);
    let mut rotation = Vec::with_capacity(4 * n);
    let mut sh = Vec::with_capacity(field.primitives.first().map_or(0, |p| p.sh.len()) * n);
    for g in &field.primitives {
        mu.extend_from_slice(g.mu.as_slice());
        opacity.push(g.opacity_logit);
        log_scale.extend_from_slice(g.log_scale.as_slice());
        rotation.extend_from_slice(&g.rotation);
        sh.extend_from_slice(&g.sh);
    }
    [mu, opacity, log_scale, rotation, sh]
}

fn write_back(field: &mut GaussianField, params: &[Vec<f64>; 5]) {
    let sh_len = field.primitives.first().map_or(0, |p| p.sh.len());
    for (i, g) in field.primitives.iter_mut().enumerate() {
        g.mu = Vector3::new(params[0][3 * i], params[0][3 * i + 1], params[0][3 * i + 2]);
        g.opacity_logit = params[1][i];
        g.log_scale = Vector3::new(params[2][3 * i], params[2][3 * i + 1], params[2][3 * i + 2]);
        let raw = [
            params[3][4 * i],
            params[3][4 * i + 1],
            params[3][4 * i + 2],
            params[3][4 * i + 3],
        ];
        g.rotation = normalize_quat(raw).0;
        g.sh.copy_from_slice(&params[4][i * sh_len..(i + 1) * sh_len]);
    }
}

fn flatten_grads(grads: &RenderGradients) -> [Vec<f64>; 5] {
    let n = grads.mu.len();
    let mut mu = Vec::with_capacity(3 * n);
    let mut log_scale = Vec::with_capacity(3 * n);
    let mut rotation = Vec::with_capacity(4 * n);
    for i in 0..n {
        mu.extend_from_slice(grads.mu[i].as_slice());
        log_scale.extend_from_slice(grads.log_scale[i].as_slice());
        rotation.extend_from_slice(&grads.rotation[i]);
    }
    [mu, grads.opacity_logit.clone(), log_scale, rotation, grads.sh.clone()]
}

/// Alternating full passes of render / backward / Adam over the Gaussian
/// parameters and per-view pose twists. Returns the refined field, the
/// refined poses, and the per-iteration loss history.
pub fn joint_optimize(
    field: &GaussianField,
    views: &[TrainView],
    k: &CameraIntrinsics,
    cfg: &OptimizeConfig,
) -> Result<(GaussianField, Vec<Pose>, Vec<LossReport>), OptimError> {
    assert!(!views.is_empty(), "need at least one training view");
    let npx = (k.width as usize) * (k.height as usize) * 3;
    for (i, v) in views.iter().enumerate() {
        if v.observed.len() != npx {
            return Err(OptimError::ShapeMismatch { group: format!("views[{i}].observed") });
        }
    }
    if let Some(a) = &cfg.anchors {
        assert_eq!(a.target_points.len(), field.len(), "one anchor per primitive");
        assert_eq!(a.valid.len(), field.len());
        assert_eq!(a.confidence.len(), field.len());
        assert_eq!(cfg.adc_interval, 0, "anchor supervision requires density control off");
    }

    let mut field = field.clone();
    let mut poses: Vec<Pose> = views.iter().map(|v| v.pose).collect();
    let mut adam = Adam::new(cfg.beta1, cfg.beta2, cfg.eps);
    let mut history: Vec<LossReport> = Vec::with_capacity(cfg.iterations);
    let mut log_conf: Vec<f64> = cfg
        .anchors
        .as_ref()
        .map(|a| a.confidence.iter().map(|c| c.ln()).collect())
        .unwrap_or_default();
    let opts = RenderOptions { background: cfg.background, workers: cfg.workers };
    let use_reg = cfg.anchors.is_some() && cfg.weights.pointmap_reg > 0.0;
    let use_conf = cfg.anchors.is_some() && cfg.weights.confidence > 0.0;

    for iteration in 0..cfg.iterations {
        let mut grads = RenderGradients::zeros(field.len(), field.sh_degree);
        let mut pose_grads = alloc::vec![[0.0f64; 6]; views.len()];
        let mut per_view = Vec::with_capacity(views.len());
        let mut photometric = 0.0;

        for (v, view) in views.iter().enumerate() {
            let out = render(&field, &poses[v], k, &opts);
            let value = photometric_loss(&out.color, &view.observed, cfg.reduction)
                .expect("validated shapes");
            let mut upstream = photometric_loss_backward(&out.color, &view.observed, cfg.reduction)
                .expect("validated shapes");
            for g in &mut upstream {
                *g *= cfg.weights.photometric;
            }
            let view_grads = render_backward(&field, &poses[v], k, &opts, &upstream);
            pose_grads[v] = view_grads.pose_twist;
            grads.accumulate_field(&view_grads);
            photometric += value;
            per_view.push(value);
        }

        // Optional point-map terms against the anchor supervision.
        let mut reg_value = 0.0;
        let mut conf_value = 0.0;
        let mut conf_grads: Vec<f64> = Vec::new();
        if use_reg || use_conf {
            let anchors = cfg.anchors.as_ref().unwrap();
            let predicted: Vec<Vector3<f64>> = field.primitives.iter().map(|g| g.mu).collect();
            if use_reg {
                reg_value = pointmap_regression_loss(&predicted, &anchors.target_points, &anchors.valid)
                    .expect("validated anchors");
                let dmu =
                    pointmap_regression_loss_backward(&predicted, &anchors.target_points, &anchors.valid)
                        .expect("validated anchors");
                for (g, d) in grads.mu.iter_mut().zip(dmu) {
                    *g += d * cfg.weights.pointmap_reg;
                }
            }
            if use_conf {
                let conf: Vec<f64> = log_conf.iter().map(|l| l.exp()).collect();
                let residuals = normalized_residuals(&predicted, &anchors.target_points, &anchors.valid)
                    .expect("validated anchors");
                conf_value = confidence_loss(&conf, &residuals, &anchors.valid, cfg.weights.w_conf)
                    .expect("positive confidence by construction");
                let (d_conf, d_res) =
                    confidence_loss_backward(&conf, &residuals, &anchors.valid, cfg.weights.w_conf)
                        .expect("positive confidence by construction");
                // Through the residuals back to the positions.
                let weights: Vec<f64> = d_res.iter().map(|d| d * cfg.weights.confidence).collect();
                let dmu =
                    weighted_residual_backward(&predicted, &anchors.target_points, &anchors.valid, &weights)
                        .expect("validated anchors");
                for (g, d) in grads.mu.iter_mut().zip(dmu) {
                    *g += d;
                }
                // Confidence parameters live in log space to stay positive.
                conf_grads = d_conf
                    .iter()
                    .zip(&conf)
                    .map(|(d, o)| d * o * cfg.weights.confidence)
                    .collect();
            }
        }

        let total = cfg.weights.photometric * photometric
            + cfg.weights.pointmap_reg * reg_value
            + cfg.weights.confidence * conf_value;
        history.push(LossReport {
            iteration,
            photometric,
            pointmap_reg: reg_value,
            confidence: conf_value,
            total,
            per_view,
        });
        let initial = history[0].total;
        if total > cfg.divergence_factor * initial && initial > 0.0 {
            return Err(OptimError::Diverged { iteration, total, initial });
        }

        if cfg.optimize_field {
            let mut params = flatten_field(&field);
            let flat = flatten_grads(&grads);
            adam.step("field.mu", cfg.lrs.position, &mut params[0], &flat[0])?;
            adam.step("field.opacity", cfg.lrs.opacity, &mut params[1], &flat[1])?;
            adam.step("field.log_scale", cfg.lrs.log_scale, &mut params[2], &flat[2])?;
            adam.step("field.rotation", cfg.lrs.rotation, &mut params[3], &flat[3])?;
            adam.step("field.sh", cfg.lrs.sh, &mut params[4], &flat[4])?;
            write_back(&mut field, &params);
        }

        if cfg.optimize_poses {
            for (v, pose) in poses.iter_mut().enumerate() {
                // The twist gradient lives at the identity increment of the
                // current pose; step a zero twist and apply the delta.
                let mut delta = [0.0f64; 6];
                adam.step(&format!("pose.{v}"), cfg.lrs.pose, &mut delta, &pose_grads[v])?;
                *pose = se3_apply_increment(pose, &delta);
            }
        }

        if use_conf {
            adam.step("confidence", cfg.lrs.confidence, &mut log_conf, &conf_grads)?;
        }

        if cfg.adc_interval > 0 && (iteration + 1) % cfg.adc_interval == 0 {
            field = adaptive_density_control(
                &field,
                grads.position_grad_vectors(),
                &cfg.adc,
                derive_seed(cfg.seed, "adc").wrapping_add(iteration as u64),
            );
            // Parameter counts changed; restart the field moments.
            adam.reset_group_prefix("field.");
        }
    }

    Ok((field, poses, history))
}
