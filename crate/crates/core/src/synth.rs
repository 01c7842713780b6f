//! Synthetic desk-scale scene generation: a seeded ground-truth Gaussian
//! field inside the unit cube, a ring of cameras looking at the origin,
//! rendered RGB, a synthesized NIR band, pixel-aligned point maps from true
//! depths, and fixture weather metadata. Stands in for a physical capture
//! rig so recovery and ablation tests have a known answer.

#[cfg(not(feature = "std"))]
use num_traits::Float;

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;
use nalgebra::Vector3;

use crate::field::{logit, GaussianField, GaussianPrimitive, SH_C0};
use crate::geom::{CameraIntrinsics, PointMap, Pose};
use crate::raster::{render, RenderOptions};
use crate::rng::{derive_seed, sample_indices, seeded, uniform};
use crate::spectra::{self, IndexStats, PromptMetadata};

/// Linear NIR mix: `nir = clamp(0.35 * luminance + 0.65 * albedo)`.
pub const NIR_LUMA_WEIGHT: f64 = 0.35;
pub const NIR_ALBEDO_WEIGHT: f64 = 0.65;

/// Pixels need at least this much accumulated alpha to yield a valid
/// point-map entry.
pub const POINTMAP_ALPHA_MIN: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_gaussians: usize,
    pub n_views: usize,
    pub width: u32,
    pub height: u32,
    pub seed: u64,
    /// Number of training views sampled from the ring.
    pub train_views: usize,
    pub sh_degree: usize,
    /// Camera ring radius in scene units.
    pub ring_radius: f64,
    pub background: [f64; 3],
    /// Saturate the RGB color of primitives with `mu.x > 0` while giving
    /// them high-contrast NIR albedo, so NIR carries structure that RGB
    /// does not.
    pub rgb_saturated_region: bool,
}

impl SynthConfig {
    pub fn new(n_gaussians: usize, n_views: usize, width: u32, height: u32, seed: u64) -> Self {
        Self {
            n_gaussians,
            n_views,
            width,
            height,
            seed,
            train_views: 3,
            sh_degree: 1,
            ring_radius: 2.4,
            background: [0.0; 3],
            rgb_saturated_region: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthView {
    pub pose: Pose,
    /// `height * width * 3` in [0, 1].
    pub rgb: Vec<f64>,
    /// `height * width` in [0, 1].
    pub nir: Vec<f64>,
    pub pointmap: PointMap,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthScene {
    pub intrinsics: CameraIntrinsics,
    pub views: Vec<SynthView>,
    /// Ground truth, for oracles and perturb-and-recover harnesses.
    pub field: GaussianField,
    /// Per-primitive NIR albedo in [0, 1].
    pub nir_albedo: Vec<f64>,
    /// Max pairwise distance between camera centers.
    pub extent: f64,
    pub prompt_meta: PromptMetadata,
}

impl SynthScene {
    pub fn train_indices(&self) -> Vec<usize> {
        self.views
            .iter()
            .enumerate()
            .filter(|(_, v)| v.split == Split::Train)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn test_indices(&self) -> Vec<usize> {
        self.views
            .iter()
            .enumerate()
            .filter(|(_, v)| v.split == Split::Test)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Seeded uniform train/test split: `k` train indices sampled without
/// replacement, remainder test, both ascending.
pub fn split_views(n_total: usize, k: usize, seed: u64) -> Result<(Vec<usize>, Vec<usize>), SplitError> {
    if k >= n_total {
        return Err(SplitError::TooManyTrainViews { k, n_total });
    }
    let mut rng = seeded(seed);
    let train = sample_indices(n_total, k, &mut rng);
    let test: Vec<usize> = (0..n_total).filter(|i| !train.contains(i)).collect();
    Ok((train, test))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SplitError {
    TooManyTrainViews { k: usize, n_total: usize },
}

impl core::fmt::Display for SplitError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            SplitError::TooManyTrainViews { k, n_total } => {
                write!(f, "cannot take {k} train views out of {n_total}")
            }
        }
    }
}

impl core::error::Error for SplitError {}

fn dc_color(primitive: &GaussianPrimitive) -> [f64; 3] {
    [
        (0.5 + primitive.sh[0] * SH_C0).clamp(0.0, 1.0),
        (0.5 + primitive.sh[1] * SH_C0).clamp(0.0, 1.0),
        (0.5 + primitive.sh[2] * SH_C0).clamp(0.0, 1.0),
    ]
}

fn luminance(rgb: [f64; 3]) -> f64 {
    0.2126 * rgb[0] + 0.7152 * rgb[1] + 0.0722 * rgb[2]
}

/// Per-primitive NIR reflectance from the DC color and the albedo channel.
pub fn nir_reflectance(dc: [f64; 3], albedo: f64) -> f64 {
    (NIR_LUMA_WEIGHT * luminance(dc) + NIR_ALBEDO_WEIGHT * albedo).clamp(0.0, 1.0)
}

/// Builds a degree-0 shadow field whose DC color renders the per-primitive
/// NIR reflectance, so the NIR band is composited by the same renderer.
fn nir_shadow_field(field: &GaussianField, albedo: &[f64]) -> GaussianField {
    let prims = field
        .primitives
        .iter()
        .zip(albedo)
        .map(|(g, &a)| {
            let nir = nir_reflectance(dc_color(g), a);
            let coeff = (nir - 0.5) / SH_C0;
            GaussianPrimitive {
                mu: g.mu,
                opacity_logit: g.opacity_logit,
                log_scale: g.log_scale,
                rotation: g.rotation,
                sh: alloc::vec![coeff; 3],
            }
        })
        .collect();
    GaussianField::new(prims, 0)
}

/// Ring camera placement: evenly spaced around the scene, all looking at
/// the origin.
pub fn ring_pose(index: usize, n_views: usize, radius: f64) -> Pose {
    let theta = core::f64::consts::TAU * index as f64 / n_views as f64;
    let eye = Vector3::new(radius * theta.cos(), -0.6, radius * theta.sin());
    Pose::look_at(eye, Vector3::zeros(), Vector3::new(0.0, -1.0, 0.0))
}

/// Expected depth per pixel (alpha-weighted over the compositing chain),
/// used to back-project pixel-aligned point maps from the true field.
fn depth_map(field: &GaussianField, pose: &Pose, k: &CameraIntrinsics) -> (Vec<f64>, Vec<f64>) {
    use crate::raster::{bucket_rows, prepare_splats, ALPHA_CLAMP, FOOTPRINT_SIGMA, TRANSMITTANCE_CUTOFF};
    let (w, h) = (k.width as usize, k.height as usize);
    let splats = prepare_splats(field, pose, k);
    let rows = bucket_rows(&splats, h);
    let cutoff = FOOTPRINT_SIGMA * FOOTPRINT_SIGMA;
    let mut depth = alloc::vec![0.0; w * h];
    let mut alpha = alloc::vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut t = 1.0f64;
            let mut zsum = 0.0;
            let mut wsum = 0.0;
            for &si in &rows[y] {
                let s = &splats[si as usize];
                if x < s.x0 || x > s.x1 {
                    continue;
                }
                let dx = x as f64 - s.center.x;
                let dy = y as f64 - s.center.y;
                let m = &s.inv_cov;
                let q = m[(0, 0)] * dx * dx + (m[(0, 1)] + m[(1, 0)]) * dx * dy + m[(1, 1)] * dy * dy;
                if q > cutoff {
                    continue;
                }
                let a = (s.alpha * (-0.5 * q).exp()).min(ALPHA_CLAMP);
                let weight = a * t;
                zsum += s.depth * weight;
                wsum += weight;
                t *= 1.0 - a;
                if t < TRANSMITTANCE_CUTOFF {
                    break;
                }
            }
            let i = y * w + x;
            alpha[i] = 1.0 - t;
            depth[i] = if wsum > 0.0 { zsum / wsum } else { 0.0 };
        }
    }
    (depth, alpha)
}

/// Back-projects an expected-depth map into a world-space point map with
/// alpha-derived confidence.
pub fn pointmap_from_field(field: &GaussianField, pose: &Pose, k: &CameraIntrinsics) -> PointMap {
    let (w, h) = (k.width as usize, k.height as usize);
    let (depth, alpha) = depth_map(field, pose, k);
    let mut pmap = PointMap::new(w, h);
    let r_inv = pose.rotation().inverse();
    let t = pose.translation();
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if alpha[i] < POINTMAP_ALPHA_MIN {
                continue;
            }
            let z = depth[i];
            let p_cam = Vector3::new((x as f64 - k.cx) / k.fx * z, (y as f64 - k.cy) / k.fy * z, z);
            pmap.points[i] = r_inv * (p_cam - t);
            pmap.confidence[i] = 1.0 + alpha[i];
            pmap.valid[i] = true;
        }
    }
    pmap
}

/// Fixture weather table for synthetic scenes.
pub fn fixture_weather() -> BTreeMap<String, f64> {
    spectra::WEATHER_KEYS
        .iter()
        .zip([23.4, 12.1, 61.0, 0.0, 5.0, 35.0, 410.0, 6.0, 18.5, 7.2, 16.0])
        .map(|(k, v)| (String::from(*k), v))
        .collect()
}

/// Generates a full synthetic scene bundle. Deterministic: identical
/// configurations produce identical bundles.
pub fn synth_scene(cfg: &SynthConfig) -> SynthScene {
    assert!(cfg.n_gaussians >= 1, "need at least one primitive");
    assert!(cfg.n_views >= 2, "need at least two views");
    assert!(cfg.train_views < cfg.n_views, "train split must leave test views");

    let mut rng = seeded(derive_seed(cfg.seed, "synth.field"));
    let mut prims = Vec::with_capacity(cfg.n_gaussians);
    let mut albedo = Vec::with_capacity(cfg.n_gaussians);
    for i in 0..cfg.n_gaussians {
        let mu = Vector3::new(
            uniform(&mut rng, -0.5, 0.5),
            uniform(&mut rng, -0.5, 0.5),
            uniform(&mut rng, -0.5, 0.5),
        );
        let scale = uniform(&mut rng, 0.04, 0.11);
        let opacity = uniform(&mut rng, 0.55, 0.95);
        let mut rgb = [
            uniform(&mut rng, 0.15, 0.9),
            uniform(&mut rng, 0.15, 0.9),
            uniform(&mut rng, 0.15, 0.9),
        ];
        let mut alb = uniform(&mut rng, 0.2, 0.8);
        if cfg.rgb_saturated_region && mu.x > 0.0 {
            // Structure lives only in the NIR band here.
            rgb = [0.97, 0.97, 0.97];
            alb = if i % 2 == 0 { 0.05 } else { 0.95 };
        }
        let mut g = GaussianPrimitive::isotropic(mu, scale, opacity, rgb, cfg.sh_degree);
        // Mild anisotropy and a random orientation.
        g.log_scale += Vector3::new(
            uniform(&mut rng, -0.3, 0.3),
            uniform(&mut rng, -0.3, 0.3),
            uniform(&mut rng, -0.3, 0.3),
        );
        let q = [
            uniform(&mut rng, -1.0, 1.0),
            uniform(&mut rng, -1.0, 1.0),
            uniform(&mut rng, -1.0, 1.0),
            uniform(&mut rng, -1.0, 1.0),
        ];
        g.rotation = crate::field::normalize_quat(q).0;
        if cfg.sh_degree >= 1 {
            for c in g.sh.iter_mut().skip(3).take(9) {
                *c = uniform(&mut rng, -0.08, 0.08);
            }
        }
        g.opacity_logit = logit(opacity);
        prims.push(g);
        albedo.push(alb);
    }
    let field = GaussianField::new(prims, cfg.sh_degree);

    let focal = 0.9 * cfg.width.min(cfg.height) as f64;
    let intrinsics = CameraIntrinsics::centered(focal, cfg.width, cfg.height);

    let (train_idx, _) = split_views(cfg.n_views, cfg.train_views, derive_seed(cfg.seed, "synth.split"))
        .expect("train_views < n_views");

    let nir_field = nir_shadow_field(&field, &albedo);
    let opts = RenderOptions { background: cfg.background, workers: 1 };
    let nir_opts = RenderOptions { background: [0.0; 3], workers: 1 };

    let mut views = Vec::with_capacity(cfg.n_views);
    for v in 0..cfg.n_views {
        let pose = ring_pose(v, cfg.n_views, cfg.ring_radius);
        let rgb = render(&field, &pose, &intrinsics, &opts).color;
        let nir_rgb = render(&nir_field, &pose, &intrinsics, &nir_opts).color;
        let nir: Vec<f64> = nir_rgb.chunks_exact(3).map(|px| px[0]).collect();
        let pointmap = pointmap_from_field(&field, &pose, &intrinsics);
        let split = if train_idx.contains(&v) { Split::Train } else { Split::Test };
        views.push(SynthView { pose, rgb, nir, pointmap, split });
    }

    // Scene extent: max pairwise camera-center distance.
    let centers: Vec<Vector3<f64>> = views.iter().map(|v| v.pose.camera_center()).collect();
    let mut extent = 0.0f64;
    for i in 0..centers.len() {
        for j in i + 1..centers.len() {
            extent = extent.max((centers[i] - centers[j]).norm());
        }
    }

    // Prompt metadata from the first view's bands.
    let red: Vec<f64> = views[0].rgb.chunks_exact(3).map(|px| px[0]).collect();
    let green: Vec<f64> = views[0].rgb.chunks_exact(3).map(|px| px[1]).collect();
    let prompt_meta = PromptMetadata {
        img_description: String::from(
            "Synthetic ring capture of a compact arrangement of translucent blobs over a dark background.",
        ),
        ndvi: IndexStats::of(&spectra::ndvi(&views[0].nir, &red)),
        ndwi: IndexStats::of(&spectra::ndwi(&green, &views[0].nir)),
        chlorophyll: IndexStats::of(&spectra::chlorophyll_index(&views[0].nir, &green)),
        weather: fixture_weather(),
    };

    SynthScene { intrinsics, views, field, nir_albedo: albedo, extent, prompt_meta }
}
