//! The end-to-end fusion model: modality encoders, positional anchoring,
//! stacked cross-attention, and the Gaussian decoder, with a trainer that
//! optimizes every network weight through the renderer. Two naive fusion
//! baselines (input concatenation and feature summation) share the same
//! scaffolding for ablations.

use alloc::string::String;
use alloc::vec::Vec;

use crate::encode::{pe_grid, pe_grid_backward, PeGrid, PeGridTape, PositionalEncoder};
use crate::field::GaussianField;
use crate::geom::{CameraIntrinsics, PointMap, Pose};
use crate::nn::ParamVisitor;
use crate::optim::{photometric_loss, photometric_loss_backward, Adam, LossReduction, OptimError};
use crate::raster::{render, render_backward, RenderGradients, RenderOptions};
use crate::rng::derive_seed;
use crate::spectra::TextEmbedding;

use super::attention::{AttentionBlock, DenseTape, TokenTape};
use super::decoder::{DecodeTape, GaussDecoder};
use super::{
    extract_features, fuse_nir_rgb, fuse_nir_rgb_backward, fuse_text, fuse_text_backward,
    ConvStack, ConvTape, FeatureKind, FeatureMap, FuseError, StackTape,
};

/// How NIR information enters the pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionMode {
    /// Deformable cross-attention coupling (the full model).
    Attention,
    /// Raw channel concatenation at the encoder input.
    InputConcat,
    /// Element-wise summation of the per-modality feature maps.
    FeatureSum,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionConfig {
    pub channels: usize,
    pub heads: usize,
    pub points: usize,
    pub blocks: usize,
    pub ffn_hidden: usize,
    pub pe_frequencies: usize,
    pub pe_hidden: usize,
    pub decoder_hidden: usize,
    pub sh_degree: usize,
    pub offset_scale: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    pub mode: FusionMode,
    pub seed: u64,
}

impl FusionConfig {
    /// Architecture defaults with geometry bounds scaled to the scene
    /// extent.
    pub fn for_extent(extent: f64, seed: u64) -> Self {
        Self {
            channels: 32,
            heads: 4,
            points: 4,
            blocks: 2,
            ffn_hidden: 64,
            pe_frequencies: 8,
            pe_hidden: 64,
            decoder_hidden: 64,
            sh_degree: 0,
            offset_scale: 0.02 * extent,
            scale_min: 1e-4 * extent,
            scale_max: 0.1 * extent,
            mode: FusionMode::Attention,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionModel {
    pub mode: FusionMode,
    pub channels: usize,
    pub rgb_encoder: ConvStack,
    /// Absent in input-concatenation mode (the rgb encoder ingests 4
    /// channels there).
    pub nir_encoder: Option<ConvStack>,
    pub pe: PositionalEncoder,
    pub nir_blocks: Vec<AttentionBlock>,
    pub txt_blocks: Vec<AttentionBlock>,
    pub decoder: GaussDecoder,
}

/// Forward intermediates of one full fusion pass.
pub struct FusionTape {
    conv_input: Vec<f64>,
    conv_rgb_tape: ConvTape,
    conv_nir_tape: Option<ConvTape>,
    nir_image: Vec<f64>,
    f_rgb: FeatureMap,
    f_nir: Option<FeatureMap>,
    pe_grid: PeGrid,
    pe_tape: PeGridTape,
    nir_stack: Option<StackTape<DenseTape>>,
    f_nr: FeatureMap,
    txt_stack: StackTape<TokenTape>,
    f_ntr: FeatureMap,
    pub decode: DecodeTape,
    tokens_len: usize,
}

impl FusionModel {
    pub fn new(cfg: &FusionConfig) -> Self {
        let c = cfg.channels;
        let seed = cfg.seed;
        let rgb_in = if cfg.mode == FusionMode::InputConcat { 4 } else { 3 };
        let nir_encoder = if cfg.mode == FusionMode::InputConcat {
            None
        } else {
            Some(ConvStack::new(1, c, derive_seed(seed, "fuse.nir_enc")))
        };
        let nir_blocks = if cfg.mode == FusionMode::Attention {
            (0..cfg.blocks)
                .map(|i| {
                    AttentionBlock::new(c, cfg.heads, cfg.points, cfg.ffn_hidden, derive_seed(seed, "fuse.nir_blk").wrapping_add(i as u64))
                })
                .collect()
        } else {
            Vec::new()
        };
        Self {
            mode: cfg.mode,
            channels: c,
            rgb_encoder: ConvStack::new(rgb_in, c, derive_seed(seed, "fuse.rgb_enc")),
            nir_encoder,
            pe: PositionalEncoder::new(cfg.pe_frequencies, cfg.pe_hidden, c, derive_seed(seed, "pe")),
            nir_blocks,
            txt_blocks: (0..cfg.blocks)
                .map(|i| {
                    AttentionBlock::new(c, cfg.heads, cfg.points, cfg.ffn_hidden, derive_seed(seed, "fuse.txt_blk").wrapping_add(i as u64))
                })
                .collect(),
            decoder: GaussDecoder::new(
                c,
                cfg.decoder_hidden,
                cfg.sh_degree,
                cfg.offset_scale,
                cfg.scale_min,
                cfg.scale_max,
                derive_seed(seed, "fuse.decoder"),
            ),
        }
    }

    pub fn visit_params(&mut self, f: &mut ParamVisitor) {
        self.rgb_encoder.visit("fuse.rgb_enc", f);
        if let Some(enc) = &mut self.nir_encoder {
            enc.visit("fuse.nir_enc", f);
        }
        self.pe.visit(f);
        for (i, b) in self.nir_blocks.iter_mut().enumerate() {
            b.visit(&alloc::format!("fuse.nir.{i}"), f);
        }
        for (i, b) in self.txt_blocks.iter_mut().enumerate() {
            b.visit(&alloc::format!("fuse.txt.{i}"), f);
        }
        self.decoder.visit("fuse.decoder", f);
    }

    pub fn zero_grads(&mut self) {
        self.visit_params(&mut |_, p| p.zero_grad());
    }

    pub fn param_names(&mut self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit_params(&mut |n, _| names.push(n));
        names
    }

    /// Full forward pass for one reference view: images to features to fused
    /// stream to decoded Gaussian field. `rgb` is `h*w*3`, `nir` is `h*w`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        rgb: &[f64],
        nir: &[f64],
        tokens: &TextEmbedding,
        pmap: &PointMap,
        pose: &Pose,
        k: &CameraIntrinsics,
    ) -> Result<(GaussianField, FusionTape), FuseError> {
        let (w, h) = (k.width as usize, k.height as usize);
        if rgb.len() != w * h * 3 || nir.len() != w * h {
            return Err(FuseError::ShapeMismatch { what: "reference images" });
        }
        let (grid, pe_tape) = pe_grid(pmap, pose, k, &self.pe);

        let (f_nr, conv_input, conv_rgb_tape, conv_nir_tape, f_rgb, f_nir, nir_stack) = match self.mode {
            FusionMode::Attention => {
                let (f_rgb, t_rgb) = extract_features(&self.rgb_encoder, rgb, w, h, FeatureKind::Rgb);
                let (f_nir, t_nir) =
                    extract_features(self.nir_encoder.as_ref().expect("attention mode has a NIR encoder"), nir, w, h, FeatureKind::Nir);
                let (f_nr, stack) = fuse_nir_rgb(&f_rgb, &f_nir, &grid, &self.nir_blocks)?;
                (f_nr, rgb.to_vec(), t_rgb, Some(t_nir), f_rgb, Some(f_nir), Some(stack))
            }
            FusionMode::InputConcat => {
                let mut cat = alloc::vec![0.0; w * h * 4];
                for i in 0..w * h {
                    cat[i * 4..i * 4 + 3].copy_from_slice(&rgb[i * 3..i * 3 + 3]);
                    cat[i * 4 + 3] = nir[i];
                }
                let (f_nr, t_rgb) = extract_features(&self.rgb_encoder, &cat, w, h, FeatureKind::NirRgb);
                let f_rgb = f_nr.clone();
                (f_nr, cat, t_rgb, None, f_rgb, None, None)
            }
            FusionMode::FeatureSum => {
                let (f_rgb, t_rgb) = extract_features(&self.rgb_encoder, rgb, w, h, FeatureKind::Rgb);
                let (f_nir, t_nir) =
                    extract_features(self.nir_encoder.as_ref().expect("sum mode has a NIR encoder"), nir, w, h, FeatureKind::Nir);
                let mut f_nr = f_rgb.clone();
                for (a, b) in f_nr.data.iter_mut().zip(&f_nir.data) {
                    *a += b;
                }
                f_nr.kind = FeatureKind::NirRgb;
                (f_nr, rgb.to_vec(), t_rgb, Some(t_nir), f_rgb, Some(f_nir), None)
            }
        };

        let (f_ntr, txt_stack) = fuse_text(&f_nr, tokens, &grid, &self.txt_blocks)?;
        let (field, decode) = self.decoder.decode(&f_ntr, pmap)?;
        Ok((
            field,
            FusionTape {
                conv_input,
                conv_rgb_tape,
                conv_nir_tape,
                nir_image: nir.to_vec(),
                f_rgb,
                f_nir,
                pe_grid: grid,
                pe_tape,
                nir_stack,
                f_nr,
                txt_stack,
                f_ntr,
                decode,
                tokens_len: tokens.len(),
            },
        ))
    }

    /// Backward pass: renderer gradients on the decoded field flow through
    /// the decoder, both attention stacks, the positional encoder, and the
    /// convolutional extractors, accumulating into every parameter's
    /// gradient buffer.
    pub fn backward(&mut self, tokens: &TextEmbedding, tape: &FusionTape, grads: &RenderGradients) {
        assert_eq!(tokens.len(), tape.tokens_len, "token set must match the forward pass");
        let (w, h) = (tape.f_nr.width, tape.f_nr.height);
        let mut d_fntr = alloc::vec![0.0; tape.f_ntr.data.len()];
        self.decoder.decode_backward(&tape.f_ntr, &tape.decode, grads, &mut d_fntr);

        let (d_fnr, d_pe_txt) =
            fuse_text_backward(&mut self.txt_blocks, tokens, &tape.pe_grid, &tape.txt_stack, &d_fntr);
        let mut d_pe_total = d_pe_txt;

        match self.mode {
            FusionMode::Attention => {
                let f_nir = tape.f_nir.as_ref().expect("attention tape has NIR features");
                let stack = tape.nir_stack.as_ref().expect("attention tape has a dense stack");
                let (d_frgb, d_fnir, d_pe_nir) =
                    fuse_nir_rgb_backward(&mut self.nir_blocks, f_nir, &tape.pe_grid, stack, &d_fnr);
                for (a, b) in d_pe_total.iter_mut().zip(&d_pe_nir) {
                    *a += b;
                }
                self.rgb_encoder.backward(&tape.conv_input, w, h, &tape.conv_rgb_tape, &d_frgb);
                self.nir_encoder.as_mut().expect("attention mode has a NIR encoder").backward(
                    &tape.nir_image,
                    w,
                    h,
                    tape.conv_nir_tape.as_ref().expect("attention tape has a NIR conv tape"),
                    &d_fnir,
                );
            }
            FusionMode::InputConcat => {
                self.rgb_encoder.backward(&tape.conv_input, w, h, &tape.conv_rgb_tape, &d_fnr);
            }
            FusionMode::FeatureSum => {
                self.rgb_encoder.backward(&tape.conv_input, w, h, &tape.conv_rgb_tape, &d_fnr);
                self.nir_encoder.as_mut().expect("sum mode has a NIR encoder").backward(
                    &tape.nir_image,
                    w,
                    h,
                    tape.conv_nir_tape.as_ref().expect("sum tape has a NIR conv tape"),
                    &d_fnr,
                );
            }
        }

        pe_grid_backward(&mut self.pe, &tape.pe_tape, &d_pe_total);
    }
}

/// One photometric supervision view for fusion training.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionView {
    /// `height * width * 3` observed colors.
    pub rgb: Vec<f64>,
    pub pose: Pose,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionTrainConfig {
    pub iterations: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub background: [f64; 3],
    pub workers: usize,
    pub reduction: LossReduction,
}

impl Default for FusionTrainConfig {
    fn default() -> Self {
        Self {
            iterations: 200,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            background: [0.0; 3],
            workers: 1,
            reduction: LossReduction::MeanPerPixel,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum FitError {
    Fuse(FuseError),
    Optim(OptimError),
}

impl From<FuseError> for FitError {
    fn from(e: FuseError) -> Self {
        FitError::Fuse(e)
    }
}

impl From<OptimError> for FitError {
    fn from(e: OptimError) -> Self {
        FitError::Optim(e)
    }
}

impl core::fmt::Display for FitError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            FitError::Fuse(e) => write!(f, "{e}"),
            FitError::Optim(e) => write!(f, "{e}"),
        }
    }
}

impl core::error::Error for FitError {}

/// Trains the fusion network end to end: each iteration decodes a field from
/// the reference view, renders every training view, and backpropagates the
/// photometric loss through the renderer into all network weights. Poses
/// stay fixed. Returns the per-iteration photometric history.
#[allow(clippy::too_many_arguments)]
pub fn fit_fusion(
    model: &mut FusionModel,
    ref_rgb: &[f64],
    ref_nir: &[f64],
    ref_pmap: &PointMap,
    ref_pose: &Pose,
    views: &[FusionView],
    tokens: &TextEmbedding,
    k: &CameraIntrinsics,
    cfg: &FusionTrainConfig,
) -> Result<Vec<f64>, FitError> {
    assert!(!views.is_empty(), "need at least one supervision view");
    let opts = RenderOptions { background: cfg.background, workers: cfg.workers };
    let mut adam = Adam::new(cfg.beta1, cfg.beta2, cfg.eps);
    let mut history = Vec::with_capacity(cfg.iterations);

    for _ in 0..cfg.iterations {
        let (field, tape) = model.forward(ref_rgb, ref_nir, tokens, ref_pmap, ref_pose, k)?;
        let mut grads = RenderGradients::zeros(field.len(), field.sh_degree);
        let mut photometric = 0.0;
        for view in views {
            let out = render(&field, &view.pose, k, &opts);
            photometric += photometric_loss(&out.color, &view.rgb, cfg.reduction)
                .expect("view shapes validated by render");
            let upstream = photometric_loss_backward(&out.color, &view.rgb, cfg.reduction)
                .expect("view shapes validated by render");
            grads.accumulate_field(&render_backward(&field, &view.pose, k, &opts, &upstream));
        }
        model.zero_grads();
        model.backward(tokens, &tape, &grads);
        let mut result = Ok(());
        model.visit_params(&mut |name, p| {
            if result.is_ok() {
                result = adam.step(&name, cfg.lr, &mut p.value, &p.grad);
            }
        });
        result?;
        history.push(photometric);
    }
    Ok(history)
}
