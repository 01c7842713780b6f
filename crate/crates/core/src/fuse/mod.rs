//! Deformable cross-attention fusion: NIR-RGB coupling, fused-feature/text
//! coupling, and the feed-forward decoder that turns fused features into
//! Gaussian primitives.

mod attention;
mod decoder;
mod model;

pub use attention::{AttentionBlock, DenseTape, FeedForward, TokenTape};
pub use decoder::{DecodeTape, GaussDecoder};
pub use model::{fit_fusion, FusionConfig, FusionMode, FusionModel, FusionTape, FusionTrainConfig, FusionView};

#[cfg(not(feature = "std"))]
use num_traits::Float;

use alloc::vec::Vec;

use crate::encode::PeGrid;
use crate::nn::{tanh_backward, tanh_forward, Conv3x3, ParamVisitor};
use crate::rng::seeded;
use crate::spectra::TextEmbedding;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FuseError {
    ShapeMismatch { what: &'static str },
    EmptyTokens,
    /// Decoding needs at least one valid point-map pixel.
    EmptyPointMap,
}

impl core::fmt::Display for FuseError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            FuseError::ShapeMismatch { what } => write!(f, "shape mismatch: {what}"),
            FuseError::EmptyTokens => write!(f, "text token list is empty"),
            FuseError::EmptyPointMap => write!(f, "point map has no valid pixels"),
        }
    }
}

impl core::error::Error for FuseError {}

/// What a feature map represents.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureKind {
    Rgb,
    Nir,
    /// NIR-RGB fused stream.
    NirRgb,
    /// Fully fused multimodal stream.
    MultiModal,
    Text,
}

/// Dense per-pixel feature grid, `height * width * channels` interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
    pub kind: FeatureKind,
}

impl FeatureMap {
    pub fn zeros(width: usize, height: usize, channels: usize, kind: FeatureKind) -> Self {
        Self { width, height, channels, data: alloc::vec![0.0; width * height * channels], kind }
    }

    pub fn px(&self, x: usize, y: usize) -> &[f64] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn px_mut(&mut self, x: usize, y: usize) -> &mut [f64] {
        let i = (y * self.width + x) * self.channels;
        &mut self.data[i..i + self.channels]
    }

    fn expect_shape(&self, channels: usize, what: &'static str) -> Result<(), FuseError> {
        if self.channels != channels || self.data.len() != self.width * self.height * self.channels {
            return Err(FuseError::ShapeMismatch { what });
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Three stacked 3x3 convolutions (receptive field 7) with tanh between,
/// turning an image into a `channels`-wide feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvStack {
    pub c0: Conv3x3,
    pub c1: Conv3x3,
    pub c2: Conv3x3,
    pub in_ch: usize,
    pub out_ch: usize,
}

/// Forward intermediates of a [`ConvStack`] application.
#[derive(Debug, Clone)]
pub struct ConvTape {
    a0: Vec<f64>,
    a1: Vec<f64>,
}

impl ConvStack {
    pub fn new(in_ch: usize, out_ch: usize, seed: u64) -> Self {
        let mut rng = seeded(seed);
        Self {
            c0: Conv3x3::new(in_ch, out_ch, &mut rng),
            c1: Conv3x3::new(out_ch, out_ch, &mut rng),
            c2: Conv3x3::new(out_ch, out_ch, &mut rng),
            in_ch,
            out_ch,
        }
    }

    pub fn zeroed(in_ch: usize, out_ch: usize) -> Self {
        Self {
            c0: Conv3x3::zeroed(in_ch, out_ch),
            c1: Conv3x3::zeroed(out_ch, out_ch),
            c2: Conv3x3::zeroed(out_ch, out_ch),
            in_ch,
            out_ch,
        }
    }

    pub fn forward(&self, image: &[f64], width: usize, height: usize, kind: FeatureKind) -> (FeatureMap, ConvTape) {
        assert_eq!(image.len(), width * height * self.in_ch, "image shape mismatch");
        let mut a0 = self.c0.forward(image, width, height);
        tanh_forward(&mut a0);
        let mut a1 = self.c1.forward(&a0, width, height);
        tanh_forward(&mut a1);
        let data = self.c2.forward(&a1, width, height);
        (
            FeatureMap { width, height, channels: self.out_ch, data, kind },
            ConvTape { a0, a1 },
        )
    }

    pub fn backward(&mut self, image: &[f64], width: usize, height: usize, tape: &ConvTape, d_out: &[f64]) {
        let mut d_a1 = alloc::vec![0.0; tape.a1.len()];
        self.c2.backward(&tape.a1, d_out, width, height, Some(&mut d_a1));
        tanh_backward(&tape.a1, &mut d_a1);
        let mut d_a0 = alloc::vec![0.0; tape.a0.len()];
        self.c1.backward(&tape.a0, &d_a1, width, height, Some(&mut d_a0));
        tanh_backward(&tape.a0, &mut d_a0);
        self.c0.backward(image, &d_a0, width, height, None);
    }

    pub fn visit(&mut self, prefix: &str, f: &mut ParamVisitor) {
        self.c0.visit(&alloc::format!("{prefix}.c0"), f);
        self.c1.visit(&alloc::format!("{prefix}.c1"), f);
        self.c2.visit(&alloc::format!("{prefix}.c2"), f);
    }
}

/// Learnable convolutional feature extraction for one image modality.
pub fn extract_features(
    stack: &ConvStack,
    image: &[f64],
    width: usize,
    height: usize,
    kind: FeatureKind,
) -> (FeatureMap, ConvTape) {
    stack.forward(image, width, height, kind)
}

/// Forward intermediates of a stacked fusion pass.
pub struct StackTape<T> {
    /// Input feature map of each block (the query stream).
    pub inputs: Vec<FeatureMap>,
    pub tapes: Vec<T>,
}

/// NIR-RGB coupling: the RGB stream queries the NIR stream through stacked
/// deformable cross-attention blocks.
pub fn fuse_nir_rgb(
    f_rgb: &FeatureMap,
    f_nir: &FeatureMap,
    pe: &PeGrid,
    blocks: &[AttentionBlock],
) -> Result<(FeatureMap, StackTape<DenseTape>), FuseError> {
    if f_rgb.width != f_nir.width || f_rgb.height != f_nir.height || f_rgb.channels != f_nir.channels {
        return Err(FuseError::ShapeMismatch { what: "rgb/nir feature extents" });
    }
    let mut tape = StackTape { inputs: Vec::with_capacity(blocks.len()), tapes: Vec::with_capacity(blocks.len()) };
    let mut current = f_rgb.clone();
    for block in blocks {
        let (next, t) = block.forward_dense(&current, f_nir, pe)?;
        tape.inputs.push(current);
        tape.tapes.push(t);
        current = next;
    }
    current.kind = FeatureKind::NirRgb;
    Ok((current, tape))
}

/// Backward of [`fuse_nir_rgb`]; returns `(d_rgb, d_nir, d_pe)`.
pub fn fuse_nir_rgb_backward(
    blocks: &mut [AttentionBlock],
    f_nir: &FeatureMap,
    pe: &PeGrid,
    tape: &StackTape<DenseTape>,
    d_out: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let n = f_nir.data.len();
    let mut d_nir = alloc::vec![0.0; n];
    let mut d_pe = alloc::vec![0.0; pe.data.len()];
    let mut d_current = d_out.to_vec();
    for (i, block) in blocks.iter_mut().enumerate().rev() {
        let mut d_query = alloc::vec![0.0; n];
        block.backward_dense(f_nir, pe, &tape.tapes[i], &d_current, &mut d_query, &mut d_nir, &mut d_pe);
        d_current = d_query;
    }
    (d_current, d_nir, d_pe)
}

/// Fused-feature/text coupling: per-pixel cross-attention over all tokens.
pub fn fuse_text(
    f_nr: &FeatureMap,
    tokens: &TextEmbedding,
    pe: &PeGrid,
    blocks: &[AttentionBlock],
) -> Result<(FeatureMap, StackTape<TokenTape>), FuseError> {
    let mut tape = StackTape { inputs: Vec::with_capacity(blocks.len()), tapes: Vec::with_capacity(blocks.len()) };
    let mut current = f_nr.clone();
    for block in blocks {
        let (next, t) = block.forward_tokens(&current, tokens, pe)?;
        tape.inputs.push(current);
        tape.tapes.push(t);
        current = next;
    }
    current.kind = FeatureKind::MultiModal;
    Ok((current, tape))
}

/// Backward of [`fuse_text`]; returns `(d_f_nr, d_pe)`.
pub fn fuse_text_backward(
    blocks: &mut [AttentionBlock],
    tokens: &TextEmbedding,
    pe: &PeGrid,
    tape: &StackTape<TokenTape>,
    d_out: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let mut d_pe = alloc::vec![0.0; pe.data.len()];
    let mut d_current = d_out.to_vec();
    for (i, block) in blocks.iter_mut().enumerate().rev() {
        let mut d_query = alloc::vec![0.0; d_current.len()];
        block.backward_tokens(tokens, &tape.tapes[i], &d_current, &mut d_query, &mut d_pe);
        d_current = d_query;
    }
    (d_current, d_pe)
}
