//! Deformable cross-attention over dense feature maps and scaled dot-product
//! cross-attention over text tokens, sharing one block type.
//!
//! Dense mode follows the deformable pattern: per pixel, the query (feature
//! plus positional embedding) predicts a handful of sampling offsets around
//! the pixel's anchor and softmax weights over them; values are bilinearly
//! sampled from the key/value map. Token mode attends over all tokens with
//! standard scaled dot-products, offsets unused.

#[cfg(not(feature = "std"))]
use num_traits::Float;

use alloc::vec::Vec;

use crate::encode::PeGrid;
use crate::nn::{
    bilinear_sample, bilinear_sample_backward, softmax, softmax_backward, tanh_backward,
    tanh_forward, LayerNorm, Linear, ParamVisitor,
};
use crate::rng::seeded;
use crate::spectra::TextEmbedding;

use super::{FeatureKind, FeatureMap, FuseError};

/// Post-attention feed-forward sublayer `C -> hidden -> C` with tanh.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedForward {
    pub l0: Linear,
    pub l1: Linear,
}

impl FeedForward {
    pub fn new(channels: usize, hidden: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Self {
        Self { l0: Linear::new(channels, hidden, rng), l1: Linear::new(hidden, channels, rng) }
    }
}

/// One attention block. Offset and weight nets drive dense deformable
/// sampling; the key projection drives token attention. The optional
/// residual/norm/feed-forward parts can be disabled to expose the bare
/// attention closed forms.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionBlock {
    pub w_q: Linear,
    pub w_k: Linear,
    pub w_v: Linear,
    pub w_o: Linear,
    pub offset_net: Linear,
    pub weight_net: Linear,
    pub norm1: Option<LayerNorm>,
    pub norm2: Option<LayerNorm>,
    pub ffn: Option<FeedForward>,
    pub residual: bool,
    pub heads: usize,
    pub points: usize,
    pub channels: usize,
}

impl AttentionBlock {
    /// Standard block: residual + layer norms + feed-forward, offset and
    /// weight nets zero-initialized so sampling starts at the anchor with
    /// uniform weights.
    pub fn new(channels: usize, heads: usize, points: usize, ffn_hidden: usize, seed: u64) -> Self {
        assert!(channels % heads == 0, "channels must split evenly across heads");
        let mut rng = seeded(seed);
        Self {
            w_q: Linear::new(2 * channels, channels, &mut rng),
            w_k: Linear::new(channels, channels, &mut rng),
            w_v: Linear::new(channels, channels, &mut rng),
            w_o: Linear::new(channels, channels, &mut rng),
            offset_net: Linear::zeroed(channels, heads * points * 2),
            weight_net: Linear::zeroed(channels, heads * points),
            norm1: Some(LayerNorm::new(channels)),
            norm2: Some(LayerNorm::new(channels)),
            ffn: Some(FeedForward::new(channels, ffn_hidden, &mut rng)),
            residual: true,
            heads,
            points,
            channels,
        }
    }

    /// Bare attention without residual, norms, or feed-forward; used by
    /// degenerate-form tests.
    pub fn bare(channels: usize, heads: usize, points: usize, seed: u64) -> Self {
        let mut b = Self::new(channels, heads, points, 2 * channels, seed);
        b.norm1 = None;
        b.norm2 = None;
        b.ffn = None;
        b.residual = false;
        b
    }

    pub fn head_dim(&self) -> usize {
        self.channels / self.heads
    }

    pub fn visit(&mut self, prefix: &str, f: &mut ParamVisitor) {
        self.w_q.visit(&alloc::format!("{prefix}.w_q"), f);
        self.w_k.visit(&alloc::format!("{prefix}.w_k"), f);
        self.w_v.visit(&alloc::format!("{prefix}.w_v"), f);
        self.w_o.visit(&alloc::format!("{prefix}.w_o"), f);
        self.offset_net.visit(&alloc::format!("{prefix}.offset_net"), f);
        self.weight_net.visit(&alloc::format!("{prefix}.weight_net"), f);
        if let Some(n) = &mut self.norm1 {
            n.visit(&alloc::format!("{prefix}.norm1"), f);
        }
        if let Some(n) = &mut self.norm2 {
            n.visit(&alloc::format!("{prefix}.norm2"), f);
        }
        if let Some(ffn) = &mut self.ffn {
            ffn.l0.visit(&alloc::format!("{prefix}.ffn.l0"), f);
            ffn.l1.visit(&alloc::format!("{prefix}.ffn.l1"), f);
        }
    }

    /// Shared tail: residual, norm, feed-forward. Returns the block output
    /// for one pixel and stashes intermediates.
    fn tail_forward(&self, query_px: &[f64], attn_out: &[f64], tape: &mut TailTape) -> Vec<f64> {
        let c = self.channels;
        let mut y1 = alloc::vec![0.0; c];
        for i in 0..c {
            y1[i] = attn_out[i] + if self.residual { query_px[i] } else { 0.0 };
        }
        let mut y1n = alloc::vec![0.0; c];
        match &self.norm1 {
            Some(ln) => ln.forward(&y1, &mut y1n),
            None => y1n.copy_from_slice(&y1),
        }
        let (y2, hidden, f_out) = if let Some(ffn) = &self.ffn {
            let mut hidden = alloc::vec![0.0; ffn.l0.out_dim];
            ffn.l0.forward(&y1n, &mut hidden);
            tanh_forward(&mut hidden);
            let mut f_out = alloc::vec![0.0; c];
            ffn.l1.forward(&hidden, &mut f_out);
            let mut y2 = alloc::vec![0.0; c];
            for i in 0..c {
                y2[i] = y1n[i] + f_out[i];
            }
            (y2, hidden, f_out)
        } else {
            (y1n.clone(), Vec::new(), Vec::new())
        };
        let mut out = alloc::vec![0.0; c];
        match &self.norm2 {
            Some(ln) if self.ffn.is_some() => ln.forward(&y2, &mut out),
            _ => out.copy_from_slice(&y2),
        }
        tape.y1.extend_from_slice(&y1);
        tape.y1n.extend_from_slice(&y1n);
        tape.hidden.extend_from_slice(&hidden);
        tape.y2.extend_from_slice(&y2);
        let _ = f_out;
        out
    }

    /// Backward of [`Self::tail_forward`] for one pixel. Returns the
    /// gradient at the attention output; the residual contribution is added
    /// to `d_query_px`.
    fn tail_backward(
        &mut self,
        tape: &TailTape,
        px: usize,
        d_out: &[f64],
        d_query_px: &mut [f64],
    ) -> Vec<f64> {
        let c = self.channels;
        let y1 = &tape.y1[px * c..(px + 1) * c];
        let y1n = &tape.y1n[px * c..(px + 1) * c];
        let y2 = &tape.y2[px * c..(px + 1) * c];

        let mut d_y2 = alloc::vec![0.0; c];
        match &mut self.norm2 {
            Some(ln) if self.ffn.is_some() => ln.backward(y2, d_out, &mut d_y2),
            _ => d_y2.copy_from_slice(d_out),
        }
        let mut d_y1n = alloc::vec![0.0; c];
        if let Some(ffn) = &mut self.ffn {
            let hd = ffn.l0.out_dim;
            let hidden = &tape.hidden[px * hd..(px + 1) * hd];
            // y2 = y1n + ffn(y1n).
            d_y1n.copy_from_slice(&d_y2);
            let mut d_hidden = alloc::vec![0.0; hd];
            ffn.l1.backward(hidden, &d_y2, Some(&mut d_hidden));
            tanh_backward(hidden, &mut d_hidden);
            ffn.l0.backward(y1n, &d_hidden, Some(&mut d_y1n));
        } else {
            d_y1n.copy_from_slice(&d_y2);
        }
        let mut d_y1 = alloc::vec![0.0; c];
        match &mut self.norm1 {
            Some(ln) => ln.backward(y1, &d_y1n, &mut d_y1),
            None => d_y1.copy_from_slice(&d_y1n),
        }
        if self.residual {
            for i in 0..c {
                d_query_px[i] += d_y1[i];
            }
        }
        d_y1
    }

    /// Dense deformable cross-attention: query map attends into the
    /// key/value map around each pixel's anchor.
    pub fn forward_dense(
        &self,
        query: &FeatureMap,
        keyval: &FeatureMap,
        pe: &PeGrid,
    ) -> Result<(FeatureMap, DenseTape), FuseError> {
        let c = self.channels;
        query.expect_shape(c, "dense attention query")?;
        keyval.expect_shape(c, "dense attention keyval")?;
        if keyval.width != query.width || keyval.height != query.height {
            return Err(FuseError::ShapeMismatch { what: "dense keyval extent" });
        }
        if pe.out_dim != c || pe.width != query.width || pe.height != query.height {
            return Err(FuseError::ShapeMismatch { what: "positional grid" });
        }
        let (w, h) = (query.width, query.height);
        let hp = self.heads * self.points;
        let n_px = w * h;
        let mut tape = DenseTape {
            qcat: Vec::with_capacity(n_px * 2 * c),
            q: Vec::with_capacity(n_px * c),
            offsets: Vec::with_capacity(n_px * hp * 2),
            weights: Vec::with_capacity(n_px * hp),
            sampled: Vec::with_capacity(n_px * hp * c),
            values: Vec::with_capacity(n_px * hp * c),
            attn: Vec::with_capacity(n_px * c),
            tail: TailTape::with_capacity(n_px, c, self.ffn.as_ref().map_or(0, |f| f.l0.out_dim)),
        };
        let mut out = FeatureMap::zeros(w, h, c, FeatureKind::NirRgb);
        let hd = self.head_dim();

        let mut qcat = alloc::vec![0.0; 2 * c];
        let mut q = alloc::vec![0.0; c];
        let mut offsets = alloc::vec![0.0; hp * 2];
        let mut logits = alloc::vec![0.0; hp];
        let mut sample = alloc::vec![0.0; c];
        let mut value = alloc::vec![0.0; c];
        let mut attn = alloc::vec![0.0; c];

        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                qcat[..c].copy_from_slice(query.px(x, y));
                qcat[c..].copy_from_slice(pe.pe(x, y));
                self.w_q.forward(&qcat, &mut q);
                self.offset_net.forward(&q, &mut offsets);
                self.weight_net.forward(&q, &mut logits);
                for head in 0..self.heads {
                    softmax(&mut logits[head * self.points..(head + 1) * self.points]);
                }
                attn.fill(0.0);
                let anchor = pe.anchors[i];
                for head in 0..self.heads {
                    for p in 0..self.points {
                        let s = head * self.points + p;
                        let u = anchor[0] + offsets[s * 2];
                        let v = anchor[1] + offsets[s * 2 + 1];
                        bilinear_sample(&keyval.data, w, h, c, u, v, &mut sample);
                        self.w_v.forward(&sample, &mut value);
                        let wgt = logits[s];
                        for d in 0..hd {
                            attn[head * hd + d] += wgt * value[head * hd + d];
                        }
                        tape.sampled.extend_from_slice(&sample);
                        tape.values.extend_from_slice(&value);
                    }
                }
                let mut attn_out = alloc::vec![0.0; c];
                self.w_o.forward(&attn, &mut attn_out);
                let result = self.tail_forward(query.px(x, y), &attn_out, &mut tape.tail);
                out.px_mut(x, y).copy_from_slice(&result);

                tape.qcat.extend_from_slice(&qcat);
                tape.q.extend_from_slice(&q);
                tape.offsets.extend_from_slice(&offsets);
                tape.weights.extend_from_slice(&logits);
                tape.attn.extend_from_slice(&attn);
            }
        }
        Ok((out, tape))
    }

    /// Backward of [`Self::forward_dense`]. Accumulates parameter gradients
    /// and the input gradients for the query map, the key/value map, and the
    /// positional grid.
    #[allow(clippy::too_many_arguments)]
    pub fn backward_dense(
        &mut self,
        keyval: &FeatureMap,
        pe: &PeGrid,
        tape: &DenseTape,
        d_out: &[f64],
        d_query: &mut [f64],
        d_keyval: &mut [f64],
        d_pe: &mut [f64],
    ) {
        let c = self.channels;
        let (w, h) = (keyval.width, keyval.height);
        let hp = self.heads * self.points;
        let hd = self.head_dim();

        let mut d_attn_v = alloc::vec![0.0; c];
        let mut d_q = alloc::vec![0.0; c];
        let mut d_qcat = alloc::vec![0.0; 2 * c];
        let mut d_offsets = alloc::vec![0.0; hp * 2];
        let mut d_logits = alloc::vec![0.0; hp];
        let mut d_value = alloc::vec![0.0; c];
        let mut d_sample = alloc::vec![0.0; c];

        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let d_block_out = &d_out[i * c..(i + 1) * c];
                if d_block_out.iter().all(|g| *g == 0.0) {
                    continue;
                }
                let d_query_px_slice = {
                    // Residual gradient goes straight into the query map.
                    let base = i * c;
                    &mut d_query[base..base + c]
                };
                let d_y1 = self.tail_backward(&tape.tail, i, d_block_out, d_query_px_slice);

                // w_o.
                let attn = &tape.attn[i * c..(i + 1) * c];
                d_attn_v.fill(0.0);
                self.w_o.backward(attn, &d_y1, Some(&mut d_attn_v));

                d_q.fill(0.0);
                d_offsets.fill(0.0);
                d_logits.fill(0.0);
                let weights = &tape.weights[i * hp..(i + 1) * hp];
                let anchor = pe.anchors[i];
                for head in 0..self.heads {
                    // Sampling-weight gradients, then softmax backward.
                    let mut d_w = [0.0f64; 64];
                    debug_assert!(self.points <= 64);
                    for p in 0..self.points {
                        let s = head * self.points + p;
                        let value = &tape.values[(i * hp + s) * c..(i * hp + s) * c + c];
                        let mut acc = 0.0;
                        for d in 0..hd {
                            acc += value[head * hd + d] * d_attn_v[head * hd + d];
                        }
                        d_w[p] = acc;

                        // Value gradient restricted to this head's slice.
                        d_value.fill(0.0);
                        for d in 0..hd {
                            d_value[head * hd + d] = weights[s] * d_attn_v[head * hd + d];
                        }
                        let sampled = &tape.sampled[(i * hp + s) * c..(i * hp + s) * c + c];
                        d_sample.fill(0.0);
                        self.w_v.backward(sampled, &d_value, Some(&mut d_sample));
                        let u = anchor[0] + tape.offsets[(i * hp + s) * 2];
                        let v = anchor[1] + tape.offsets[(i * hp + s) * 2 + 1];
                        let (du, dv) =
                            bilinear_sample_backward(&keyval.data, d_keyval, w, h, c, u, v, &d_sample);
                        d_offsets[s * 2] += du;
                        d_offsets[s * 2 + 1] += dv;
                    }
                    softmax_backward(
                        &weights[head * self.points..(head + 1) * self.points],
                        &d_w[..self.points],
                        &mut d_logits[head * self.points..(head + 1) * self.points],
                    );
                }

                let q = &tape.q[i * c..(i + 1) * c];
                self.weight_net.backward(q, &d_logits, Some(&mut d_q));
                self.offset_net.backward(q, &d_offsets, Some(&mut d_q));

                let qcat = &tape.qcat[i * 2 * c..(i + 1) * 2 * c];
                d_qcat.fill(0.0);
                self.w_q.backward(qcat, &d_q, Some(&mut d_qcat));
                for d in 0..c {
                    d_query[i * c + d] += d_qcat[d];
                    d_pe[i * c + d] += d_qcat[c + d];
                }
            }
        }
    }

    /// Token cross-attention: each pixel's query attends over all text
    /// tokens with scaled dot-products.
    pub fn forward_tokens(
        &self,
        query: &FeatureMap,
        tokens: &TextEmbedding,
        pe: &PeGrid,
    ) -> Result<(FeatureMap, TokenTape), FuseError> {
        let c = self.channels;
        query.expect_shape(c, "token attention query")?;
        if tokens.is_empty() {
            return Err(FuseError::EmptyTokens);
        }
        if tokens.channels != c {
            return Err(FuseError::ShapeMismatch { what: "token channel width" });
        }
        if pe.out_dim != c || pe.width != query.width || pe.height != query.height {
            return Err(FuseError::ShapeMismatch { what: "positional grid" });
        }
        let (w, h) = (query.width, query.height);
        let l = tokens.len();
        let hd = self.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();
        let n_px = w * h;

        // Shared per-token projections.
        let mut keys = alloc::vec![0.0; l * c];
        let mut values = alloc::vec![0.0; l * c];
        for t in 0..l {
            self.w_k.forward(tokens.token(t), &mut keys[t * c..(t + 1) * c]);
            self.w_v.forward(tokens.token(t), &mut values[t * c..(t + 1) * c]);
        }

        let mut tape = TokenTape {
            qcat: Vec::with_capacity(n_px * 2 * c),
            q: Vec::with_capacity(n_px * c),
            att: Vec::with_capacity(n_px * self.heads * l),
            keys,
            values,
            attn: Vec::with_capacity(n_px * c),
            tail: TailTape::with_capacity(n_px, c, self.ffn.as_ref().map_or(0, |f| f.l0.out_dim)),
        };
        let mut out = FeatureMap::zeros(w, h, c, FeatureKind::MultiModal);

        let mut qcat = alloc::vec![0.0; 2 * c];
        let mut q = alloc::vec![0.0; c];
        let mut attn = alloc::vec![0.0; c];
        let mut scores = alloc::vec![0.0; l];

        for y in 0..h {
            for x in 0..w {
                qcat[..c].copy_from_slice(query.px(x, y));
                qcat[c..].copy_from_slice(pe.pe(x, y));
                self.w_q.forward(&qcat, &mut q);
                attn.fill(0.0);
                for head in 0..self.heads {
                    for (t, s) in scores.iter_mut().enumerate() {
                        let mut acc = 0.0;
                        for d in 0..hd {
                            acc += q[head * hd + d] * tape.keys[t * c + head * hd + d];
                        }
                        *s = acc * scale;
                    }
                    softmax(&mut scores);
                    for (t, s) in scores.iter().enumerate() {
                        for d in 0..hd {
                            attn[head * hd + d] += s * tape.values[t * c + head * hd + d];
                        }
                    }
                    tape.att.extend_from_slice(&scores);
                }
                let mut attn_out = alloc::vec![0.0; c];
                self.w_o.forward(&attn, &mut attn_out);
                let result = self.tail_forward(query.px(x, y), &attn_out, &mut tape.tail);
                out.px_mut(x, y).copy_from_slice(&result);

                tape.qcat.extend_from_slice(&qcat);
                tape.q.extend_from_slice(&q);
                tape.attn.extend_from_slice(&attn);
            }
        }
        Ok((out, tape))
    }

    /// Backward of [`Self::forward_tokens`]. Tokens are fixed inputs; their
    /// gradient is not produced.
    pub fn backward_tokens(
        &mut self,
        tokens: &TextEmbedding,
        tape: &TokenTape,
        d_out: &[f64],
        d_query: &mut [f64],
        d_pe: &mut [f64],
    ) {
        let c = self.channels;
        let l = tokens.len();
        let hd = self.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();
        let n_px = tape.q.len() / c;

        let mut d_attn_v = alloc::vec![0.0; c];
        let mut d_q = alloc::vec![0.0; c];
        let mut d_qcat = alloc::vec![0.0; 2 * c];
        let mut d_scores = alloc::vec![0.0; l];
        let mut d_att = alloc::vec![0.0; l];
        let mut d_keys = alloc::vec![0.0; l * c];
        let mut d_values = alloc::vec![0.0; l * c];

        for i in 0..n_px {
            let d_block_out = &d_out[i * c..(i + 1) * c];
            if d_block_out.iter().all(|g| *g == 0.0) {
                continue;
            }
            let d_query_px = &mut d_query[i * c..(i + 1) * c];
            let d_y1 = self.tail_backward(&tape.tail, i, d_block_out, d_query_px);

            let attn = &tape.attn[i * c..(i + 1) * c];
            d_attn_v.fill(0.0);
            self.w_o.backward(attn, &d_y1, Some(&mut d_attn_v));

            d_q.fill(0.0);
            let q = &tape.q[i * c..(i + 1) * c];
            for head in 0..self.heads {
                let att = &tape.att[(i * self.heads + head) * l..(i * self.heads + head) * l + l];
                for t in 0..l {
                    let mut acc = 0.0;
                    for d in 0..hd {
                        acc += tape.values[t * c + head * hd + d] * d_attn_v[head * hd + d];
                        d_values[t * c + head * hd + d] += att[t] * d_attn_v[head * hd + d];
                    }
                    d_att[t] = acc;
                }
                d_scores.fill(0.0);
                softmax_backward(att, &d_att, &mut d_scores);
                for t in 0..l {
                    let g = d_scores[t] * scale;
                    if g == 0.0 {
                        continue;
                    }
                    for d in 0..hd {
                        d_q[head * hd + d] += g * tape.keys[t * c + head * hd + d];
                        d_keys[t * c + head * hd + d] += g * q[head * hd + d];
                    }
                }
            }

            let qcat = &tape.qcat[i * 2 * c..(i + 1) * 2 * c];
            d_qcat.fill(0.0);
            self.w_q.backward(qcat, &d_q, Some(&mut d_qcat));
            for d in 0..c {
                d_query[i * c + d] += d_qcat[d];
                d_pe[i * c + d] += d_qcat[c + d];
            }
        }

        // Shared projections over the token set.
        for t in 0..l {
            self.w_k.backward(tokens.token(t), &d_keys[t * c..(t + 1) * c], None);
            self.w_v.backward(tokens.token(t), &d_values[t * c..(t + 1) * c], None);
        }
    }
}

/// Intermediates shared by the residual/norm/feed-forward tail.
#[derive(Debug, Clone)]
pub struct TailTape {
    y1: Vec<f64>,
    y1n: Vec<f64>,
    hidden: Vec<f64>,
    y2: Vec<f64>,
}

impl TailTape {
    fn with_capacity(n_px: usize, c: usize, ffn_hidden: usize) -> Self {
        Self {
            y1: Vec::with_capacity(n_px * c),
            y1n: Vec::with_capacity(n_px * c),
            hidden: Vec::with_capacity(n_px * ffn_hidden),
            y2: Vec::with_capacity(n_px * c),
        }
    }
}

/// Forward intermediates of one dense block application.
#[derive(Debug, Clone)]
pub struct DenseTape {
    qcat: Vec<f64>,
    q: Vec<f64>,
    offsets: Vec<f64>,
    /// Post-softmax sampling weights.
    pub weights: Vec<f64>,
    sampled: Vec<f64>,
    values: Vec<f64>,
    attn: Vec<f64>,
    tail: TailTape,
}

/// Forward intermediates of one token block application.
#[derive(Debug, Clone)]
pub struct TokenTape {
    qcat: Vec<f64>,
    q: Vec<f64>,
    /// Post-softmax attention, `n_px * heads * tokens`.
    pub att: Vec<f64>,
    keys: Vec<f64>,
    values: Vec<f64>,
    attn: Vec<f64>,
    tail: TailTape,
}
