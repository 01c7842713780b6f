//! Hand-rolled dense layers used by the fusion stack: parameters with
//! gradient buffers, linear and 3x3 convolution layers, layer norm, and
//! clamped bilinear sampling. Every layer exposes an explicit backward that
//! accumulates into the gradient buffers.

#[cfg(not(feature = "std"))]
use num_traits::Float;

use alloc::string::String;
use alloc::vec::Vec;

use crate::rng::uniform;
use rand_chacha::ChaCha8Rng;

/// A learnable tensor with its gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
}

impl Param {
    pub fn new(value: Vec<f64>) -> Self {
        let grad = alloc::vec![0.0; value.len()];
        Self { value, grad }
    }

    pub fn zeros(n: usize) -> Self {
        Self::new(alloc::vec![0.0; n])
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    /// Uniform Glorot-style init in `[-a, a]` with `a = sqrt(6/(fan_in +
    /// fan_out))`.
    pub fn glorot(fan_in: usize, fan_out: usize, n: usize, rng: &mut ChaCha8Rng) -> Self {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        Self::new((0..n).map(|_| uniform(rng, -a, a)).collect())
    }
}

/// Visitor over named parameters, used by the optimizer, the checkpoint
/// writer, and the gradient-check harness.
pub type ParamVisitor<'a> = dyn FnMut(String, &mut Param) + 'a;

/// Fully connected layer, weight stored row-major `[out][in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            weight: Param::glorot(in_dim, out_dim, in_dim * out_dim, rng),
            bias: Param::zeros(out_dim),
            in_dim,
            out_dim,
        }
    }

    /// All-zero layer; offset and weight nets start here so deformable
    /// sampling begins at the reference point with uniform weights.
    pub fn zeroed(in_dim: usize, out_dim: usize) -> Self {
        Self {
            weight: Param::zeros(in_dim * out_dim),
            bias: Param::zeros(out_dim),
            in_dim,
            out_dim,
        }
    }

    pub fn identity(dim: usize) -> Self {
        let mut w = alloc::vec![0.0; dim * dim];
        for i in 0..dim {
            w[i * dim + i] = 1.0;
        }
        Self { weight: Param::new(w), bias: Param::zeros(dim), in_dim: dim, out_dim: dim }
    }

    pub fn forward(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.in_dim);
        debug_assert_eq!(out.len(), self.out_dim);
        for (o, out_v) in out.iter_mut().enumerate() {
            let row = &self.weight.value[o * self.in_dim..(o + 1) * self.in_dim];
            let mut acc = self.bias.value[o];
            for (w, xv) in row.iter().zip(x) {
                acc += w * xv;
            }
            *out_v = acc;
        }
    }

    /// Accumulates weight/bias gradients and, when `dx` is given, the input
    /// gradient.
    pub fn backward(&mut self, x: &[f64], dy: &[f64], mut dx: Option<&mut [f64]>) {
        debug_assert_eq!(x.len(), self.in_dim);
        debug_assert_eq!(dy.len(), self.out_dim);
        for (o, &g) in dy.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            self.bias.grad[o] += g;
            let row = o * self.in_dim;
            for (i, &xv) in x.iter().enumerate() {
                self.weight.grad[row + i] += g * xv;
            }
            if let Some(dx) = dx.as_deref_mut() {
                let wrow = &self.weight.value[row..row + self.in_dim];
                for (dxi, &w) in dx.iter_mut().zip(wrow) {
                    *dxi += g * w;
                }
            }
        }
    }

    pub fn visit(&mut self, prefix: &str, f: &mut ParamVisitor) {
        f(alloc::format!("{prefix}.w"), &mut self.weight);
        f(alloc::format!("{prefix}.b"), &mut self.bias);
    }
}

/// 3x3 convolution, stride 1, zero padding; weight layout
/// `[out][in][ky][kx]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv3x3 {
    pub weight: Param,
    pub bias: Param,
    pub in_ch: usize,
    pub out_ch: usize,
}

impl Conv3x3 {
    pub fn new(in_ch: usize, out_ch: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            weight: Param::glorot(in_ch * 9, out_ch * 9, in_ch * out_ch * 9, rng),
            bias: Param::zeros(out_ch),
            in_ch,
            out_ch,
        }
    }

    pub fn zeroed(in_ch: usize, out_ch: usize) -> Self {
        Self {
            weight: Param::zeros(in_ch * out_ch * 9),
            bias: Param::zeros(out_ch),
            in_ch,
            out_ch,
        }
    }

    /// `x` is `h*w*in_ch` interleaved; returns `h*w*out_ch`.
    pub fn forward(&self, x: &[f64], width: usize, height: usize) -> Vec<f64> {
        debug_assert_eq!(x.len(), width * height * self.in_ch);
        let mut out = alloc::vec![0.0; width * height * self.out_ch];
        for y in 0..height {
            for xx in 0..width {
                let base = (y * width + xx) * self.out_ch;
                for o in 0..self.out_ch {
                    let mut acc = self.bias.value[o];
                    for ky in 0..3usize {
                        let sy = y as i64 + ky as i64 - 1;
                        if sy < 0 || sy >= height as i64 {
                            continue;
                        }
                        for kx in 0..3usize {
                            let sx = xx as i64 + kx as i64 - 1;
                            if sx < 0 || sx >= width as i64 {
                                continue;
                            }
                            let px = (sy as usize * width + sx as usize) * self.in_ch;
                            for i in 0..self.in_ch {
                                acc += self.weight.value[((o * self.in_ch + i) * 3 + ky) * 3 + kx]
                                    * x[px + i];
                            }
                        }
                    }
                    out[base + o] = acc;
                }
            }
        }
        out
    }

    pub fn backward(
        &mut self,
        x: &[f64],
        dy: &[f64],
        width: usize,
        height: usize,
        mut dx: Option<&mut [f64]>,
    ) {
        debug_assert_eq!(dy.len(), width * height * self.out_ch);
        for y in 0..height {
            for xx in 0..width {
                let base = (y * width + xx) * self.out_ch;
                for o in 0..self.out_ch {
                    let g = dy[base + o];
                    if g == 0.0 {
                        continue;
                    }
                    self.bias.grad[o] += g;
                    for ky in 0..3usize {
                        let sy = y as i64 + ky as i64 - 1;
                        if sy < 0 || sy >= height as i64 {
                            continue;
                        }
                        for kx in 0..3usize {
                            let sx = xx as i64 + kx as i64 - 1;
                            if sx < 0 || sx >= width as i64 {
                                continue;
                            }
                            let px = (sy as usize * width + sx as usize) * self.in_ch;
                            for i in 0..self.in_ch {
                                let wi = ((o * self.in_ch + i) * 3 + ky) * 3 + kx;
                                self.weight.grad[wi] += g * x[px + i];
                                if let Some(dx) = dx.as_deref_mut() {
                                    dx[px + i] += g * self.weight.value[wi];
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn visit(&mut self, prefix: &str, f: &mut ParamVisitor) {
        f(alloc::format!("{prefix}.w"), &mut self.weight);
        f(alloc::format!("{prefix}.b"), &mut self.bias);
    }
}

/// Per-pixel layer normalization over channels.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: Param,
    pub beta: Param,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        Self { gamma: Param::new(alloc::vec![1.0; dim]), beta: Param::zeros(dim), eps: 1e-5 }
    }

    pub fn forward(&self, x: &[f64], out: &mut [f64]) {
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / (var + self.eps).sqrt();
        for i in 0..x.len() {
            out[i] = (x[i] - mean) * inv * self.gamma.value[i] + self.beta.value[i];
        }
    }

    pub fn backward(&mut self, x: &[f64], dy: &[f64], dx: &mut [f64]) {
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / (var + self.eps).sqrt();

        let mut g_mean = 0.0;
        let mut gx_mean = 0.0;
        for i in 0..x.len() {
            let xhat = (x[i] - mean) * inv;
            let g = dy[i] * self.gamma.value[i];
            self.gamma.grad[i] += dy[i] * xhat;
            self.beta.grad[i] += dy[i];
            g_mean += g;
            gx_mean += g * xhat;
        }
        g_mean /= n;
        gx_mean /= n;
        for i in 0..x.len() {
            let xhat = (x[i] - mean) * inv;
            let g = dy[i] * self.gamma.value[i];
            dx[i] += inv * (g - g_mean - xhat * gx_mean);
        }
    }

    pub fn visit(&mut self, prefix: &str, f: &mut ParamVisitor) {
        f(alloc::format!("{prefix}.gamma"), &mut self.gamma);
        f(alloc::format!("{prefix}.beta"), &mut self.beta);
    }
}

pub fn tanh_forward(x: &mut [f64]) {
    for v in x {
        *v = v.tanh();
    }
}

/// Backward through tanh given the forward output `y`.
pub fn tanh_backward(y: &[f64], dy: &mut [f64]) {
    for (d, &yv) in dy.iter_mut().zip(y) {
        *d *= 1.0 - yv * yv;
    }
}

/// Border-clamped bilinear sample of an interleaved `h*w*c` map. Returns the
/// sampled vector into `out`.
pub fn bilinear_sample(map: &[f64], width: usize, height: usize, channels: usize, u: f64, v: f64, out: &mut [f64]) {
    let uc = u.clamp(0.0, (width - 1) as f64);
    let vc = v.clamp(0.0, (height - 1) as f64);
    let x0 = uc.floor() as usize;
    let y0 = vc.floor() as usize;
    let x1 = (x0 + 1).min(width - 1);
    let y1 = (y0 + 1).min(height - 1);
    let fx = uc - x0 as f64;
    let fy = vc - y0 as f64;
    let w00 = (1.0 - fx) * (1.0 - fy);
    let w01 = fx * (1.0 - fy);
    let w10 = (1.0 - fx) * fy;
    let w11 = fx * fy;
    let p00 = (y0 * width + x0) * channels;
    let p01 = (y0 * width + x1) * channels;
    let p10 = (y1 * width + x0) * channels;
    let p11 = (y1 * width + x1) * channels;
    for c in 0..channels {
        out[c] = w00 * map[p00 + c] + w01 * map[p01 + c] + w10 * map[p10 + c] + w11 * map[p11 + c];
    }
}

/// Backward of [`bilinear_sample`]: scatters into the map gradient and
/// returns `(dL/du, dL/dv)`. The clamp zeroes position gradients outside the
/// map.
pub fn bilinear_sample_backward(
    map: &[f64],
    d_map: &mut [f64],
    width: usize,
    height: usize,
    channels: usize,
    u: f64,
    v: f64,
    d_out: &[f64],
) -> (f64, f64) {
    let uc = u.clamp(0.0, (width - 1) as f64);
    let vc = v.clamp(0.0, (height - 1) as f64);
    let x0 = uc.floor() as usize;
    let y0 = vc.floor() as usize;
    let x1 = (x0 + 1).min(width - 1);
    let y1 = (y0 + 1).min(height - 1);
    let fx = uc - x0 as f64;
    let fy = vc - y0 as f64;
    let p00 = (y0 * width + x0) * channels;
    let p01 = (y0 * width + x1) * channels;
    let p10 = (y1 * width + x0) * channels;
    let p11 = (y1 * width + x1) * channels;

    let mut du = 0.0;
    let mut dv = 0.0;
    for c in 0..channels {
        let g = d_out[c];
        if g == 0.0 {
            continue;
        }
        d_map[p00 + c] += g * (1.0 - fx) * (1.0 - fy);
        d_map[p01 + c] += g * fx * (1.0 - fy);
        d_map[p10 + c] += g * (1.0 - fx) * fy;
        d_map[p11 + c] += g * fx * fy;
        let top = map[p01 + c] - map[p00 + c];
        let bottom = map[p11 + c] - map[p10 + c];
        du += g * ((1.0 - fy) * top + fy * bottom);
        let left = map[p10 + c] - map[p00 + c];
        let right = map[p11 + c] - map[p01 + c];
        dv += g * ((1.0 - fx) * left + fx * right);
    }
    let inside_u = (0.0..=(width - 1) as f64).contains(&u);
    let inside_v = (0.0..=(height - 1) as f64).contains(&v);
    (if inside_u { du } else { 0.0 }, if inside_v { dv } else { 0.0 })
}

/// Softmax in place; returns nothing, `x` becomes the distribution.
pub fn softmax(x: &mut [f64]) {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in x.iter_mut() {
        *v /= sum;
    }
}

/// Backward through softmax given the output distribution `y`.
pub fn softmax_backward(y: &[f64], dy: &[f64], dx: &mut [f64]) {
    let dot: f64 = y.iter().zip(dy).map(|(a, b)| a * b).sum();
    for i in 0..y.len() {
        dx[i] += y[i] * (dy[i] - dot);
    }
}
