//! Residual convolutional denoiser `D(x) = x - N(x)`.
//!
//! `N` is a small stack of zero-padded "same" convolutions with ReLU
//! activations between layers, applied to `x / input_scale` and rescaled
//! back so the network sees order-one values.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{dim_err, Error, Result};
use crate::image::MaterialImage;

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    /// Indexed `[((out * in_channels + in) * kernel + ky) * kernel + kx]`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ConvLayer {
    pub fn zeros(in_channels: usize, out_channels: usize, kernel: usize) -> Result<Self> {
        if kernel.is_multiple_of(2) {
            return Err(Error::Validation(format!("kernel size must be odd, got {kernel}")));
        }
        Ok(Self {
            in_channels,
            out_channels,
            kernel,
            weights: vec![0.0; out_channels * in_channels * kernel * kernel],
            bias: vec![0.0; out_channels],
        })
    }

    pub fn n_params(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

/// Same-size 2-D convolution of a `[in_channels, height, width]` tensor.
pub fn conv2d_forward(input: &[f64], weights: &[f64], bias: &[f64], shape: ConvShape, out: &mut [f64]) {
    let ConvShape {
        in_ch,
        out_ch,
        kernel,
        width,
        height,
    } = shape;
    let m = width * height;
    let r = (kernel / 2) as isize;
    for co in 0..out_ch {
        let plane = &mut out[co * m..(co + 1) * m];
        plane.iter_mut().for_each(|v| *v = bias[co]);
        for ci in 0..in_ch {
            let src = &input[ci * m..(ci + 1) * m];
            for ky in 0..kernel {
                let dy = ky as isize - r;
                for kx in 0..kernel {
                    let dx = kx as isize - r;
                    let w = weights[((co * in_ch + ci) * kernel + ky) * kernel + kx];
                    if w == 0.0 {
                        continue;
                    }
                    let (y0, y1) = (
                        0.max(-dy) as usize,
                        (height as isize).min(height as isize - dy) as usize,
                    );
                    let (x0, x1) = (0.max(-dx) as usize, (width as isize).min(width as isize - dx) as usize);
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let row_out = &mut plane[y * width + x0..y * width + x1];
                        let row_in = &src[sy * width + (x0 as isize + dx) as usize..];
                        for (o, i) in row_out.iter_mut().zip(row_in) {
                            *o += w * i;
                        }
                    }
                }
            }
        }
    }
}

/// Accumulates input, weight and bias gradients of [`conv2d_forward`].
pub fn conv2d_backward(
    input: &[f64],
    weights: &[f64],
    grad_out: &[f64],
    shape: ConvShape,
    grad_input: Option<&mut [f64]>,
    grad_weights: Option<&mut [f64]>,
    grad_bias: Option<&mut [f64]>,
) {
    let ConvShape {
        in_ch,
        out_ch,
        kernel,
        width,
        height,
    } = shape;
    let m = width * height;
    let r = (kernel / 2) as isize;
    if let Some(gb) = grad_bias {
        for co in 0..out_ch {
            gb[co] += grad_out[co * m..(co + 1) * m].iter().sum::<f64>();
        }
    }
    let mut gi = grad_input;
    let mut gw = grad_weights;
    for co in 0..out_ch {
        let g = &grad_out[co * m..(co + 1) * m];
        for ci in 0..in_ch {
            let src = &input[ci * m..(ci + 1) * m];
            for ky in 0..kernel {
                let dy = ky as isize - r;
                for kx in 0..kernel {
                    let dx = kx as isize - r;
                    let widx = ((co * in_ch + ci) * kernel + ky) * kernel + kx;
                    let w = weights[widx];
                    let (y0, y1) = (
                        0.max(-dy) as usize,
                        (height as isize).min(height as isize - dy) as usize,
                    );
                    let (x0, x1) = (0.max(-dx) as usize, (width as isize).min(width as isize - dx) as usize);
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let off_in = sy * width + (x0 as isize + dx) as usize;
                        let g_row = &g[y * width + x0..y * width + x1];
                        if gw.is_some() {
                            acc += g_row.iter().zip(&src[off_in..]).map(|(a, b)| a * b).sum::<f64>();
                        }
                        if let Some(gi) = gi.as_deref_mut() {
                            let dst = &mut gi[ci * m + off_in..ci * m + off_in + (x1 - x0)];
                            for (d, gv) in dst.iter_mut().zip(g_row) {
                                *d += w * gv;
                            }
                        }
                    }
                    if let Some(gw) = gw.as_deref_mut() {
                        gw[widx] += acc;
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvShape {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub width: usize,
    pub height: usize,
}

/// Weights of the noise estimator `N`, shared by every unrolled iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParams {
    /// Density (mg/cm³) mapped to 1.0 at the network input.
    pub input_scale: f64,
    pub layers: Vec<ConvLayer>,
}

pub const DEFAULT_INPUT_SCALE: f64 = 1000.0;

impl DenoiserParams {
    /// All-zero network of the given channel widths: `D` is the identity.
    pub fn zeros(channels: &[usize], kernel: usize, input_scale: f64) -> Result<Self> {
        if channels.len() < 2 || channels[0] != 2 || channels[channels.len() - 1] != 2 {
            return Err(Error::Validation("denoiser must map 2 channels to 2 channels".into()));
        }
        if !(input_scale > 0.0) {
            return Err(Error::Validation("input scale must be positive".into()));
        }
        let layers = channels
            .windows(2)
            .map(|w| ConvLayer::zeros(w[0], w[1], kernel))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { input_scale, layers })
    }

    /// 2→16→16→2 with 3×3 kernels.
    pub fn default_architecture() -> Self {
        Self::zeros(&[2, 16, 16, 2], 3, DEFAULT_INPUT_SCALE).expect("static architecture")
    }

    /// He-normal weights, zero biases; the last layer is scaled by `last_gain`.
    pub fn random(channels: &[usize], kernel: usize, input_scale: f64, last_gain: f64, seed: u64) -> Result<Self> {
        let mut params = Self::zeros(channels, kernel, input_scale)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_layers = params.layers.len();
        for (l, layer) in params.layers.iter_mut().enumerate() {
            let fan_in = (layer.in_channels * layer.kernel * layer.kernel) as f64;
            let gain = if l + 1 == n_layers { last_gain } else { 1.0 };
            let normal =
                Normal::new(0.0, gain * libm::sqrt(2.0 / fan_in)).map_err(|e| Error::Validation(format!("{e}")))?;
            layer.weights.iter_mut().for_each(|w| *w = normal.sample(&mut rng));
        }
        Ok(params)
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(ConvLayer::n_params).sum()
    }

    /// All weights then biases, layer by layer.
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.n_params());
        for layer in &self.layers {
            v.extend_from_slice(&layer.weights);
            v.extend_from_slice(&layer.bias);
        }
        v
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.n_params() {
            return Err(dim_err(format!(
                "expected {} denoiser parameters, got {}",
                self.n_params(),
                flat.len()
            )));
        }
        let mut off = 0;
        for layer in &mut self.layers {
            let nw = layer.weights.len();
            layer.weights.copy_from_slice(&flat[off..off + nw]);
            off += nw;
            let nb = layer.bias.len();
            layer.bias.copy_from_slice(&flat[off..off + nb]);
            off += nb;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        for (k, layer) in self.layers.iter().enumerate() {
            if layer.kernel % 2 == 0 {
                return Err(Error::Validation(format!("layer {k} kernel size is even")));
            }
            if layer.weights.len() != layer.out_channels * layer.in_channels * layer.kernel * layer.kernel
                || layer.bias.len() != layer.out_channels
            {
                return Err(dim_err(format!("layer {k} weight tensor has the wrong size")));
            }
            if k > 0 && self.layers[k - 1].out_channels != layer.in_channels {
                return Err(dim_err(format!("layer {k} input channels do not chain")));
            }
            if layer.weights.iter().chain(&layer.bias).any(|v| !v.is_finite()) {
                return Err(Error::Validation(format!("layer {k} has non-finite weights")));
            }
        }
        Ok(())
    }

    /// Noise estimate `N(x)` for a channel-major two-channel image.
    pub fn noise_estimate(&self, x: &[f64], width: usize, height: usize) -> Vec<f64> {
        let m = width * height;
        let inv = 1.0 / self.input_scale;
        let mut act: Vec<f64> = x.iter().map(|v| v * inv).collect();
        let n_layers = self.layers.len();
        for (l, layer) in self.layers.iter().enumerate() {
            let mut out = vec![0.0; layer.out_channels * m];
            let shape = ConvShape {
                in_ch: layer.in_channels,
                out_ch: layer.out_channels,
                kernel: layer.kernel,
                width,
                height,
            };
            conv2d_forward(&act, &layer.weights, &layer.bias, shape, &mut out);
            if l + 1 < n_layers {
                out.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            act = out;
        }
        act.iter_mut().for_each(|v| *v *= self.input_scale);
        act
    }

    /// `D(x) = x - N(x)` on raw channel-major data.
    pub fn denoise_slice(&self, x: &[f64], width: usize, height: usize) -> Vec<f64> {
        let noise = self.noise_estimate(x, width, height);
        x.iter().zip(&noise).map(|(a, b)| a - b).collect()
    }

    /// `D(x) = x - N(x)`. The result may contain negative values.
    pub fn denoise(&self, x: &MaterialImage) -> Result<MaterialImage> {
        if self.layers.first().map(|l| l.in_channels) != Some(2)
            || self.layers.last().map(|l| l.out_channels) != Some(2)
        {
            return Err(dim_err("denoiser must map 2 channels to 2 channels"));
        }
        let out = self.denoise_slice(x.as_slice(), x.width(), x.height());
        MaterialImage::from_raw_unchecked(x.width(), x.height(), x.pixel_size(), out)
    }
}
