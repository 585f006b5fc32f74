//! Trunk layers. Every trunk layer ends in a ReLU; the conv-lite layer also
//! applies a 2x2 max-pool.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DclError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    /// `relu(W x + b)`, `W` row-major `(output, input)`.
    Dense { input: usize, output: usize },
    /// Valid-padding convolution, ReLU, then 2x2/stride-2 max-pool.
    /// Input is channel-major `(channels_in, height, width)`.
    ConvLite {
        channels_in: usize,
        channels_out: usize,
        kernel: usize,
        height: usize,
        width: usize,
    },
}

/// Per-sample forward cache of one layer.
#[derive(Debug, Clone, Default)]
pub struct LayerTrace {
    pub out: Vec<f32>,
    /// Conv-lite only: post-ReLU convolution map and pooled argmax indices.
    conv: Vec<f32>,
    argmax: Vec<u32>,
}

impl LayerKind {
    pub fn dense(input: usize, output: usize) -> Self {
        LayerKind::Dense { input, output }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            LayerKind::Dense { input, output } => {
                if input == 0 || output == 0 {
                    return Err(DclError::InvalidArgument("dense dims must be > 0".into()));
                }
            }
            LayerKind::ConvLite {
                channels_in,
                channels_out,
                kernel,
                height,
                width,
            } => {
                if channels_in == 0 || channels_out == 0 || kernel == 0 {
                    return Err(DclError::InvalidArgument("conv dims must be > 0".into()));
                }
                if height < kernel + 1 || width < kernel + 1 {
                    return Err(DclError::InvalidArgument(format!(
                        "{height}x{width} input too small for kernel {kernel} plus 2x2 pooling"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        match *self {
            LayerKind::Dense { input, .. } => input,
            LayerKind::ConvLite {
                channels_in,
                height,
                width,
                ..
            } => channels_in * height * width,
        }
    }

    fn conv_dims(&self) -> (usize, usize, usize, usize) {
        match *self {
            LayerKind::ConvLite {
                kernel,
                height,
                width,
                ..
            } => {
                let oh = height - kernel + 1;
                let ow = width - kernel + 1;
                (oh, ow, oh / 2, ow / 2)
            }
            LayerKind::Dense { .. } => unreachable!(),
        }
    }

    pub fn output_dim(&self) -> usize {
        match *self {
            LayerKind::Dense { output, .. } => output,
            LayerKind::ConvLite { channels_out, .. } => {
                let (_, _, ph, pw) = self.conv_dims();
                channels_out * ph * pw
            }
        }
    }

    /// Weight shape followed by bias shape.
    pub fn param_shapes(&self) -> (Vec<usize>, Vec<usize>) {
        match *self {
            LayerKind::Dense { input, output } => (vec![output, input], vec![output]),
            LayerKind::ConvLite {
                channels_in,
                channels_out,
                kernel,
                ..
            } => (
                vec![channels_out, channels_in, kernel, kernel],
                vec![channels_out],
            ),
        }
    }

    /// `|W| + |b|`, or `(c_in c_out) k^2 + c_out` for conv-lite.
    pub fn param_count(&self) -> usize {
        let (w, b) = self.param_shapes();
        w.iter().product::<usize>() + b.iter().product::<usize>()
    }

    fn fans(&self) -> (usize, usize) {
        match *self {
            LayerKind::Dense { input, output } => (input, output),
            LayerKind::ConvLite {
                channels_in,
                channels_out,
                kernel,
                ..
            } => (channels_in * kernel * kernel, channels_out * kernel * kernel),
        }
    }

    /// Xavier-uniform weights, zero bias.
    pub fn init_xavier<R: Rng + ?Sized>(&self, params: &mut [f32], rng: &mut R) {
        let (fan_in, fan_out) = self.fans();
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt() as f32;
        let n_weights = self.param_count() - self.param_shapes().1[0];
        for w in &mut params[..n_weights] {
            *w = rng.random_range(-limit..=limit);
        }
        for b in &mut params[n_weights..] {
            *b = 0.0;
        }
    }

    pub fn forward(&self, params: &[f32], x: &[f32], trace: &mut LayerTrace) {
        match *self {
            LayerKind::Dense { input, output } => {
                trace.out.resize(output, 0.0);
                dense_affine(params, input, output, x, &mut trace.out);
                for v in &mut trace.out {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
            }
            LayerKind::ConvLite {
                channels_in,
                channels_out,
                kernel,
                height,
                width,
            } => {
                let (oh, ow, ph, pw) = self.conv_dims();
                let kk = kernel * kernel;
                let n_weights = channels_out * channels_in * kk;
                let (weights, bias) = params.split_at(n_weights);
                trace.conv.resize(channels_out * oh * ow, 0.0);
                for co in 0..channels_out {
                    for r in 0..oh {
                        for c in 0..ow {
                            let mut acc = bias[co] as f64;
                            for ci in 0..channels_in {
                                let wbase = (co * channels_in + ci) * kk;
                                let xbase = ci * height * width;
                                for ki in 0..kernel {
                                    for kj in 0..kernel {
                                        acc += weights[wbase + ki * kernel + kj] as f64
                                            * x[xbase + (r + ki) * width + c + kj] as f64;
                                    }
                                }
                            }
                            trace.conv[(co * oh + r) * ow + c] = (acc as f32).max(0.0);
                        }
                    }
                }
                trace.out.resize(channels_out * ph * pw, 0.0);
                trace.argmax.resize(channels_out * ph * pw, 0);
                for co in 0..channels_out {
                    for pr in 0..ph {
                        for pc in 0..pw {
                            let mut best = u32::MAX;
                            let mut best_v = f32::NEG_INFINITY;
                            for dr in 0..2 {
                                for dc in 0..2 {
                                    let idx = (co * oh + 2 * pr + dr) * ow + 2 * pc + dc;
                                    if trace.conv[idx] > best_v {
                                        best_v = trace.conv[idx];
                                        best = idx as u32;
                                    }
                                }
                            }
                            let o = (co * ph + pr) * pw + pc;
                            trace.out[o] = best_v;
                            trace.argmax[o] = best;
                        }
                    }
                }
            }
        }
    }

    /// Backpropagates `grad_out` (gradient w.r.t. this layer's output).
    /// Parameter gradients are accumulated into `grad_params` when given;
    /// the input gradient is written to `grad_in` when given.
    pub fn backward(
        &self,
        params: &[f32],
        x: &[f32],
        trace: &LayerTrace,
        grad_out: &[f32],
        grad_params: Option<&mut [f64]>,
        grad_in: Option<&mut Vec<f32>>,
    ) {
        match *self {
            LayerKind::Dense { input, output } => {
                let dz: Vec<f32> = grad_out
                    .iter()
                    .zip(&trace.out)
                    .map(|(g, a)| if *a > 0.0 { *g } else { 0.0 })
                    .collect();
                dense_affine_backward(params, input, output, x, &dz, grad_params, grad_in);
            }
            LayerKind::ConvLite {
                channels_in,
                channels_out,
                kernel,
                height,
                width,
            } => {
                let (oh, ow, _, _) = self.conv_dims();
                let kk = kernel * kernel;
                let n_weights = channels_out * channels_in * kk;
                let mut dconv = vec![0.0f32; channels_out * oh * ow];
                for (o, &idx) in trace.argmax.iter().enumerate() {
                    let idx = idx as usize;
                    if trace.conv[idx] > 0.0 {
                        dconv[idx] += grad_out[o];
                    }
                }
                if let Some(gp) = grad_params {
                    let (gw, gb) = gp.split_at_mut(n_weights);
                    for co in 0..channels_out {
                        for r in 0..oh {
                            for c in 0..ow {
                                let d = dconv[(co * oh + r) * ow + c] as f64;
                                if d == 0.0 {
                                    continue;
                                }
                                gb[co] += d;
                                for ci in 0..channels_in {
                                    let wbase = (co * channels_in + ci) * kk;
                                    let xbase = ci * height * width;
                                    for ki in 0..kernel {
                                        for kj in 0..kernel {
                                            gw[wbase + ki * kernel + kj] +=
                                                d * x[xbase + (r + ki) * width + c + kj] as f64;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                if let Some(gi) = grad_in {
                    gi.clear();
                    gi.resize(channels_in * height * width, 0.0);
                    let weights = &params[..n_weights];
                    for co in 0..channels_out {
                        for r in 0..oh {
                            for c in 0..ow {
                                let d = dconv[(co * oh + r) * ow + c];
                                if d == 0.0 {
                                    continue;
                                }
                                for ci in 0..channels_in {
                                    let wbase = (co * channels_in + ci) * kk;
                                    let xbase = ci * height * width;
                                    for ki in 0..kernel {
                                        for kj in 0..kernel {
                                            gi[xbase + (r + ki) * width + c + kj] +=
                                                weights[wbase + ki * kernel + kj] * d;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `out = W x + b` with 64-bit accumulation. `params` is `W` (row-major
/// `(output, input)`) followed by `b`.
pub fn dense_affine(params: &[f32], input: usize, output: usize, x: &[f32], out: &mut [f32]) {
    debug_assert_eq!(params.len(), input * output + output);
    debug_assert_eq!(x.len(), input);
    let (w, b) = params.split_at(input * output);
    for (o, slot) in out.iter_mut().enumerate().take(output) {
        let row = &w[o * input..(o + 1) * input];
        let mut acc = b[o] as f64;
        for (wi, xi) in row.iter().zip(x) {
            acc += *wi as f64 * *xi as f64;
        }
        *slot = acc as f32;
    }
}

/// Backward of [`dense_affine`] given `dz = dL/d(Wx+b)`.
pub fn dense_affine_backward(
    params: &[f32],
    input: usize,
    output: usize,
    x: &[f32],
    dz: &[f32],
    grad_params: Option<&mut [f64]>,
    grad_in: Option<&mut Vec<f32>>,
) {
    if let Some(gp) = grad_params {
        let (gw, gb) = gp.split_at_mut(input * output);
        for o in 0..output {
            let d = dz[o] as f64;
            if d == 0.0 {
                continue;
            }
            gb[o] += d;
            let row = &mut gw[o * input..(o + 1) * input];
            for (g, xi) in row.iter_mut().zip(x) {
                *g += d * *xi as f64;
            }
        }
    }
    if let Some(gi) = grad_in {
        let w = &params[..input * output];
        let mut acc = vec![0.0f64; input];
        for o in 0..output {
            let d = dz[o] as f64;
            if d == 0.0 {
                continue;
            }
            for (a, wi) in acc.iter_mut().zip(&w[o * input..(o + 1) * input]) {
                *a += *wi as f64 * d;
            }
        }
        gi.clear();
        gi.extend(acc.into_iter().map(|a| a as f32));
    }
}
