//! A small trainable convolutional backbone producing non-negative feature maps.
//!
//! Each block is a 3×3 convolution with replicate (edge-clamped) padding, a ReLU
//! and an s×s average-pool downsample. Replicate padding keeps a constant input
//! constant through the whole stack, so a uniform image maps to a uniform
//! feature map.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{AsdaError, Result};
use crate::feature::{FeatureMap, ImageTensor, MIN_IMAGE_SIDE};

const KERNEL: usize = 3;
const TAPS: usize = KERNEL * KERNEL;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockSpec {
    pub out_channels: usize,
    /// Downsample factor of the block's average pool (1 = no pooling).
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BackboneConfig {
    pub blocks: Vec<BlockSpec>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig::uniform(&[16, 32, 32], 2)
    }
}

impl BackboneConfig {
    pub fn uniform(channels: &[usize], stride: usize) -> Self {
        BackboneConfig {
            blocks: channels
                .iter()
                .map(|&out_channels| BlockSpec {
                    out_channels,
                    stride,
                })
                .collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() {
            return Err(AsdaError::InvalidConfig(
                "backbone needs at least one conv block".into(),
            ));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            if b.out_channels == 0 {
                return Err(AsdaError::InvalidConfig(format!(
                    "block {i} has zero output channels"
                )));
            }
            if b.stride < 1 {
                return Err(AsdaError::InvalidConfig(format!(
                    "block {i} has stride {} (< 1)",
                    b.stride
                )));
            }
        }
        if self.output_channels() < 4 {
            return Err(AsdaError::InvalidConfig(format!(
                "output channel count {} is below 4",
                self.output_channels()
            )));
        }
        Ok(())
    }

    pub fn output_channels(&self) -> usize {
        self.blocks.last().map_or(0, |b| b.out_channels)
    }

    pub fn total_stride(&self) -> usize {
        self.blocks.iter().map(|b| b.stride).product()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvBlock {
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    /// Layout (out, ky, kx, in).
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ConvBlock {
    fn patch_len(&self) -> usize {
        TAPS * self.in_channels
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    pub blocks: Vec<ConvBlock>,
    pub trainable: bool,
}

/// Per-block activations kept by a forward pass for the backward pass.
#[derive(Clone, Debug)]
pub struct BackboneCache {
    layers: Vec<LayerCache>,
}

#[derive(Clone, Debug)]
struct LayerCache {
    height: usize,
    width: usize,
    input: Vec<f64>,
    pre_activation: Vec<f64>,
}

impl BackboneCache {
    pub(crate) fn hash_structure<H: std::hash::Hasher>(&self, state: &mut H) {
        for layer in &self.layers {
            for chunk in layer.pre_activation.chunks(64) {
                let mut bits = 0u64;
                for (i, v) in chunk.iter().enumerate() {
                    if *v > 0.0 {
                        bits |= 1 << i;
                    }
                }
                state.write_u64(bits);
            }
        }
    }
}

pub fn build_backbone(config: &BackboneConfig, seed: u64) -> Result<Backbone> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut in_channels = 3;
    let mut blocks = Vec::with_capacity(config.blocks.len());
    for spec in &config.blocks {
        let fan_in = (TAPS * in_channels) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("finite std");
        let weight = (0..spec.out_channels * TAPS * in_channels)
            .map(|_| normal.sample(&mut rng))
            .collect();
        blocks.push(ConvBlock {
            in_channels,
            out_channels: spec.out_channels,
            stride: spec.stride,
            weight,
            bias: vec![0.0; spec.out_channels],
        });
        in_channels = spec.out_channels;
    }
    Ok(Backbone {
        blocks,
        trainable: true,
    })
}

impl Backbone {
    pub fn output_channels(&self) -> usize {
        self.blocks.last().map_or(0, |b| b.out_channels)
    }

    pub fn total_stride(&self) -> usize {
        self.blocks.iter().map(|b| b.stride).product()
    }

    pub fn min_input_side(&self) -> usize {
        self.total_stride().max(MIN_IMAGE_SIDE)
    }

    pub fn output_dims(&self, height: usize, width: usize) -> (usize, usize) {
        self.blocks
            .iter()
            .fold((height, width), |(h, w), b| (h / b.stride, w / b.stride))
    }

    fn check_input(&self, image: &ImageTensor) -> Result<()> {
        let min = self.min_input_side();
        if image.height() < min || image.width() < min {
            return Err(AsdaError::ImageTooSmall {
                height: image.height(),
                width: image.width(),
                min,
            });
        }
        Ok(())
    }

    pub fn extract_feature_map(&self, image: &ImageTensor) -> Result<FeatureMap> {
        Ok(self.forward(image, false)?.0)
    }

    /// Runs the stack; keeps per-layer activations when `keep_cache` is set.
    pub fn forward(
        &self,
        image: &ImageTensor,
        keep_cache: bool,
    ) -> Result<(FeatureMap, Option<BackboneCache>)> {
        self.check_input(image)?;
        let (mut h, mut w) = (image.height(), image.width());
        let mut current = image.data().to_vec();
        let mut layers = Vec::new();
        for block in &self.blocks {
            let pre = conv_forward(block, &current, h, w);
            let act: Vec<f64> = pre.iter().map(|v| v.max(0.0)).collect();
            let (next, nh, nw) = avg_pool(&act, h, w, block.out_channels, block.stride);
            if keep_cache {
                layers.push(LayerCache {
                    height: h,
                    width: w,
                    input: std::mem::take(&mut current),
                    pre_activation: pre,
                });
            }
            current = next;
            h = nh;
            w = nw;
        }
        if current.iter().any(|v| !v.is_finite()) {
            return Err(AsdaError::NonFinite { stage: "backbone" });
        }
        let fm = FeatureMap::from_raw(h, w, self.output_channels(), current);
        Ok((fm, keep_cache.then_some(BackboneCache { layers })))
    }

    /// Accumulates parameter gradients given the gradient w.r.t. the output map.
    /// `grads` holds (weight, bias) gradient buffers per block.
    pub fn backward(
        &self,
        cache: &BackboneCache,
        d_output: &[f64],
        grads: &mut [(&mut [f64], &mut [f64])],
    ) {
        let mut d_next = d_output.to_vec();
        for (li, (block, layer)) in self.blocks.iter().zip(&cache.layers).enumerate().rev() {
            let d_act = avg_pool_backward(
                &d_next,
                layer.height,
                layer.width,
                block.out_channels,
                block.stride,
            );
            let d_pre: Vec<f64> = d_act
                .iter()
                .zip(&layer.pre_activation)
                .map(|(g, p)| if *p > 0.0 { *g } else { 0.0 })
                .collect();
            let (dw, db) = &mut grads[li];
            d_next = conv_backward(
                block,
                &layer.input,
                layer.height,
                layer.width,
                &d_pre,
                dw,
                db,
                li > 0,
            );
        }
    }
}

#[inline]
fn fill_patch(input: &[f64], h: usize, w: usize, cin: usize, y: usize, x: usize, patch: &mut [f64]) {
    for ky in 0..KERNEL {
        let yy = (y + ky).saturating_sub(1).min(h - 1);
        for kx in 0..KERNEL {
            let xx = (x + kx).saturating_sub(1).min(w - 1);
            let src = (yy * w + xx) * cin;
            let dst = (ky * KERNEL + kx) * cin;
            patch[dst..dst + cin].copy_from_slice(&input[src..src + cin]);
        }
    }
}

fn conv_forward(block: &ConvBlock, input: &[f64], h: usize, w: usize) -> Vec<f64> {
    let cin = block.in_channels;
    let cout = block.out_channels;
    let plen = block.patch_len();
    let mut out = vec![0.0; h * w * cout];
    let mut patch = vec![0.0; plen];
    for y in 0..h {
        for x in 0..w {
            fill_patch(input, h, w, cin, y, x, &mut patch);
            let o_base = (y * w + x) * cout;
            for o in 0..cout {
                let kernel = &block.weight[o * plen..(o + 1) * plen];
                let dot: f64 = kernel.iter().zip(&patch).map(|(a, b)| a * b).sum();
                out[o_base + o] = block.bias[o] + dot;
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv_backward(
    block: &ConvBlock,
    input: &[f64],
    h: usize,
    w: usize,
    d_out: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
    need_input_grad: bool,
) -> Vec<f64> {
    let cin = block.in_channels;
    let cout = block.out_channels;
    let plen = block.patch_len();
    let mut d_input = if need_input_grad {
        vec![0.0; h * w * cin]
    } else {
        Vec::new()
    };
    let mut patch = vec![0.0; plen];
    let mut d_patch = vec![0.0; plen];
    for y in 0..h {
        for x in 0..w {
            let o_base = (y * w + x) * cout;
            let grads = &d_out[o_base..o_base + cout];
            if grads.iter().all(|g| *g == 0.0) {
                continue;
            }
            fill_patch(input, h, w, cin, y, x, &mut patch);
            d_patch.iter_mut().for_each(|v| *v = 0.0);
            for (o, &g) in grads.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                db[o] += g;
                let kernel = &block.weight[o * plen..(o + 1) * plen];
                let dk = &mut dw[o * plen..(o + 1) * plen];
                for j in 0..plen {
                    dk[j] += g * patch[j];
                }
                if need_input_grad {
                    for j in 0..plen {
                        d_patch[j] += g * kernel[j];
                    }
                }
            }
            if need_input_grad {
                for ky in 0..KERNEL {
                    let yy = (y + ky).saturating_sub(1).min(h - 1);
                    for kx in 0..KERNEL {
                        let xx = (x + kx).saturating_sub(1).min(w - 1);
                        let dst = (yy * w + xx) * cin;
                        let src = (ky * KERNEL + kx) * cin;
                        for c in 0..cin {
                            d_input[dst + c] += d_patch[src + c];
                        }
                    }
                }
            }
        }
    }
    d_input
}

fn avg_pool(input: &[f64], h: usize, w: usize, c: usize, s: usize) -> (Vec<f64>, usize, usize) {
    if s == 1 {
        return (input.to_vec(), h, w);
    }
    let (oh, ow) = (h / s, w / s);
    let norm = 1.0 / (s * s) as f64;
    let mut out = vec![0.0; oh * ow * c];
    for oy in 0..oh {
        for ox in 0..ow {
            let dst = (oy * ow + ox) * c;
            for dy in 0..s {
                for dx in 0..s {
                    let src = ((oy * s + dy) * w + ox * s + dx) * c;
                    for ch in 0..c {
                        out[dst + ch] += input[src + ch];
                    }
                }
            }
            out[dst..dst + c].iter_mut().for_each(|v| *v *= norm);
        }
    }
    (out, oh, ow)
}

fn avg_pool_backward(d_out: &[f64], h: usize, w: usize, c: usize, s: usize) -> Vec<f64> {
    if s == 1 {
        return d_out.to_vec();
    }
    let (oh, ow) = (h / s, w / s);
    let norm = 1.0 / (s * s) as f64;
    let mut d_in = vec![0.0; h * w * c];
    for oy in 0..oh {
        for ox in 0..ow {
            let src = (oy * ow + ox) * c;
            for dy in 0..s {
                for dx in 0..s {
                    let dst = ((oy * s + dy) * w + ox * s + dx) * c;
                    for ch in 0..c {
                        d_in[dst + ch] = d_out[src + ch] * norm;
                    }
                }
            }
        }
    }
    d_in
}
