//! Volumetric feature extractor: a strided patch-embedding convolution followed
//! by mixer blocks, each a residual depthwise convolution and a pointwise
//! convolution. A learned 1×1×1 convolution squeezes the channels to one global map.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{push_pair, BoundConv, ConvParams, Parameters, Rng64};
use crate::ops::{conv3d_output_len, Conv3dSpec};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub channels: usize,
    pub depth: usize,
    pub kernel: usize,
    pub patch_stride: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            channels: 32,
            depth: 2,
            kernel: 5,
            patch_stride: 2,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.channels == 0 || self.patch_stride == 0 {
            return Err(Error::Invalid(format!("backbone sizes must be positive: {self:?}")));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(Error::Invalid(format!("backbone kernel must be odd, got {}", self.kernel)));
        }
        Ok(())
    }

    fn patch_spec(&self) -> Conv3dSpec {
        Conv3dSpec {
            stride: self.patch_stride,
            padding: self.kernel / 2,
            groups: 1,
        }
    }

    fn depthwise_spec(&self) -> Conv3dSpec {
        Conv3dSpec {
            stride: 1,
            padding: self.kernel / 2,
            groups: self.channels,
        }
    }

    /// Spatial dimensions of `F_b` for an input volume of `dims`.
    pub fn feature_dims(&self, dims: [usize; 3]) -> Result<[usize; 3]> {
        let mut out = [0; 3];
        for (o, &d) in out.iter_mut().zip(&dims) {
            if d < self.kernel {
                return Err(Error::shape(
                    "patch_embed",
                    format!("volume dimension {d} is smaller than the kernel {}", self.kernel),
                ));
            }
            *o = conv3d_output_len(d, self.kernel, self.patch_stride, self.kernel / 2)
                .expect("kernel fits a dimension at least as large");
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixerBlockParams {
    pub depthwise: ConvParams,
    pub pointwise: ConvParams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneParams {
    pub patch_embed: ConvParams,
    pub blocks: Vec<MixerBlockParams>,
    pub squeeze: ConvParams,
}

impl BackboneParams {
    pub fn init(config: &BackboneConfig, rng: &mut Rng64) -> Self {
        let c = config.channels;
        let patch_embed = ConvParams::init(c, config.in_channels, config.kernel, rng);
        let blocks = (0..config.depth)
            .map(|_| MixerBlockParams {
                depthwise: ConvParams::init(c, 1, config.kernel, rng),
                pointwise: ConvParams::init(c, c, 1, rng),
            })
            .collect();
        let squeeze = ConvParams::init(1, c, 1, rng);
        Self {
            patch_embed,
            blocks,
            squeeze,
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundBackbone {
        BoundBackbone {
            patch_embed: self.patch_embed.bind(tape),
            blocks: self
                .blocks
                .iter()
                .map(|b| (b.depthwise.bind(tape), b.pointwise.bind(tape)))
                .collect(),
            squeeze: self.squeeze.bind(tape),
        }
    }
}

impl Parameters for BackboneParams {
    fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        push_pair(&mut out, "patch_embed", &self.patch_embed.weight, &self.patch_embed.bias);
        for (i, b) in self.blocks.iter().enumerate() {
            push_pair(&mut out, &format!("block{i}.depthwise"), &b.depthwise.weight, &b.depthwise.bias);
            push_pair(&mut out, &format!("block{i}.pointwise"), &b.pointwise.weight, &b.pointwise.bias);
        }
        push_pair(&mut out, "squeeze", &self.squeeze.weight, &self.squeeze.bias);
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        out.push(&mut self.patch_embed.weight);
        out.push(&mut self.patch_embed.bias);
        for b in &mut self.blocks {
            out.push(&mut b.depthwise.weight);
            out.push(&mut b.depthwise.bias);
            out.push(&mut b.pointwise.weight);
            out.push(&mut b.pointwise.bias);
        }
        out.push(&mut self.squeeze.weight);
        out.push(&mut self.squeeze.bias);
        out
    }
}

/// Backbone parameters placed on a tape, in [`Parameters`] order.
pub struct BoundBackbone {
    pub patch_embed: BoundConv,
    pub blocks: Vec<(BoundConv, BoundConv)>,
    pub squeeze: BoundConv,
}

impl BoundBackbone {
    pub fn vars(&self) -> Vec<Var> {
        let mut out = Vec::from(self.patch_embed.vars());
        for (dw, pw) in &self.blocks {
            out.extend(dw.vars());
            out.extend(pw.vars());
        }
        out.extend(self.squeeze.vars());
        out
    }
}

fn check_volume(tape: &Tape, volume: Var, config: &BackboneConfig) -> Result<()> {
    let shape = tape.value(volume).shape();
    if shape.len() != 4 || shape[0] != config.in_channels {
        return Err(Error::shape(
            "patch_embed",
            format!(
                "expected a [{}, D, H, W] volume, got {shape:?}",
                config.in_channels
            ),
        ));
    }
    config.feature_dims([shape[1], shape[2], shape[3]]).map(|_| ())
}

/// Strided `k×k×k` convolution from the input channels to `C` channels.
pub fn patch_embed(tape: &mut Tape, volume: Var, params: &BoundBackbone, config: &BackboneConfig) -> Result<Var> {
    check_volume(tape, volume, config)?;
    params.patch_embed.apply(tape, volume, config.patch_spec())
}

/// `relu(pointwise(relu(x + depthwise(x))))`; spatial shape is preserved.
pub fn mixer_block(
    tape: &mut Tape,
    x: Var,
    depthwise: &BoundConv,
    pointwise: &BoundConv,
    config: &BackboneConfig,
) -> Result<Var> {
    let channels = tape.value(x).shape().first().copied().unwrap_or(0);
    if channels != config.channels {
        return Err(Error::shape(
            "mixer_block",
            format!("expected {} channels, got {channels}", config.channels),
        ));
    }
    let spatial = depthwise.apply(tape, x, config.depthwise_spec())?;
    let residual = tape.add(x, spatial)?;
    let mixed = tape.relu(residual)?;
    let projected = pointwise.apply(tape, mixed, Conv3dSpec::default())?;
    tape.relu(projected)
}

/// `F_b`: patch embedding followed by every mixer block.
pub fn backbone_forward(tape: &mut Tape, volume: Var, params: &BoundBackbone, config: &BackboneConfig) -> Result<Var> {
    let mut x = patch_embed(tape, volume, params, config)?;
    for (dw, pw) in &params.blocks {
        x = mixer_block(tape, x, dw, pw, config)?;
    }
    Ok(x)
}

/// `F_se`: learned 1×1×1 convolution from `C` channels to one.
pub fn channel_squeeze(tape: &mut Tape, features: Var, params: &BoundBackbone) -> Result<Var> {
    params.squeeze.apply(tape, features, Conv3dSpec::default())
}
