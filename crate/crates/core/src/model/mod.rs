//! Spatial and temporal denoising blocks.
//!
//! Both blocks are plain feed-forward stacks of 3x3 / stride-1 convolutions
//! running at quarter resolution:
//!
//! ```text
//! layer 1        conv -> ReLU
//! layers 2..D-1  conv -> BN -> ReLU
//! layer D        conv
//! ```
//!
//! The spatial block sees the noisy frame rearranged into 12 channels plus the
//! half-resolution noise map (13 inputs) and predicts the noise, which is
//! subtracted from its input. The temporal block sees the `2T + 1` aligned,
//! spatially denoised frames (12 channels each) plus the noise map and adds
//! its output to the central frame.

mod blocks;
mod conv;
mod fold;
mod network;
mod ortho;
mod rearrange;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::stream_rng;

pub use blocks::{
    assemble_spatial_input, assemble_temporal_input, spatial_forward, temporal_forward,
};
pub use fold::fold_batchnorm;
pub use network::{BatchStats, FeatureBatch, Gradients, LayerGradients, TrainCache};
pub use ortho::{gram_deviation, orthogonality_errors, orthogonalize_kernels};
pub use rearrange::{depth_to_space, space_to_depth, CHANNEL_ORDER_TAG};

/// Quarter-resolution feature maps share the frame representation.
pub type FeatureTensor = crate::image::Image;

pub const KERNEL_SIZE: usize = 3;
pub const STRIDE: usize = 1;
pub const DEFAULT_WIDTH: usize = 96;
pub const SPATIAL_DEPTH: usize = 12;
pub const TEMPORAL_DEPTH: usize = 6;
pub const DEFAULT_TEMPORAL_RADIUS: usize = 2;
pub const FRAME_CHANNELS: usize = 3;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    Spatial,
    Temporal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

/// Architecture of one block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub kind: BlockKind,
    /// Feature maps per hidden layer (W).
    pub width: usize,
    /// Number of convolutional layers (D).
    pub depth: usize,
    /// Temporal radius T; the window holds `2T + 1` frames. Zero for spatial blocks.
    pub temporal_radius: usize,
}

impl BlockConfig {
    pub fn spatial() -> Self {
        BlockConfig {
            kind: BlockKind::Spatial,
            width: DEFAULT_WIDTH,
            depth: SPATIAL_DEPTH,
            temporal_radius: 0,
        }
    }

    pub fn temporal() -> Self {
        BlockConfig {
            kind: BlockKind::Temporal,
            width: DEFAULT_WIDTH,
            depth: TEMPORAL_DEPTH,
            temporal_radius: DEFAULT_TEMPORAL_RADIUS,
        }
    }

    pub fn with_width(mut self, width: usize) -> Self {
        self.width = width;
        self
    }

    pub fn with_depth(mut self, depth: usize) -> Self {
        self.depth = depth;
        self
    }

    pub fn window_len(&self) -> usize {
        match self.kind {
            BlockKind::Spatial => 1,
            BlockKind::Temporal => 2 * self.temporal_radius + 1,
        }
    }

    /// Rearranged frames plus one noise-map channel: 13 (spatial), 61 (temporal, T = 2).
    pub fn in_channels(&self) -> usize {
        self.window_len() * 4 * FRAME_CHANNELS + 1
    }

    pub fn out_channels(&self) -> usize {
        4 * FRAME_CHANNELS
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            return Err(Error::Config(format!("block depth must be >= 2, got {}", self.depth)));
        }
        if self.width == 0 {
            return Err(Error::Config("block width must be >= 1".into()));
        }
        if self.kind == BlockKind::Spatial && self.temporal_radius != 0 {
            return Err(Error::Config("spatial blocks have no temporal radius".into()));
        }
        Ok(())
    }

    pub fn layer_specs(&self) -> Vec<ConvLayerSpec> {
        (0..self.depth)
            .map(|i| {
                let first = i == 0;
                let last = i + 1 == self.depth;
                ConvLayerSpec {
                    in_channels: if first { self.in_channels() } else { self.width },
                    out_channels: if last { self.out_channels() } else { self.width },
                    kernel: KERNEL_SIZE,
                    stride: STRIDE,
                    has_norm: !first && !last,
                    has_activation: !last,
                }
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvLayerSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub has_norm: bool,
    pub has_activation: bool,
}

impl ConvLayerSpec {
    /// Length of one output channel's kernel: `3 * 3 * in_channels`.
    pub fn fan_in(&self) -> usize {
        self.kernel * self.kernel * self.in_channels
    }
}

/// Normalization attached to a conv layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum NormState {
    /// Batch normalization with learned scale/shift and running statistics.
    Batch {
        gamma: Vec<f64>,
        beta: Vec<f64>,
        running_mean: Vec<f64>,
        running_var: Vec<f64>,
        eps: f64,
        momentum: f64,
    },
    /// Folded per-channel affine map `y = scale * x + shift`.
    Affine { scale: Vec<f64>, shift: Vec<f64> },
}

impl NormState {
    fn fresh(channels: usize) -> Self {
        NormState::Batch {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvLayer {
    pub spec: ConvLayerSpec,
    /// Row-major `out_channels x (3 * 3 * in_channels)`, inner order `(ky, kx, in)`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub norm: Option<NormState>,
}

/// Learnable state of one block (θ_spa or θ_temp).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiserParams {
    pub config: BlockConfig,
    pub mode: Mode,
    pub layers: Vec<ConvLayer>,
}

impl DenoiserParams {
    /// Fan-in scaled Gaussian weights followed by one orthogonalization pass.
    pub fn init(config: BlockConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layers = config
            .layer_specs()
            .into_iter()
            .enumerate()
            .map(|(i, spec)| {
                let mut rng = stream_rng(seed, i as u64);
                let std = (2.0 / spec.fan_in() as f64).sqrt();
                let weight = (0..spec.out_channels * spec.fan_in())
                    .map(|_| std * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                ConvLayer {
                    spec,
                    weight,
                    bias: vec![0.0; spec.out_channels],
                    norm: spec.has_norm.then(|| NormState::fresh(spec.out_channels)),
                }
            })
            .collect();
        let params = DenoiserParams {
            config,
            mode: Mode::Train,
            layers,
        };
        orthogonalize_kernels(&params)
    }

    pub fn kind(&self) -> BlockKind {
        self.config.kind
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn ensure_kind(&self, kind: BlockKind) -> Result<()> {
        if self.config.kind != kind {
            return Err(Error::Config(format!(
                "expected a {kind:?} block, got {:?}",
                self.config.kind
            )));
        }
        Ok(())
    }

    pub fn ensure_mode(&self, mode: Mode) -> Result<()> {
        if self.mode != mode {
            return Err(Error::State(format!(
                "parameters are in {:?} mode, {mode:?} required",
                self.mode
            )));
        }
        Ok(())
    }

    /// Structural consistency of layers with the block configuration.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let specs = self.config.layer_specs();
        if specs.len() != self.layers.len() {
            return Err(Error::Format(format!(
                "block depth {} but {} layers present",
                self.config.depth,
                self.layers.len()
            )));
        }
        for (i, (layer, spec)) in self.layers.iter().zip(&specs).enumerate() {
            if layer.spec != *spec {
                return Err(Error::Format(format!("layer {i} spec {:?} != {spec:?}", layer.spec)));
            }
            if layer.weight.len() != spec.out_channels * spec.fan_in()
                || layer.bias.len() != spec.out_channels
            {
                return Err(Error::Format(format!("layer {i} tensor sizes are inconsistent")));
            }
            match (&layer.norm, spec.has_norm, self.mode) {
                (None, false, _) => {}
                (Some(NormState::Batch { gamma, beta, .. }), true, Mode::Train) => {
                    if gamma.len() != spec.out_channels || beta.len() != spec.out_channels {
                        return Err(Error::Format(format!("layer {i} norm size mismatch")));
                    }
                }
                (Some(NormState::Affine { scale, shift }), true, Mode::Eval) => {
                    if scale.len() != spec.out_channels || shift.len() != spec.out_channels {
                        return Err(Error::Format(format!("layer {i} affine size mismatch")));
                    }
                }
                _ => {
                    return Err(Error::Format(format!(
                        "layer {i} normalization does not match {:?} mode",
                        self.mode
                    )))
                }
            }
        }
        Ok(())
    }

    /// Trainable tensors in a fixed order: per layer weight, bias, then BN
    /// gamma and beta when present. [`Gradients::tensors`] uses the same order.
    pub fn trainable_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for layer in &mut self.layers {
            out.push(&mut layer.weight);
            out.push(&mut layer.bias);
            if let Some(NormState::Batch { gamma, beta, .. }) = &mut layer.norm {
                out.push(gamma);
                out.push(beta);
            }
        }
        out
    }

    pub fn trainable_sizes(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for layer in &self.layers {
            out.push(layer.weight.len());
            out.push(layer.bias.len());
            if let Some(NormState::Batch { gamma, beta, .. }) = &layer.norm {
                out.push(gamma.len());
                out.push(beta.len());
            }
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.trainable_sizes().iter().sum()
    }

    /// Zero the last layer's weights and bias, turning the block into the
    /// identity on its residual source.
    pub fn zero_final_layer(&mut self) {
        if let Some(last) = self.layers.last_mut() {
            last.weight.iter_mut().for_each(|w| *w = 0.0);
            last.bias.iter_mut().for_each(|b| *b = 0.0);
        }
    }
}
