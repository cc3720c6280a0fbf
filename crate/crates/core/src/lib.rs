//! Two-stage convolutional video denoising.
//!
//! Every frame is first denoised on its own by a spatial block. The denoised
//! temporal neighbors of a frame are then aligned to it with optical flow,
//! and a temporal block fuses the aligned window into the final estimate.
//! Both blocks take a per-pixel noise map alongside the images.
//!
//! The crate also contains the pieces needed to build the models: patch
//! dataset generation, training with ADAM, checkpoints, and a PSNR benchmark
//! harness.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod flow;
pub mod image;
pub mod io;
pub mod model;
pub mod noise;
pub mod pipeline;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
pub use image::{FrameSequence, Image};
pub use model::{BlockConfig, BlockKind, DenoiserParams, Mode};
pub use noise::NoiseMap;
