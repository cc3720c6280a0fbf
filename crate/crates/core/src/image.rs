//! Interleaved floating-point images and frame sequences.
//!
//! Samples are stored row-major with channels innermost (`H x W x C`), in the
//! `[0, 1]` intensity scale for frames loaded from 8-bit sources. Values are
//! not clamped: noisy training inputs legitimately leave that range.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, 0.0)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Image {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::Dimension(format!(
                "{} samples cannot form a {height}x{width}x{channels} image",
                data.len()
            )));
        }
        Ok(Image {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Image {
            height,
            width,
            channels,
            data,
        }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    /// `(height, width, channels)`
    #[inline]
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[self.index(y, x, c)]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, value: f64) {
        let i = self.index(y, x, c);
        self.data[i] = value;
    }

    pub fn ensure_same_shape(&self, other: &Image, what: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Dimension(format!(
                "{what}: shape {:?} does not match {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Image> {
        if top + height > self.height || left + width > self.width {
            return Err(Error::Dimension(format!(
                "crop {height}x{width} at ({top}, {left}) exceeds {}x{}",
                self.height, self.width
            )));
        }
        let c = self.channels;
        let mut data = Vec::with_capacity(height * width * c);
        for y in top..top + height {
            let start = self.index(y, left, 0);
            data.extend_from_slice(&self.data[start..start + width * c]);
        }
        Ok(Image {
            height,
            width,
            channels: c,
            data,
        })
    }

    pub fn flip_horizontal(&self) -> Image {
        Image::from_fn(self.height, self.width, self.channels, |y, x, c| {
            self.get(y, self.width - 1 - x, c)
        })
    }

    pub fn flip_vertical(&self) -> Image {
        Image::from_fn(self.height, self.width, self.channels, |y, x, c| {
            self.get(self.height - 1 - y, x, c)
        })
    }

    pub fn clamped(&self, lo: f64, hi: f64) -> Image {
        Image {
            data: self.data.iter().map(|v| v.clamp(lo, hi)).collect(),
            ..self.clone()
        }
    }

    /// Round to the nearest 8-bit level and map back to `[0, 1]`.
    pub fn quantized_8bit(&self) -> Image {
        Image {
            data: self
                .data
                .iter()
                .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
                .collect(),
            ..self.clone()
        }
    }

    /// Mean over channels, giving a single-channel image.
    pub fn luma(&self) -> Image {
        let c = self.channels as f64;
        Image {
            height: self.height,
            width: self.width,
            channels: 1,
            data: self
                .data
                .chunks_exact(self.channels)
                .map(|px| px.iter().sum::<f64>() / c)
                .collect(),
        }
    }

    /// Sample at an edge-clamped integer position.
    #[inline]
    pub fn get_clamped(&self, y: isize, x: isize, c: usize) -> f64 {
        let y = y.clamp(0, self.height as isize - 1) as usize;
        let x = x.clamp(0, self.width as isize - 1) as usize;
        self.get(y, x, c)
    }

    /// Bilinear sample at a real-valued position; coordinates outside the
    /// image are clamped to the border first.
    #[inline]
    pub fn sample_bilinear(&self, y: f64, x: f64, c: usize) -> f64 {
        let y = y.clamp(0.0, (self.height - 1) as f64);
        let x = x.clamp(0.0, (self.width - 1) as f64);
        let y0 = y.floor() as usize;
        let x0 = x.floor() as usize;
        let y1 = (y0 + 1).min(self.height - 1);
        let x1 = (x0 + 1).min(self.width - 1);
        let fy = y - y0 as f64;
        let fx = x - x0 as f64;
        let top = self.get(y0, x0, c) * (1.0 - fx) + self.get(y0, x1, c) * fx;
        let bottom = self.get(y1, x0, c) * (1.0 - fx) + self.get(y1, x1, c) * fx;
        top * (1.0 - fy) + bottom * fy
    }
}

/// Ordered frames sharing one shape.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameSequence {
    frames: Vec<Image>,
    pub frame_rate: Option<f64>,
}

impl FrameSequence {
    pub fn new(frames: Vec<Image>) -> Result<Self> {
        let Some(first) = frames.first() else {
            return Err(Error::Data("a frame sequence needs at least one frame".into()));
        };
        let shape = first.shape();
        if let Some((i, f)) = frames.iter().enumerate().find(|(_, f)| f.shape() != shape) {
            return Err(Error::Data(format!(
                "frame {i} has shape {:?}, expected {shape:?}",
                f.shape()
            )));
        }
        Ok(FrameSequence {
            frames,
            frame_rate: None,
        })
    }

    pub fn frames(&self) -> &[Image] {
        &self.frames
    }

    pub fn into_frames(self) -> Vec<Image> {
        self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// `(height, width, channels)` shared by every frame.
    pub fn frame_shape(&self) -> (usize, usize, usize) {
        self.frames[0].shape()
    }

    /// Keep at most the first `max_frames` frames.
    pub fn truncated(&self, max_frames: usize) -> FrameSequence {
        FrameSequence {
            frames: self.frames.iter().take(max_frames.max(1)).cloned().collect(),
            frame_rate: self.frame_rate,
        }
    }
}
