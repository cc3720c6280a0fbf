//! Additive white Gaussian noise and noise maps.
//!
//! Noise levels are standard deviations on the `[0, 1]` intensity scale.
//! Use [`sigma_from_8bit`] to convert the customary 8-bit figures (e.g. 25).

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng::stream_rng;

pub fn sigma_from_8bit(sigma: f64) -> f64 {
    sigma / 255.0
}

pub fn sigma_to_8bit(sigma: f64) -> f64 {
    sigma * 255.0
}

/// Per-pixel standard deviation field that accompanies a frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl NoiseMap {
    pub fn from_vec(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::Dimension(format!(
                "{} values cannot form a {height}x{width} noise map",
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !(**v >= 0.0)) {
            return Err(Error::Domain(format!("noise map value {v} is not >= 0")));
        }
        Ok(NoiseMap {
            height,
            width,
            values,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    pub fn ensure_matches(&self, frame: &Image) -> Result<()> {
        if (self.height, self.width) != (frame.height(), frame.width()) {
            return Err(Error::Dimension(format!(
                "noise map {}x{} does not match frame {}x{}",
                self.height,
                self.width,
                frame.height(),
                frame.width()
            )));
        }
        Ok(())
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<NoiseMap> {
        if top + height > self.height || left + width > self.width {
            return Err(Error::Dimension(format!(
                "crop {height}x{width} at ({top}, {left}) exceeds {}x{}",
                self.height, self.width
            )));
        }
        let mut values = Vec::with_capacity(height * width);
        for y in top..top + height {
            let row = y * self.width;
            values.extend_from_slice(&self.values[row + left..row + left + width]);
        }
        Ok(NoiseMap {
            height,
            width,
            values,
        })
    }

    pub fn flipped(&self, horizontal: bool, vertical: bool) -> NoiseMap {
        let mut values = Vec::with_capacity(self.values.len());
        for y in 0..self.height {
            let sy = if vertical { self.height - 1 - y } else { y };
            for x in 0..self.width {
                let sx = if horizontal { self.width - 1 - x } else { x };
                values.push(self.get(sy, sx));
            }
        }
        NoiseMap { values, ..*self }
    }
}

/// Corrupt `clean` with i.i.d. zero-mean Gaussian noise of standard deviation
/// `sigma`. The result is not clipped. The noise realization depends only on
/// `seed` and the frame shape.
pub fn add_awgn(clean: &Image, sigma: f64, seed: u64) -> Result<Image> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::Domain(format!("noise sigma must be >= 0, got {sigma}")));
    }
    let mut noisy = clean.clone();
    if sigma == 0.0 {
        return Ok(noisy);
    }
    let mut rng = stream_rng(seed, 0);
    for v in noisy.data_mut() {
        let n: f64 = rng.sample(StandardNormal);
        *v += sigma * n;
    }
    Ok(noisy)
}

pub fn constant_noise_map(sigma: f64, height: usize, width: usize) -> Result<NoiseMap> {
    if !(sigma >= 0.0) {
        return Err(Error::Domain(format!("noise sigma must be >= 0, got {sigma}")));
    }
    Ok(NoiseMap {
        height,
        width,
        values: vec![sigma; height * width],
    })
}

/// Half-resolution map keeping the top-left sample of every 2x2 block.
pub fn downsample_noise_map(map: &NoiseMap) -> Result<NoiseMap> {
    if map.height % 2 != 0 || map.width % 2 != 0 {
        return Err(Error::Dimension(format!(
            "noise map {}x{} must have even dimensions",
            map.height, map.width
        )));
    }
    let (h, w) = (map.height / 2, map.width / 2);
    let mut values = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            values.push(map.get(2 * y, 2 * x));
        }
    }
    Ok(NoiseMap {
        height: h,
        width: w,
        values,
    })
}
