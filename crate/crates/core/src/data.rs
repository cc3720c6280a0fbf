//! Training patch datasets for the spatial and temporal blocks.
//!
//! Every sample is a pure function of `(corpus, config, index)`: its random
//! choices come from stream `index` of the configured seed. Generation is
//! spread over the rayon pool and collected in index order.

use std::fs;
use std::path::{Path, PathBuf};

use log::warn;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{compensate, FlowBackend};
use crate::image::{FrameSequence, Image};
use crate::io::{list_subdirs, read_frame_dir, read_image_dir};
use crate::model::{BlockKind, DenoiserParams, Mode};
use crate::noise::{add_awgn, constant_noise_map, sigma_from_8bit, NoiseMap};
use crate::pipeline::denoise_frame_spatial;
use crate::rng::stream_rng;

pub const SPATIAL_PATCH_SIZE: usize = 50;
pub const TEMPORAL_PATCH_SIZE: usize = 44;
/// Dataset sizes of the full-scale training runs.
pub const FULL_SCALE_SPATIAL_COUNT: usize = 1_024_000;
pub const FULL_SCALE_TEMPORAL_COUNT: usize = 450_000;
/// Rescaling factors of augmentation modes 1..=4; mode 0 is the identity.
pub const AUGMENT_SCALE_FACTORS: [f64; 4] = [0.9, 0.8, 0.7, 0.6];
pub const AUGMENT_MODES: usize = AUGMENT_SCALE_FACTORS.len() + 1;

#[derive(Clone, Debug, PartialEq)]
pub struct SpatialSample {
    pub noisy: Image,
    pub noise_map: NoiseMap,
    pub clean: Image,
    pub sigma: f64,
}

/// `window` holds `2T + 1` co-located patches: the spatially denoised center
/// and its denoised, motion-compensated neighbors.
#[derive(Clone, Debug, PartialEq)]
pub struct TemporalSample {
    pub window: Vec<Image>,
    pub noise_map: NoiseMap,
    pub clean_center: Image,
    pub sigma: f64,
}

/// Noise levels on the `[0, 1]` scale, sampled uniformly.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SigmaRange {
    pub min: f64,
    pub max: f64,
}

impl SigmaRange {
    pub fn from_8bit(min: f64, max: f64) -> Result<Self> {
        SigmaRange {
            min: sigma_from_8bit(min),
            max: sigma_from_8bit(max),
        }
        .validated()
    }

    /// `[0, 55]` on the 8-bit scale.
    pub fn training_default() -> Self {
        SigmaRange {
            min: 0.0,
            max: sigma_from_8bit(55.0),
        }
    }

    fn validated(self) -> Result<Self> {
        if !(self.min >= 0.0) || !(self.max >= self.min) || !self.max.is_finite() {
            return Err(Error::Domain(format!(
                "invalid sigma range [{}, {}]",
                self.min, self.max
            )));
        }
        Ok(self)
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        if self.max == self.min {
            self.min
        } else {
            rng.random_range(self.min..=self.max)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub scale_factors: Vec<f64>,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            enabled: true,
            scale_factors: AUGMENT_SCALE_FACTORS.to_vec(),
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        AugmentConfig {
            enabled: false,
            ..Default::default()
        }
    }

    fn modes(&self) -> usize {
        if self.enabled {
            self.scale_factors.len() + 1
        } else {
            1
        }
    }
}

/// One augmentation draw: rescaling mode (0 = none) and crop flips.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Augmentation {
    pub mode: usize,
    pub flip_horizontal: bool,
    pub flip_vertical: bool,
}

impl Augmentation {
    pub const IDENTITY: Augmentation = Augmentation {
        mode: 0,
        flip_horizontal: false,
        flip_vertical: false,
    };

    /// Mode 0 is the identity; modes `1..` rescale and flip at random.
    pub fn draw(mode: usize, rng: &mut ChaCha8Rng) -> Augmentation {
        if mode == 0 {
            Augmentation::IDENTITY
        } else {
            Augmentation {
                mode,
                flip_horizontal: rng.random(),
                flip_vertical: rng.random(),
            }
        }
    }

    pub fn scale_factor(&self, config: &AugmentConfig) -> Result<f64> {
        match self.mode {
            0 => Ok(1.0),
            m => config.scale_factors.get(m - 1).copied().ok_or_else(|| {
                Error::Domain(format!(
                    "augmentation mode {m} outside 0..={}",
                    config.scale_factors.len()
                ))
            }),
        }
    }

    pub fn flip_image(&self, img: &Image) -> Image {
        let mut out = img.clone();
        if self.flip_horizontal {
            out = out.flip_horizontal();
        }
        if self.flip_vertical {
            out = out.flip_vertical();
        }
        out
    }
}

/// Apply the flips of `aug` to every patch of a sample.
pub trait Flip: Sized {
    fn flipped(&self, aug: &Augmentation) -> Self;
}

impl Flip for SpatialSample {
    fn flipped(&self, aug: &Augmentation) -> Self {
        SpatialSample {
            noisy: aug.flip_image(&self.noisy),
            noise_map: self.noise_map.flipped(aug.flip_horizontal, aug.flip_vertical),
            clean: aug.flip_image(&self.clean),
            sigma: self.sigma,
        }
    }
}

impl Flip for TemporalSample {
    fn flipped(&self, aug: &Augmentation) -> Self {
        TemporalSample {
            window: self.window.iter().map(|p| aug.flip_image(p)).collect(),
            noise_map: self.noise_map.flipped(aug.flip_horizontal, aug.flip_vertical),
            clean_center: aug.flip_image(&self.clean_center),
            sigma: self.sigma,
        }
    }
}

/// Shape `floor(h * f) x floor(w * f)` of an image rescaled by `factor`.
pub fn rescaled_shape(height: usize, width: usize, factor: f64) -> (usize, usize) {
    (
        (height as f64 * factor).floor() as usize,
        (width as f64 * factor).floor() as usize,
    )
}

/// Crop of `image` rescaled by `factor` (bilinear, pixel-center aligned),
/// computed without materializing the whole rescaled image.
pub fn rescaled_crop(
    image: &Image,
    factor: f64,
    top: usize,
    left: usize,
    height: usize,
    width: usize,
) -> Result<Image> {
    if factor == 1.0 {
        return image.crop(top, left, height, width);
    }
    let (rh, rw) = rescaled_shape(image.height(), image.width(), factor);
    if top + height > rh || left + width > rw {
        return Err(Error::Dimension(format!(
            "crop {height}x{width} at ({top}, {left}) exceeds rescaled {rh}x{rw}"
        )));
    }
    let sy = image.height() as f64 / rh as f64;
    let sx = image.width() as f64 / rw as f64;
    Ok(Image::from_fn(height, width, image.channels(), |y, x, c| {
        let src_y = ((top + y) as f64 + 0.5) * sy - 0.5;
        let src_x = ((left + x) as f64 + 0.5) * sx - 0.5;
        image.sample_bilinear(src_y, src_x, c)
    }))
}

pub fn rescale(image: &Image, factor: f64) -> Result<Image> {
    let (h, w) = rescaled_shape(image.height(), image.width(), factor);
    if h == 0 || w == 0 {
        return Err(Error::Data(format!("rescaling by {factor} leaves an empty image")));
    }
    rescaled_crop(image, factor, 0, 0, h, w)
}

/// Resolve the effective scale factor of `aug` for a source of the given
/// size, falling back to no rescaling when the result would be too small.
fn effective_factor(aug: &Augmentation, config: &AugmentConfig, h: usize, w: usize, patch: usize) -> Result<f64> {
    let f = aug.scale_factor(config)?;
    let (rh, rw) = rescaled_shape(h, w, f);
    if rh < patch || rw < patch {
        warn!("rescaling a {h}x{w} image by {f} drops below the {patch}px patch; augmentation scale skipped");
        return Ok(1.0);
    }
    Ok(f)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpatialDatasetConfig {
    pub count: usize,
    pub patch_size: usize,
    pub sigma_range: SigmaRange,
    pub seed: u64,
    pub augment: AugmentConfig,
}

impl Default for SpatialDatasetConfig {
    fn default() -> Self {
        SpatialDatasetConfig {
            count: FULL_SCALE_SPATIAL_COUNT,
            patch_size: SPATIAL_PATCH_SIZE,
            sigma_range: SigmaRange::training_default(),
            seed: 0,
            augment: AugmentConfig::default(),
        }
    }
}

fn check_corpus(corpus: &[Image], patch: usize) -> Result<()> {
    if corpus.is_empty() {
        return Err(Error::Data("empty image corpus".into()));
    }
    if patch == 0 || patch % 2 != 0 {
        return Err(Error::Data(format!("patch size must be even and positive, got {patch}")));
    }
    if let Some((i, img)) = corpus
        .iter()
        .enumerate()
        .find(|(_, img)| img.height() < patch || img.width() < patch)
    {
        return Err(Error::Data(format!(
            "corpus image {i} is {}x{}, smaller than the {patch}px patch",
            img.height(),
            img.width()
        )));
    }
    Ok(())
}

/// Sample number `index` of the spatial dataset.
pub fn spatial_sample(corpus: &[Image], config: &SpatialDatasetConfig, index: usize) -> Result<SpatialSample> {
    let patch = config.patch_size;
    let mut rng = stream_rng(config.seed, index as u64);
    let image = &corpus[rng.random_range(0..corpus.len())];
    let aug = Augmentation::draw(index % config.augment.modes(), &mut rng);
    let factor = effective_factor(&aug, &config.augment, image.height(), image.width(), patch)?;
    let (rh, rw) = rescaled_shape(image.height(), image.width(), factor);
    let top = rng.random_range(0..=rh - patch);
    let left = rng.random_range(0..=rw - patch);
    let clean = rescaled_crop(image, factor, top, left, patch, patch)?;
    let clean = aug.flip_image(&clean);
    let sigma = config.sigma_range.sample(&mut rng);
    let noisy = add_awgn(&clean, sigma, rng.random())?;
    Ok(SpatialSample {
        noisy,
        noise_map: constant_noise_map(sigma, patch, patch)?,
        clean,
        sigma,
    })
}

/// Exactly `config.count` spatial samples, in index order.
pub fn extract_spatial_samples(corpus: &[Image], config: &SpatialDatasetConfig) -> Result<Vec<SpatialSample>> {
    if config.count == 0 {
        return Ok(Vec::new());
    }
    check_corpus(corpus, config.patch_size)?;
    config.sigma_range.validated()?;
    (0..config.count)
        .into_par_iter()
        .map(|i| spatial_sample(corpus, config, i))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemporalDatasetConfig {
    pub count: usize,
    pub patch_size: usize,
    pub temporal_radius: usize,
    pub sigma_range: SigmaRange,
    pub seed: u64,
    pub augment: AugmentConfig,
}

impl Default for TemporalDatasetConfig {
    fn default() -> Self {
        TemporalDatasetConfig {
            count: FULL_SCALE_TEMPORAL_COUNT,
            patch_size: TEMPORAL_PATCH_SIZE,
            temporal_radius: crate::model::DEFAULT_TEMPORAL_RADIUS,
            sigma_range: SigmaRange::training_default(),
            seed: 0,
            augment: AugmentConfig::default(),
        }
    }
}

/// Valid center indices `T ..= n - 1 - T` of a sequence of length `n`.
pub fn center_range(len: usize, radius: usize) -> Result<std::ops::RangeInclusive<usize>> {
    if len < 2 * radius + 1 {
        return Err(Error::Data(format!(
            "sequence of {len} frames is shorter than the {}-frame window",
            2 * radius + 1
        )));
    }
    Ok(radius..=len - 1 - radius)
}

/// Sample number `index` of the temporal dataset: corrupt the full frames
/// of a window with one noise level, denoise each with the spatial block,
/// align the neighbors to the center at full resolution, then crop.
pub fn temporal_sample(
    sequences: &[FrameSequence],
    config: &TemporalDatasetConfig,
    spatial: &DenoiserParams,
    backend: &dyn FlowBackend,
    index: usize,
) -> Result<TemporalSample> {
    let patch = config.patch_size;
    let radius = config.temporal_radius;
    let mut rng = stream_rng(config.seed, index as u64);
    let seq = &sequences[rng.random_range(0..sequences.len())];
    let center = rng.random_range(center_range(seq.len(), radius)?);
    let aug = Augmentation::draw(index % config.augment.modes(), &mut rng);
    let (h, w, _) = seq.frame_shape();
    let factor = effective_factor(&aug, &config.augment, h, w, patch)?;
    let sigma = config.sigma_range.sample(&mut rng);

    let clean: Vec<Image> = seq.frames()[center - radius..=center + radius]
        .iter()
        .map(|f| if factor == 1.0 { Ok(f.clone()) } else { rescale(f, factor) })
        .collect::<Result<_>>()?;
    let denoised: Vec<Image> = clean
        .iter()
        .map(|f| {
            let noisy = add_awgn(f, sigma, rng.random())?;
            denoise_frame_spatial(&noisy, sigma, spatial)
        })
        .collect::<Result<_>>()?;
    let reference = &denoised[radius];
    let aligned: Vec<Image> = denoised
        .iter()
        .enumerate()
        .map(|(i, f)| {
            if i == radius {
                Ok(f.clone())
            } else {
                compensate(f, reference, backend)
            }
        })
        .collect::<Result<_>>()?;

    let (fh, fw, _) = clean[radius].shape();
    let top = rng.random_range(0..=fh - patch);
    let left = rng.random_range(0..=fw - patch);
    let sample = TemporalSample {
        window: aligned
            .iter()
            .map(|f| f.crop(top, left, patch, patch))
            .collect::<Result<_>>()?,
        noise_map: constant_noise_map(sigma, patch, patch)?,
        clean_center: clean[radius].crop(top, left, patch, patch)?,
        sigma,
    };
    Ok(sample.flipped(&aug))
}

/// Exactly `config.count` temporal samples, in index order.
pub fn build_temporal_samples(
    sequences: &[FrameSequence],
    config: &TemporalDatasetConfig,
    spatial: &DenoiserParams,
    backend: &dyn FlowBackend,
) -> Result<Vec<TemporalSample>> {
    spatial.ensure_kind(BlockKind::Spatial)?;
    spatial.ensure_mode(Mode::Eval)?;
    if config.count == 0 {
        return Ok(Vec::new());
    }
    if sequences.is_empty() {
        return Err(Error::Data("empty sequence corpus".into()));
    }
    config.sigma_range.validated()?;
    for (i, seq) in sequences.iter().enumerate() {
        center_range(seq.len(), config.temporal_radius)
            .map_err(|e| Error::Data(format!("sequence {i}: {e}")))?;
        let (h, w, _) = seq.frame_shape();
        if h < config.patch_size || w < config.patch_size {
            return Err(Error::Data(format!(
                "sequence {i} frames are {h}x{w}, smaller than the {}px patch",
                config.patch_size
            )));
        }
    }
    (0..config.count)
        .into_par_iter()
        .map(|i| temporal_sample(sequences, config, spatial, backend, i))
        .collect()
}

/// Directory of PNG images.
pub fn load_image_corpus(dir: &Path) -> Result<Vec<Image>> {
    read_image_dir(dir)
}

/// Directory whose sub-directories each hold one sequence of PNG frames.
pub fn load_sequence_corpus(dir: &Path) -> Result<Vec<FrameSequence>> {
    let dirs = list_subdirs(dir)?;
    if dirs.is_empty() {
        return Err(Error::Data(format!("no sequence directories in {}", dir.display())));
    }
    dirs.iter().map(|d| read_frame_dir(d)).collect()
}

/// Dataset description file (JSON).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub kind: BlockKind,
    /// Image directory (spatial) or directory of sequence directories (temporal).
    pub corpus: PathBuf,
    pub count: usize,
    /// Noise range on the 8-bit scale.
    pub sigma_range_8bit: [f64; 2],
    pub seed: u64,
    pub patch_size: usize,
    #[serde(default)]
    pub augment: AugmentConfig,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn spatial_config(&self) -> Result<SpatialDatasetConfig> {
        Ok(SpatialDatasetConfig {
            count: self.count,
            patch_size: self.patch_size,
            sigma_range: SigmaRange::from_8bit(self.sigma_range_8bit[0], self.sigma_range_8bit[1])?,
            seed: self.seed,
            augment: self.augment.clone(),
        })
    }

    pub fn temporal_config(&self, temporal_radius: usize) -> Result<TemporalDatasetConfig> {
        Ok(TemporalDatasetConfig {
            count: self.count,
            patch_size: self.patch_size,
            temporal_radius,
            sigma_range: SigmaRange::from_8bit(self.sigma_range_8bit[0], self.sigma_range_8bit[1])?,
            seed: self.seed,
            augment: self.augment.clone(),
        })
    }
}
