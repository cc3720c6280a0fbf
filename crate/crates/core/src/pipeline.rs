//! Sequence denoising: every frame is spatially denoised once, then each
//! output frame fuses its motion-compensated temporal window.

use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Instant;

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::load_checkpoint;
use crate::error::{Error, Result};
use crate::flow::{backend_from_id, compensate, FlowBackend};
use crate::image::{FrameSequence, Image};
use crate::model::{spatial_forward, temporal_forward, BlockKind, DenoiserParams, Mode};
use crate::noise::constant_noise_map;

/// Indices `t - T ..= t + T`, reflected at both ends (`-1 -> 1`, `n -> n - 2`).
pub fn temporal_window_indices(t: usize, radius: usize, len: usize) -> Result<Vec<usize>> {
    if t >= len {
        return Err(Error::Domain(format!("frame index {t} outside sequence of {len}")));
    }
    if len == 1 {
        return Ok(vec![0; 2 * radius + 1]);
    }
    let last = (len - 1) as i64;
    Ok((-(radius as i64)..=radius as i64)
        .map(|d| {
            let mut i = t as i64 + d;
            while i < 0 || i > last {
                i = if i < 0 { -i } else { 2 * last - i };
            }
            i as usize
        })
        .collect())
}

/// Reflect-pad the bottom row and right column when the height or width is
/// odd. Returns the padded frame and the original `(height, width)`.
pub fn pad_to_even(frame: &Image) -> (Image, (usize, usize)) {
    let (h, w, c) = frame.shape();
    let (ph, pw) = (h + h % 2, w + w % 2);
    if (ph, pw) == (h, w) {
        return (frame.clone(), (h, w));
    }
    let reflect = |i: usize, n: usize| if i < n { i } else { n.saturating_sub(2) };
    let padded = Image::from_fn(ph, pw, c, |y, x, ch| frame.get(reflect(y, h), reflect(x, w), ch));
    (padded, (h, w))
}

/// Inverse of [`pad_to_even`].
pub fn crop_to_shape(frame: &Image, shape: (usize, usize)) -> Result<Image> {
    if (frame.height(), frame.width()) == shape {
        return Ok(frame.clone());
    }
    frame.crop(0, 0, shape.0, shape.1)
}

/// Spatial block on a single frame of any size with a constant noise level.
pub fn denoise_frame_spatial(noisy: &Image, sigma: f64, params: &DenoiserParams) -> Result<Image> {
    let (padded, shape) = pad_to_even(noisy);
    let map = constant_noise_map(sigma, padded.height(), padded.width())?;
    crop_to_shape(&spatial_forward(&padded, &map, params)?, shape)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub temporal_radius: usize,
    /// Noise level on the `[0, 1]` scale.
    pub sigma: f64,
    pub flow_backend: String,
    pub spatial_checkpoint: PathBuf,
    pub temporal_checkpoint: PathBuf,
    /// Threads used for denoising; 0 uses the rayon default.
    pub workers: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            temporal_radius: crate::model::DEFAULT_TEMPORAL_RADIUS,
            sigma: 0.0,
            flow_backend: "blockmatch".into(),
            spatial_checkpoint: PathBuf::from("spatial.ckpt"),
            temporal_checkpoint: PathBuf::from("temporal.ckpt"),
            workers: 0,
        }
    }
}

/// Wall-clock seconds per stage. Stage 2 is split into alignment (flow and
/// warping) and temporal fusion, accumulated over frames.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub spatial: f64,
    pub flow: f64,
    pub temporal: f64,
    pub total: f64,
}

impl StageTimings {
    pub fn stage_sum(&self) -> f64 {
        self.spatial + self.flow + self.temporal
    }
}

#[derive(Clone, Debug)]
pub struct DenoiseOutput {
    pub sequence: FrameSequence,
    /// Spatial block evaluations performed during the run.
    pub spatial_passes: usize,
    pub timings: StageTimings,
}

/// Trained blocks plus the flow backend used to align windows.
#[derive(Clone)]
pub struct Denoiser {
    spatial: DenoiserParams,
    temporal: DenoiserParams,
    backend: Arc<dyn FlowBackend>,
}

impl Denoiser {
    pub fn new(spatial: DenoiserParams, temporal: DenoiserParams, backend: Arc<dyn FlowBackend>) -> Result<Self> {
        spatial.ensure_kind(BlockKind::Spatial)?;
        temporal.ensure_kind(BlockKind::Temporal)?;
        for p in [&spatial, &temporal] {
            if p.mode != Mode::Eval {
                return Err(Error::Config(format!("{:?} block is not in eval mode", p.kind())));
            }
            p.validate()?;
        }
        Ok(Denoiser {
            spatial,
            temporal,
            backend,
        })
    }

    /// Load both checkpoints and the flow backend named in `config`.
    pub fn from_config(config: &PipelineConfig) -> Result<Self> {
        let spatial = load_checkpoint(&config.spatial_checkpoint)?.params;
        let temporal = load_checkpoint(&config.temporal_checkpoint)?.params;
        if temporal.config.temporal_radius != config.temporal_radius {
            return Err(Error::Config(format!(
                "temporal checkpoint has T = {}, configuration asks for T = {}",
                temporal.config.temporal_radius, config.temporal_radius
            )));
        }
        Denoiser::new(spatial, temporal, backend_from_id(&config.flow_backend)?)
    }

    pub fn temporal_radius(&self) -> usize {
        self.temporal.config.temporal_radius
    }

    pub fn spatial(&self) -> &DenoiserParams {
        &self.spatial
    }

    pub fn temporal(&self) -> &DenoiserParams {
        &self.temporal
    }

    pub fn backend(&self) -> &dyn FlowBackend {
        self.backend.as_ref()
    }

    /// Denoise `seq` at noise level `sigma` (`[0, 1]` scale). Output frames
    /// are clipped to `[0, 1]`; results do not depend on `workers`.
    pub fn denoise(&self, seq: &FrameSequence, sigma: f64, workers: usize) -> Result<DenoiseOutput> {
        if !(sigma >= 0.0) || !sigma.is_finite() {
            return Err(Error::Domain(format!("noise level must be non-negative, got {sigma}")));
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| Error::Config(format!("cannot build worker pool: {e}")))?;
        pool.install(|| self.denoise_in_pool(seq, sigma))
    }

    fn denoise_in_pool(&self, seq: &FrameSequence, sigma: f64) -> Result<DenoiseOutput> {
        let start = Instant::now();
        let n = seq.len();
        let (padded, shape): (Vec<Image>, Vec<_>) = seq.frames().iter().map(pad_to_even).unzip();
        let shape = shape[0];
        let (ph, pw, _) = padded[0].shape();
        let map = constant_noise_map(sigma, ph, pw)?;

        let passes = AtomicUsize::new(0);
        let done = AtomicUsize::new(0);
        let stage1 = Instant::now();
        let denoised: Vec<Image> = padded
            .par_iter()
            .map(|f| {
                let out = spatial_forward(f, &map, &self.spatial);
                passes.fetch_add(1, Ordering::Relaxed);
                info!("spatial {}/{n}", done.fetch_add(1, Ordering::Relaxed) + 1);
                out
            })
            .collect::<Result<_>>()?;
        let spatial_secs = stage1.elapsed().as_secs_f64();

        let radius = self.temporal_radius();
        let done = AtomicUsize::new(0);
        let fused: Vec<(Image, f64, f64)> = (0..n)
            .into_par_iter()
            .map(|t| {
                let idx = temporal_window_indices(t, radius, n)?;
                let reference = &denoised[t];
                let align = Instant::now();
                let window: Vec<Image> = idx
                    .iter()
                    .enumerate()
                    .map(|(k, &j)| {
                        if k == radius {
                            Ok(reference.clone())
                        } else {
                            compensate(&denoised[j], reference, self.backend.as_ref())
                        }
                    })
                    .collect::<Result<_>>()?;
                let flow_secs = align.elapsed().as_secs_f64();
                let fuse = Instant::now();
                let out = temporal_forward(&window, &map, &self.temporal)?;
                let out = crop_to_shape(&out, shape)?.clamped(0.0, 1.0);
                let temporal_secs = fuse.elapsed().as_secs_f64();
                info!("temporal {}/{n}", done.fetch_add(1, Ordering::Relaxed) + 1);
                Ok((out, flow_secs, temporal_secs))
            })
            .collect::<Result<_>>()?;

        let mut timings = StageTimings {
            spatial: spatial_secs,
            ..Default::default()
        };
        let mut frames = Vec::with_capacity(n);
        for (frame, f, t) in fused {
            timings.flow += f;
            timings.temporal += t;
            frames.push(frame);
        }
        timings.total = start.elapsed().as_secs_f64();
        let mut sequence = FrameSequence::new(frames)?;
        sequence.frame_rate = seq.frame_rate;
        Ok(DenoiseOutput {
            sequence,
            spatial_passes: passes.into_inner(),
            timings,
        })
    }
}

/// Load the blocks named in `config` and denoise `seq`.
pub fn denoise_sequence(seq: &FrameSequence, config: &PipelineConfig) -> Result<FrameSequence> {
    if !(config.sigma >= 0.0) {
        return Err(Error::Domain(format!("noise level must be non-negative, got {}", config.sigma)));
    }
    let denoiser = Denoiser::from_config(config)?;
    Ok(denoiser.denoise(seq, config.sigma, config.workers)?.sequence)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint::save_checkpoint;
    use crate::flow::IdentityFlow;
    use crate::model::{fold_batchnorm, BlockConfig};
    use proptest::prelude::*;

    fn frame(h: usize, w: usize, salt: usize) -> Image {
        Image::from_fn(h, w, 3, |y, x, c| ((y * 5 + x * 11 + c * 7 + salt * 3) % 17) as f64 / 16.0)
    }

    fn identity_blocks() -> (DenoiserParams, DenoiserParams) {
        let mut s = DenoiserParams::init(BlockConfig::spatial().with_width(4).with_depth(3), 1).unwrap();
        s.zero_final_layer();
        let mut t = DenoiserParams::init(BlockConfig::temporal().with_width(4).with_depth(3), 2).unwrap();
        t.zero_final_layer();
        (fold_batchnorm(&s).unwrap(), fold_batchnorm(&t).unwrap())
    }

    fn random_blocks() -> (DenoiserParams, DenoiserParams) {
        let s = DenoiserParams::init(BlockConfig::spatial().with_width(4).with_depth(3), 3).unwrap();
        let t = DenoiserParams::init(BlockConfig::temporal().with_width(4).with_depth(3), 4).unwrap();
        (fold_batchnorm(&s).unwrap(), fold_batchnorm(&t).unwrap())
    }

    #[test]
    fn window_indices() {
        assert_eq!(temporal_window_indices(0, 2, 10).unwrap(), vec![2, 1, 0, 1, 2]);
        assert_eq!(temporal_window_indices(5, 2, 10).unwrap(), vec![3, 4, 5, 6, 7]);
        assert_eq!(temporal_window_indices(9, 2, 10).unwrap(), vec![7, 8, 9, 8, 7]);
        assert_eq!(temporal_window_indices(0, 2, 1).unwrap(), vec![0; 5]);
        assert_eq!(temporal_window_indices(1, 2, 2).unwrap(), vec![1, 0, 1, 0, 1]);
        assert!(matches!(temporal_window_indices(10, 2, 10), Err(Error::Domain(_))));
    }

    #[test]
    fn padding() {
        let even = Image::zeros(480, 854, 3);
        assert_eq!(pad_to_even(&even).0.shape(), (480, 854, 3));
        let odd = frame(481, 854, 0);
        let (p, shape) = pad_to_even(&odd);
        assert_eq!(p.shape(), (482, 854, 3));
        assert_eq!(crop_to_shape(&p, shape).unwrap(), odd);
        // reflected row excludes the edge
        assert_eq!(p.get(481, 3, 1), odd.get(479, 3, 1));
    }

    proptest! {
        #[test]
        fn pad_crop_round_trip(h in 1usize..9, w in 1usize..9, salt in 0usize..50) {
            let f = frame(h, w, salt);
            let (p, shape) = pad_to_even(&f);
            prop_assert_eq!(p.height() % 2, 0);
            prop_assert_eq!(p.width() % 2, 0);
            prop_assert_eq!(crop_to_shape(&p, shape).unwrap(), f);
        }
    }

    #[test]
    fn identity_models_reproduce_input() {
        let (s, t) = identity_blocks();
        let d = Denoiser::new(s, t, Arc::new(IdentityFlow)).unwrap();
        let seq = FrameSequence::new((0..4).map(|i| frame(9, 12, i)).collect()).unwrap();
        let out = d.denoise(&seq, 0.0, 1).unwrap();
        assert_eq!(out.sequence, seq);
        assert_eq!(out.spatial_passes, 4);
    }

    #[test]
    fn single_frame_sequence() {
        let (s, t) = random_blocks();
        let d = Denoiser::new(s, t, Arc::new(IdentityFlow)).unwrap();
        let seq = FrameSequence::new(vec![frame(8, 8, 0)]).unwrap();
        let out = d.denoise(&seq, 0.1, 1).unwrap();
        assert_eq!(out.sequence.len(), 1);
        assert!(out.sequence.frames()[0].data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn worker_count_does_not_change_output() {
        let (s, t) = random_blocks();
        let d = Denoiser::new(s, t, Arc::new(crate::flow::BlockMatchFlow::default())).unwrap();
        let seq = FrameSequence::new((0..5).map(|i| frame(16, 18, i)).collect()).unwrap();
        let a = d.denoise(&seq, 0.1, 1).unwrap();
        let b = d.denoise(&seq, 0.1, 3).unwrap();
        assert_eq!(a.sequence, b.sequence);
    }

    #[test]
    fn wrong_blocks_rejected() {
        let (s, t) = random_blocks();
        assert!(matches!(
            Denoiser::new(t.clone(), s.clone(), Arc::new(IdentityFlow)),
            Err(Error::Config(_))
        ));
        let train_mode = DenoiserParams::init(BlockConfig::spatial().with_width(4).with_depth(3), 3).unwrap();
        assert!(matches!(
            Denoiser::new(train_mode, t, Arc::new(IdentityFlow)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn config_loading_checks_radius() {
        let dir = tempfile::tempdir().unwrap();
        let (s, t) = random_blocks();
        let sp = dir.path().join("s.ckpt");
        let tp = dir.path().join("t.ckpt");
        save_checkpoint(&sp, &s, &Default::default()).unwrap();
        save_checkpoint(&tp, &t, &Default::default()).unwrap();
        let mut config = PipelineConfig {
            spatial_checkpoint: sp.clone(),
            temporal_checkpoint: tp.clone(),
            flow_backend: "identity".into(),
            sigma: 0.1,
            workers: 1,
            ..Default::default()
        };
        let seq = FrameSequence::new(vec![frame(8, 8, 0), frame(8, 8, 1)]).unwrap();
        assert_eq!(denoise_sequence(&seq, &config).unwrap().len(), 2);
        config.temporal_radius = 1;
        assert!(matches!(denoise_sequence(&seq, &config), Err(Error::Config(_))));
        config.temporal_radius = 2;
        config.temporal_checkpoint = sp;
        assert!(matches!(denoise_sequence(&seq, &config), Err(Error::Config(_))));
    }
}
