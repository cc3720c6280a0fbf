//! Block training: losses with analytic gradients, ADAM, learning-rate
//! schedule, the early orthogonalization phase and checkpointing.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::info;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::checkpoint::save_checkpoint;
use crate::data::{SigmaRange, SpatialSample, TemporalSample};
use crate::error::{Error, Result};
use crate::model::{
    assemble_spatial_input, assemble_temporal_input, depth_to_space, fold_batchnorm, orthogonalize_kernels,
    space_to_depth, BatchStats, BlockConfig, BlockKind, DenoiserParams, FeatureBatch, Gradients, Mode,
};
use crate::noise::sigma_to_8bit;
use crate::rng::stream_rng;

pub const DEFAULT_EPOCHS: usize = 80;
pub const DEFAULT_BATCH_SIZE: usize = 128;
pub const DEFAULT_ORTHOGONALIZE_UNTIL: usize = 60;
pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

const SHUFFLE_STREAM: u64 = 0x5348_5546;
const INIT_STREAM: u64 = 0x494e_4954;

/// Learning rate of the default 80-epoch schedule.
pub fn learning_rate(epoch: usize) -> Result<f64> {
    LrSchedule::default().rate(epoch)
}

/// Piecewise-constant learning rate: `steps[i] = (first_epoch, rate)`,
/// sorted, starting at epoch 0, valid below `end_epoch`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub steps: Vec<(usize, f64)>,
    pub end_epoch: usize,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule {
            steps: vec![(0, 1e-3), (50, 1e-4), (60, 1e-6)],
            end_epoch: DEFAULT_EPOCHS,
        }
    }
}

impl LrSchedule {
    pub fn constant(rate: f64, epochs: usize) -> Self {
        LrSchedule {
            steps: vec![(0, rate)],
            end_epoch: epochs,
        }
    }

    pub fn rate(&self, epoch: usize) -> Result<f64> {
        if epoch >= self.end_epoch {
            return Err(Error::Domain(format!(
                "epoch {epoch} outside schedule 0..{}",
                self.end_epoch
            )));
        }
        self.steps
            .iter()
            .rev()
            .find(|(start, _)| *start <= epoch)
            .map(|(_, r)| *r)
            .ok_or_else(|| Error::Config("learning-rate schedule does not start at epoch 0".into()))
    }

    fn validate(&self) -> Result<()> {
        let sorted = self.steps.windows(2).all(|w| w[0].0 < w[1].0);
        if self.steps.first().map(|s| s.0) != Some(0) || !sorted {
            return Err(Error::Config("learning-rate steps must start at epoch 0 and increase".into()));
        }
        if self.steps.iter().any(|(_, r)| !(*r > 0.0) || !r.is_finite()) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        Ok(())
    }
}

/// How a patch's squared error enters the loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossNorm {
    /// Sum of squared errors over the patch.
    #[default]
    Sum,
    /// Mean squared error over the patch.
    PerPixelMean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_schedule: LrSchedule,
    /// Kernels are orthogonalized after every step of epochs below this.
    pub orthogonalize_until_epoch: usize,
    /// Noise range of the training data, `[0, 1]` scale (recorded only).
    pub sigma_range: SigmaRange,
    pub seed: u64,
    pub loss_norm: LossNorm,
    /// Feature maps per hidden layer.
    pub width: usize,
    /// Overrides the default block depth.
    pub depth: Option<usize>,
    /// Start from a zeroed final layer, i.e. from the identity map. Useful
    /// for short runs without orthogonalization; the projection would
    /// otherwise restore the layer's scale on the first step.
    pub zero_final_layer: bool,
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: DEFAULT_EPOCHS,
            batch_size: DEFAULT_BATCH_SIZE,
            lr_schedule: LrSchedule::default(),
            orthogonalize_until_epoch: DEFAULT_ORTHOGONALIZE_UNTIL,
            sigma_range: SigmaRange::training_default(),
            seed: 0,
            loss_norm: LossNorm::Sum,
            width: crate::model::DEFAULT_WIDTH,
            depth: None,
            zero_final_layer: false,
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("at least one epoch is required".into()));
        }
        if self.lr_schedule.end_epoch < self.epochs {
            return Err(Error::Config(format!(
                "learning-rate schedule ends at epoch {} but training runs {} epochs",
                self.lr_schedule.end_epoch, self.epochs
            )));
        }
        self.lr_schedule.validate()
    }

    fn block(&self, base: BlockConfig) -> BlockConfig {
        let b = base.with_width(self.width);
        match self.depth {
            Some(d) => b.with_depth(d),
            None => b,
        }
    }
}

/// `sum / (2m)` over per-sample squared-error totals.
pub fn half_mean_loss(per_sample_sse: &[f64]) -> Result<f64> {
    if per_sample_sse.is_empty() {
        return Err(Error::Domain("loss of an empty batch".into()));
    }
    Ok(per_sample_sse.iter().sum::<f64>() / (2.0 * per_sample_sse.len() as f64))
}

/// Loss inputs and targets of one training sample.
pub trait TrainingSample: Sync {
    const KIND: BlockKind;

    /// Assembled network input at quarter resolution.
    fn network_input(&self) -> Result<crate::image::Image>;

    /// Frame the network output is added to (sign `+1`) or subtracted from
    /// (sign `-1`).
    fn residual_base(&self) -> &crate::image::Image;

    fn residual_sign() -> f64;

    fn target(&self) -> &crate::image::Image;
}

impl TrainingSample for SpatialSample {
    const KIND: BlockKind = BlockKind::Spatial;

    fn network_input(&self) -> Result<crate::image::Image> {
        assemble_spatial_input(&self.noisy, &self.noise_map)
    }

    fn residual_base(&self) -> &crate::image::Image {
        &self.noisy
    }

    fn residual_sign() -> f64 {
        -1.0
    }

    fn target(&self) -> &crate::image::Image {
        &self.clean
    }
}

impl TrainingSample for TemporalSample {
    const KIND: BlockKind = BlockKind::Temporal;

    fn network_input(&self) -> Result<crate::image::Image> {
        assemble_temporal_input(&self.window, &self.noise_map)
    }

    fn residual_base(&self) -> &crate::image::Image {
        &self.window[self.window.len() / 2]
    }

    fn residual_sign() -> f64 {
        1.0
    }

    fn target(&self) -> &crate::image::Image {
        &self.clean_center
    }
}

/// Loss value, parameter gradients and the BN batch statistics of one batch.
#[derive(Debug)]
pub struct LossAndGradients {
    pub loss: f64,
    pub gradients: Gradients,
    pub stats: BatchStats,
}

fn check_batch<S: TrainingSample>(batch: &[S], params: &DenoiserParams) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::Domain("loss of an empty batch".into()));
    }
    params.ensure_kind(S::KIND)?;
    params.ensure_mode(Mode::Train)
}

/// Training-mode predictions and their per-sample residuals `pred - target`
/// (in quarter-resolution channel layout alongside the output batch).
fn predict<S: TrainingSample>(
    batch: &[S],
    params: &DenoiserParams,
) -> Result<(Vec<Vec<f64>>, FeatureBatch, crate::model::TrainCache)> {
    let inputs: Vec<_> = batch.iter().map(|s| s.network_input()).collect::<Result<_>>()?;
    let (output, cache) = params.forward_train(FeatureBatch::from_images(&inputs)?)?;
    let outputs = output.to_images();
    let residuals = batch
        .iter()
        .zip(outputs)
        .map(|(s, out)| {
            let full = depth_to_space(&out)?;
            let base = s.residual_base();
            full.ensure_same_shape(s.target(), "prediction")?;
            Ok(base
                .data()
                .iter()
                .zip(full.data())
                .zip(s.target().data())
                .map(|((b, o), t)| b + S::residual_sign() * o - t)
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok((residuals, output, cache))
}

fn sample_weight(len: usize, norm: LossNorm) -> f64 {
    match norm {
        LossNorm::Sum => 1.0,
        LossNorm::PerPixelMean => 1.0 / len as f64,
    }
}

/// Batch loss `1/(2m) * sum_j ||pred_j - target_j||^2` with train-mode
/// (batch statistic) normalization.
pub fn batch_loss<S: TrainingSample>(batch: &[S], params: &DenoiserParams, norm: LossNorm) -> Result<f64> {
    check_batch(batch, params)?;
    let (residuals, _, _) = predict(batch, params)?;
    let sse: Vec<f64> = residuals
        .iter()
        .map(|r| sample_weight(r.len(), norm) * r.iter().map(|v| v * v).sum::<f64>())
        .collect();
    half_mean_loss(&sse)
}

pub fn spatial_loss(batch: &[SpatialSample], params: &DenoiserParams) -> Result<f64> {
    batch_loss(batch, params, LossNorm::Sum)
}

pub fn temporal_loss(batch: &[TemporalSample], params: &DenoiserParams) -> Result<f64> {
    batch_loss(batch, params, LossNorm::Sum)
}

pub fn loss_and_gradients<S: TrainingSample>(
    batch: &[S],
    params: &DenoiserParams,
    norm: LossNorm,
) -> Result<LossAndGradients> {
    check_batch(batch, params)?;
    let (residuals, output, cache) = predict(batch, params)?;
    let m = batch.len() as f64;
    let mut sse = Vec::with_capacity(batch.len());
    let mut grad = FeatureBatch::zeros(output.n, output.h, output.w, output.c);
    let per = grad.sample_len();
    for (i, (r, s)) in residuals.iter().zip(batch).enumerate() {
        let wgt = sample_weight(r.len(), norm);
        sse.push(wgt * r.iter().map(|v| v * v).sum::<f64>());
        // d loss / d pred = wgt * r / m; the output enters pred through
        // depth_to_space, whose adjoint is space_to_depth.
        let (h, w, c) = s.target().shape();
        let scaled: Vec<f64> = r.iter().map(|v| S::residual_sign() * wgt * v / m).collect();
        let g = space_to_depth(&crate::image::Image::from_vec(h, w, c, scaled)?)?;
        grad.data[i * per..(i + 1) * per].copy_from_slice(g.data());
    }
    let gradients = params.backward(&cache, &grad)?;
    Ok(LossAndGradients {
        loss: half_mean_loss(&sse)?,
        gradients,
        stats: cache.stats,
    })
}

/// ADAM with per-tensor first and second moment estimates.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    steps: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(sizes: &[usize]) -> Self {
        Adam {
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            epsilon: ADAM_EPSILON,
            steps: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn step(&mut self, params: Vec<&mut [f64]>, grads: Vec<&[f64]>, lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::State(format!(
                "optimizer tracks {} tensors, got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.steps += 1;
        let c1 = 1.0 - self.beta1.powi(self.steps as i32);
        let c2 = 1.0 - self.beta2.powi(self.steps as i32);
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}

/// Mutable training state of one block.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub params: DenoiserParams,
    pub epoch: usize,
    pub step: usize,
    pub optimizer: Adam,
    pub loss_history: Vec<f64>,
}

impl TrainState {
    pub fn new(params: DenoiserParams) -> Result<Self> {
        params.ensure_mode(Mode::Train)?;
        let optimizer = Adam::new(&params.trainable_sizes());
        Ok(TrainState {
            params,
            epoch: 0,
            step: 0,
            optimizer,
            loss_history: Vec::new(),
        })
    }

    /// One optimizer step on `batch`; returns the loss before the update.
    /// A non-finite loss or gradient leaves the state untouched.
    pub fn train_step<S: TrainingSample>(
        &mut self,
        batch: &[S],
        lr: f64,
        norm: LossNorm,
        orthogonalize: bool,
    ) -> Result<f64> {
        let lg = loss_and_gradients(batch, &self.params, norm)?;
        if !lg.loss.is_finite() || !lg.gradients.is_finite() {
            return Err(Error::Training {
                message: format!("loss diverged at step {} ({})", self.step, lg.loss),
                last_checkpoint: None,
            });
        }
        self.optimizer
            .step(self.params.trainable_mut(), lg.gradients.tensors(), lr)?;
        self.params.update_running_stats(&lg.stats);
        if orthogonalize {
            self.params = orthogonalize_kernels(&self.params)?;
        }
        self.step += 1;
        self.loss_history.push(lg.loss);
        Ok(lg.loss)
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Final parameters with batch normalization folded (eval mode).
    pub params: DenoiserParams,
    pub state: TrainState,
    pub metadata: Map<String, Value>,
}

#[derive(Serialize)]
struct LogRecord {
    step: usize,
    epoch: usize,
    lr: f64,
    loss: f64,
}

fn kind_name(kind: BlockKind) -> &'static str {
    match kind {
        BlockKind::Spatial => "spatial",
        BlockKind::Temporal => "temporal",
    }
}

fn base_metadata(config: &TrainConfig, block: &BlockConfig, dataset_len: usize) -> Map<String, Value> {
    let mut m = Map::new();
    m.insert("epochs".into(), json!(config.epochs));
    m.insert("batch_size".into(), json!(config.batch_size));
    m.insert("lr_schedule".into(), json!(config.lr_schedule));
    m.insert("orthogonalize_until_epoch".into(), json!(config.orthogonalize_until_epoch));
    m.insert(
        "sigma_range_8bit".into(),
        json!([sigma_to_8bit(config.sigma_range.min), sigma_to_8bit(config.sigma_range.max)]),
    );
    m.insert("seed".into(), json!(config.seed));
    m.insert("zero_final_layer".into(), json!(config.zero_final_layer));
    m.insert("loss_norm".into(), json!(config.loss_norm));
    m.insert("optimizer".into(), json!({"name": "adam", "beta1": ADAM_BETA1, "beta2": ADAM_BETA2, "epsilon": ADAM_EPSILON}));
    m.insert("dataset_size".into(), json!(dataset_len));
    m.insert("temporal_radius".into(), json!(block.temporal_radius));
    m.insert("window".into(), json!(block.window_len()));
    m
}

/// Full training run of a freshly initialized block.
pub fn train_block<S: TrainingSample>(
    dataset: &[S],
    config: &TrainConfig,
    block: BlockConfig,
    mut metadata: Map<String, Value>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::Data("training dataset is empty".into()));
    }
    let name = kind_name(S::KIND);
    let mut params = DenoiserParams::init(block, crate::rng::mix_seed(config.seed, INIT_STREAM))?;
    if config.zero_final_layer {
        params.zero_final_layer();
    }
    let mut state = TrainState::new(params)?;
    for (k, v) in base_metadata(config, &block, dataset.len()) {
        metadata.insert(k, v);
    }

    let mut log = match &config.checkpoint_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join(format!("{name}-train-log.jsonl"));
            Some(BufWriter::new(File::create(&path).map_err(|e| Error::io(&path, e))?))
        }
        None => None,
    };
    let mut last_checkpoint: Option<PathBuf> = None;
    let mut rng = stream_rng(config.seed, SHUFFLE_STREAM);
    let mut order: Vec<usize> = (0..dataset.len()).collect();

    for epoch in 0..config.epochs {
        state.epoch = epoch;
        let lr = config.lr_schedule.rate(epoch)?;
        let ortho = epoch < config.orthogonalize_until_epoch;
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&S> = chunk.iter().map(|&i| &dataset[i]).collect();
            let loss = match state.train_step(&batch, lr, config.loss_norm, ortho) {
                Err(Error::Training { message, .. }) => {
                    if let Some(w) = log.as_mut() {
                        let _ = w.flush();
                    }
                    return Err(Error::Training {
                        message,
                        last_checkpoint,
                    });
                }
                other => other?,
            };
            if let Some(w) = log.as_mut() {
                let rec = LogRecord {
                    step: state.step - 1,
                    epoch,
                    lr,
                    loss,
                };
                writeln!(w, "{}", serde_json::to_string(&rec)?).map_err(|e| Error::io("training log", e))?;
            }
            epoch_loss += loss;
            batches += 1;
        }
        info!("{name} epoch {epoch}: lr {lr:e}, mean loss {:.6}", epoch_loss / batches as f64);
        if let Some(dir) = &config.checkpoint_dir {
            let path = dir.join(format!("{name}-epoch{epoch:03}.ckpt"));
            let mut meta = metadata.clone();
            meta.insert("epoch".into(), json!(epoch));
            meta.insert("step".into(), json!(state.step));
            save_checkpoint(&path, &state.params, &meta)?;
            last_checkpoint = Some(path);
        }
        if let Some(w) = log.as_mut() {
            w.flush().map_err(|e| Error::io("training log", e))?;
        }
    }

    let params = fold_batchnorm(&state.params)?;
    metadata.insert("steps".into(), json!(state.step));
    metadata.insert("final_loss".into(), json!(state.loss_history.last()));
    if let Some(dir) = &config.checkpoint_dir {
        save_checkpoint(&dir.join(format!("{name}-final.ckpt")), &params, &metadata)?;
    }
    Ok(TrainOutcome {
        params,
        state,
        metadata,
    })
}

/// Mini-batches borrow from the dataset.
impl<S: TrainingSample> TrainingSample for &S {
    const KIND: BlockKind = S::KIND;

    fn network_input(&self) -> Result<crate::image::Image> {
        (*self).network_input()
    }

    fn residual_base(&self) -> &crate::image::Image {
        (*self).residual_base()
    }

    fn residual_sign() -> f64 {
        S::residual_sign()
    }

    fn target(&self) -> &crate::image::Image {
        (*self).target()
    }
}

pub fn train_spatial(dataset: &[SpatialSample], config: &TrainConfig) -> Result<TrainOutcome> {
    train_block(dataset, config, config.block(BlockConfig::spatial()), Map::new())
}

/// Trains the temporal block; its dataset must have been produced with the
/// given (trained, eval-mode) spatial block.
pub fn train_temporal(
    dataset: &[TemporalSample],
    spatial: Option<&DenoiserParams>,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    let spatial = spatial.ok_or_else(|| {
        Error::State("temporal training requires a trained spatial block".into())
    })?;
    spatial.ensure_kind(BlockKind::Spatial)?;
    spatial.ensure_mode(Mode::Eval)?;
    let mut block = config.block(BlockConfig::temporal());
    if let Some(s) = dataset.first() {
        block.temporal_radius = s.window.len() / 2;
    }
    let mut meta = Map::new();
    meta.insert(
        "spatial_block".into(),
        json!({"width": spatial.config.width, "depth": spatial.config.depth}),
    );
    train_block(dataset, config, block, meta)
}

/// Read the `(step, epoch, lr, loss)` records of a training log.
pub fn read_training_log(path: &Path) -> Result<Vec<(usize, usize, f64, f64)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let v: Value = serde_json::from_str(l)?;
            let field = |k: &str| v.get(k).ok_or_else(|| Error::Format(format!("log record lacks '{k}'")));
            Ok((
                field("step")?.as_u64().unwrap_or_default() as usize,
                field("epoch")?.as_u64().unwrap_or_default() as usize,
                field("lr")?.as_f64().unwrap_or(f64::NAN),
                field("loss")?.as_f64().unwrap_or(f64::NAN),
            ))
        })
        .collect()
}
