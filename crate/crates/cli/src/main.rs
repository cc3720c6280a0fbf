use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use vdenoise::checkpoint::{load_checkpoint, save_checkpoint};
use vdenoise::data::{
    build_temporal_samples, extract_spatial_samples, load_image_corpus, load_sequence_corpus, DatasetManifest,
};
use vdenoise::eval::{corrupt_sequence, run_benchmark, time_inference, BenchmarkConfig, SeqAggregation};
use vdenoise::flow::backend_from_id;
use vdenoise::io::{list_subdirs, read_frame_dir, write_frame_dir};
use vdenoise::model::BlockKind;
use vdenoise::noise::{sigma_from_8bit, sigma_to_8bit};
use vdenoise::pipeline::{Denoiser, PipelineConfig};
use vdenoise::train::{train_spatial, train_temporal, TrainConfig};
use vdenoise::Error;

const CHECKPOINT_DIR_ENV: &str = "VDENOISE_CHECKPOINT_DIR";
const MAX_SIGMA_8BIT: f64 = 75.0;
const TRAINED_SIGMA_8BIT: f64 = 55.0;

const EXIT_FAILURE: u8 = 1;
const EXIT_DATA: u8 = 3;
const EXIT_CONFIG: u8 = 4;
const EXIT_TRAINING: u8 = 5;

/// Two-stage video denoiser for additive white Gaussian noise.
#[derive(Parser, Debug)]
#[command(name = "vdenoise", version, about)]
struct Cli {
    /// JSON file overriding the resolved configuration; explicit flags win.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Denoise a directory of numbered PNG frames.
    Denoise(DenoiseArgs),
    /// Train the spatial block from a dataset manifest.
    TrainSpatial(TrainArgs),
    /// Train the temporal block; needs a trained spatial block.
    TrainTemporal(TrainTemporalArgs),
    /// Corrupt, denoise and score a testset of frame directories.
    Benchmark(BenchmarkArgs),
    /// Add white Gaussian noise to a directory of frames.
    AddNoise(AddNoiseArgs),
}

fn parse_sigma(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if !(0.0..=MAX_SIGMA_8BIT).contains(&v) {
        return Err(format!("sigma must lie in [0, {MAX_SIGMA_8BIT}] on the 8-bit scale"));
    }
    Ok(v)
}

#[derive(Args, Debug)]
struct ModelArgs {
    /// Spatial block checkpoint [default: $VDENOISE_CHECKPOINT_DIR/spatial.ckpt].
    #[arg(long)]
    spatial: Option<PathBuf>,
    /// Temporal block checkpoint [default: $VDENOISE_CHECKPOINT_DIR/temporal.ckpt].
    #[arg(long)]
    temporal: Option<PathBuf>,
    /// Temporal radius T; windows hold 2T + 1 frames [default: 2].
    #[arg(long = "temporal-radius")]
    temporal_radius: Option<usize>,
    /// Flow backend: identity, blockmatch or external:<program> [default: blockmatch].
    #[arg(long)]
    flow: Option<String>,
    /// Worker threads; 0 uses all cores [default: 0].
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args, Debug)]
struct DenoiseArgs {
    /// Input frame directory.
    #[arg(long = "in")]
    input: PathBuf,
    /// Output frame directory.
    #[arg(long = "out")]
    output: PathBuf,
    /// Noise standard deviation on the 8-bit scale.
    #[arg(long, value_parser = parse_sigma, allow_negative_numbers = true)]
    sigma: f64,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Dataset manifest (JSON).
    #[arg(long)]
    manifest: PathBuf,
    /// Output checkpoint [default: $VDENOISE_CHECKPOINT_DIR/<block>.ckpt].
    #[arg(long = "out")]
    output: Option<PathBuf>,
    /// Directory for per-epoch checkpoints and the training log.
    #[arg(long = "checkpoint-dir")]
    checkpoint_dir: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long = "batch-size")]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Feature maps per hidden layer.
    #[arg(long)]
    width: Option<usize>,
    /// Worker threads for dataset generation; 0 uses all cores.
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainTemporalArgs {
    #[command(flatten)]
    train: TrainArgs,
    /// Trained spatial block [default: $VDENOISE_CHECKPOINT_DIR/spatial.ckpt].
    #[arg(long)]
    spatial: Option<PathBuf>,
    /// Flow backend used to align training windows [default: blockmatch].
    #[arg(long)]
    flow: Option<String>,
    /// Temporal radius T [default: 2].
    #[arg(long = "temporal-radius")]
    temporal_radius: Option<usize>,
}

#[derive(Args, Debug)]
struct BenchmarkArgs {
    /// Directory holding one sub-directory of frames per sequence.
    #[arg(long)]
    testset: PathBuf,
    /// Comma-separated noise levels on the 8-bit scale.
    #[arg(long, value_parser = parse_sigma, value_delimiter = ',')]
    sigmas: Option<Vec<f64>>,
    /// Machine-readable report path.
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long = "max-frames")]
    max_frames: Option<usize>,
    /// Score sequences by the mean of per-frame PSNRs instead of the PSNR of
    /// the aggregate MSE.
    #[arg(long = "mean-of-frames")]
    mean_of_frames: bool,
    /// Also time single-threaded inference on the first sequence.
    #[arg(long)]
    timing: bool,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Args, Debug)]
struct AddNoiseArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long = "out")]
    output: PathBuf,
    /// Noise standard deviation on the 8-bit scale.
    #[arg(long, value_parser = parse_sigma, allow_negative_numbers = true)]
    sigma: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct DenoiseSettings {
    input: PathBuf,
    output: PathBuf,
    sigma_8bit: f64,
    pipeline: PipelineConfig,
}

#[derive(Debug, Serialize, Deserialize)]
struct TrainSettings {
    manifest: PathBuf,
    output: PathBuf,
    workers: usize,
    spatial: Option<PathBuf>,
    flow_backend: String,
    temporal_radius: usize,
    train: TrainConfig,
}

#[derive(Debug, Serialize, Deserialize)]
struct BenchmarkSettings {
    testset_dir: PathBuf,
    report: Option<PathBuf>,
    timing: bool,
    benchmark: BenchmarkConfig,
    pipeline: PipelineConfig,
}

#[derive(Debug, Serialize, Deserialize)]
struct AddNoiseSettings {
    input: PathBuf,
    output: PathBuf,
    sigma_8bit: f64,
    seed: u64,
}

fn default_checkpoint(name: &str) -> PathBuf {
    let dir = std::env::var_os(CHECKPOINT_DIR_ENV).map(PathBuf::from).unwrap_or_default();
    dir.join(format!("{name}.ckpt"))
}

/// Recursively merge `patch` into `base`; objects merge, everything else
/// is replaced.
fn overlay(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => overlay(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, p) => *slot = p,
    }
}

/// Apply the `--config` file on top of `defaults`.
fn with_config_file<T: Serialize + DeserializeOwned>(defaults: T, file: Option<&Path>) -> Result<T, Error> {
    let Some(path) = file else {
        return Ok(defaults);
    };
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let patch: Value =
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let mut base = serde_json::to_value(defaults)?;
    overlay(&mut base, patch);
    serde_json::from_value(base).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn print_config<T: Serialize>(command: &str, settings: &T) -> Result<(), Error> {
    eprintln!("{command} configuration:\n{}", serde_json::to_string_pretty(settings)?);
    Ok(())
}

fn warn_sigma(sigma_8bit: f64) {
    if sigma_8bit > TRAINED_SIGMA_8BIT {
        warn!("sigma {sigma_8bit} exceeds the trained range [0, {TRAINED_SIGMA_8BIT}]");
    }
}

fn resolve_pipeline(mut p: PipelineConfig, m: &ModelArgs) -> PipelineConfig {
    if let Some(v) = &m.spatial {
        p.spatial_checkpoint = v.clone();
    }
    if let Some(v) = &m.temporal {
        p.temporal_checkpoint = v.clone();
    }
    if let Some(v) = m.temporal_radius {
        p.temporal_radius = v;
    }
    if let Some(v) = &m.flow {
        p.flow_backend = v.clone();
    }
    if let Some(v) = m.workers {
        p.workers = v;
    }
    p
}

fn default_pipeline() -> PipelineConfig {
    PipelineConfig {
        spatial_checkpoint: default_checkpoint("spatial"),
        temporal_checkpoint: default_checkpoint("temporal"),
        ..Default::default()
    }
}

fn denoise(args: DenoiseArgs, config: Option<&Path>) -> Result<(), Error> {
    let defaults = DenoiseSettings {
        input: args.input.clone(),
        output: args.output.clone(),
        sigma_8bit: args.sigma,
        pipeline: default_pipeline(),
    };
    let mut s = with_config_file(defaults, config)?;
    s.input = args.input;
    s.output = args.output;
    s.sigma_8bit = args.sigma;
    s.pipeline = resolve_pipeline(s.pipeline, &args.model);
    s.pipeline.sigma = sigma_from_8bit(s.sigma_8bit);
    print_config("denoise", &s)?;
    warn_sigma(s.sigma_8bit);

    let seq = read_frame_dir(&s.input)?;
    let denoiser = Denoiser::from_config(&s.pipeline)?;
    let out = denoiser.denoise(&seq, s.pipeline.sigma, s.pipeline.workers)?;
    write_frame_dir(&s.output, &out.sequence)?;
    info!(
        "denoised {} frames in {:.2}s (spatial {:.2}s, flow {:.2}s, temporal {:.2}s)",
        out.sequence.len(),
        out.timings.total,
        out.timings.spatial,
        out.timings.flow,
        out.timings.temporal
    );
    Ok(())
}

fn resolve_train(args: &TrainArgs, block: &str, config: Option<&Path>) -> Result<TrainSettings, Error> {
    let defaults = TrainSettings {
        manifest: args.manifest.clone(),
        output: default_checkpoint(block),
        workers: 0,
        spatial: None,
        flow_backend: "blockmatch".into(),
        temporal_radius: vdenoise::model::DEFAULT_TEMPORAL_RADIUS,
        train: TrainConfig::default(),
    };
    let mut s = with_config_file(defaults, config)?;
    s.manifest = args.manifest.clone();
    if let Some(v) = &args.output {
        s.output = v.clone();
    }
    if let Some(v) = &args.checkpoint_dir {
        s.train.checkpoint_dir = Some(v.clone());
    }
    if let Some(v) = args.epochs {
        s.train.epochs = v;
    }
    if let Some(v) = args.batch_size {
        s.train.batch_size = v;
    }
    if let Some(v) = args.seed {
        s.train.seed = v;
    }
    if let Some(v) = args.width {
        s.train.width = v;
    }
    if let Some(v) = args.workers {
        s.workers = v;
    }
    Ok(s)
}

fn load_manifest(path: &Path, kind: BlockKind) -> Result<DatasetManifest, Error> {
    let manifest = DatasetManifest::load(path)?;
    if manifest.kind != kind {
        return Err(Error::Config(format!(
            "manifest {} describes a {:?} dataset, {kind:?} expected",
            path.display(),
            manifest.kind
        )));
    }
    Ok(manifest)
}

fn in_pool<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T, Error> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot build worker pool: {e}")))?;
    Ok(pool.install(f))
}

fn train_spatial_cmd(args: TrainArgs, config: Option<&Path>) -> Result<(), Error> {
    let mut s = resolve_train(&args, "spatial", config)?;
    let manifest = load_manifest(&s.manifest, BlockKind::Spatial)?;
    let data_config = manifest.spatial_config()?;
    s.train.sigma_range = data_config.sigma_range;
    print_config("train-spatial", &serde_json::json!({"settings": &s, "manifest": &manifest}))?;

    let corpus = load_image_corpus(&manifest.corpus)?;
    let samples = in_pool(s.workers, || extract_spatial_samples(&corpus, &data_config))??;
    info!("generated {} spatial samples", samples.len());
    let outcome = train_spatial(&samples, &s.train)?;
    save_checkpoint(&s.output, &outcome.params, &outcome.metadata)?;
    info!("wrote {}", s.output.display());
    Ok(())
}

fn train_temporal_cmd(args: TrainTemporalArgs, config: Option<&Path>) -> Result<(), Error> {
    let mut s = resolve_train(&args.train, "temporal", config)?;
    if let Some(v) = &args.spatial {
        s.spatial = Some(v.clone());
    }
    if s.spatial.is_none() {
        s.spatial = Some(default_checkpoint("spatial"));
    }
    if let Some(v) = &args.flow {
        s.flow_backend = v.clone();
    }
    if let Some(v) = args.temporal_radius {
        s.temporal_radius = v;
    }
    let manifest = load_manifest(&s.manifest, BlockKind::Temporal)?;
    let data_config = manifest.temporal_config(s.temporal_radius)?;
    s.train.sigma_range = data_config.sigma_range;
    print_config("train-temporal", &serde_json::json!({"settings": &s, "manifest": &manifest}))?;

    let spatial_path = s.spatial.clone().unwrap_or_default();
    let spatial = load_checkpoint(&spatial_path)?.params;
    let backend = backend_from_id(&s.flow_backend)?;
    let sequences = load_sequence_corpus(&manifest.corpus)?;
    let samples = in_pool(s.workers, || {
        build_temporal_samples(&sequences, &data_config, &spatial, backend.as_ref())
    })??;
    info!("generated {} temporal samples", samples.len());
    let outcome = train_temporal(&samples, Some(&spatial), &s.train)?;
    save_checkpoint(&s.output, &outcome.params, &outcome.metadata)?;
    info!("wrote {}", s.output.display());
    Ok(())
}

fn benchmark_cmd(args: BenchmarkArgs, config: Option<&Path>) -> Result<(), Error> {
    let defaults = BenchmarkSettings {
        testset_dir: args.testset.clone(),
        report: None,
        timing: false,
        benchmark: BenchmarkConfig::default(),
        pipeline: default_pipeline(),
    };
    let mut s = with_config_file(defaults, config)?;
    s.testset_dir = args.testset.clone();
    if let Some(v) = &args.report {
        s.report = Some(v.clone());
    }
    s.timing |= args.timing;
    if let Some(v) = &args.sigmas {
        s.benchmark.sigmas_8bit = v.clone();
    }
    if let Some(v) = args.seed {
        s.benchmark.seed = v;
    }
    if let Some(v) = args.max_frames {
        s.benchmark.max_frames = v;
    }
    if args.mean_of_frames {
        s.benchmark.aggregation = SeqAggregation::MeanOfFrames;
    }
    s.pipeline = resolve_pipeline(s.pipeline, &args.model);
    s.benchmark.workers = s.pipeline.workers;
    if let Some(name) = s.testset_dir.file_name() {
        s.benchmark.testset = name.to_string_lossy().into_owned();
    }
    print_config("benchmark", &s)?;
    s.benchmark.sigmas_8bit.iter().for_each(|v| warn_sigma(*v));

    let testset: Vec<(String, _)> = list_subdirs(&s.testset_dir)?
        .into_iter()
        .map(|d| {
            let name = d.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            read_frame_dir(&d).map(|seq| (name, seq))
        })
        .collect::<Result<_, _>>()?;
    let denoiser = Denoiser::from_config(&s.pipeline)?;
    let report = run_benchmark(&testset, &denoiser, &s.benchmark)?;
    print!("{}", report.to_table());
    if let Some(path) = &s.report {
        std::fs::write(path, report.to_json()?).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    }
    if s.timing {
        let sigma_8bit = s.benchmark.sigmas_8bit.first().copied().unwrap_or(25.0);
        let sigma = sigma_from_8bit(sigma_8bit);
        let (name, clean) = &testset[0];
        let noisy = corrupt_sequence(&clean.truncated(s.benchmark.max_frames), sigma, s.benchmark.seed)?;
        let t = time_inference(&noisy, &denoiser, sigma)?;
        println!(
            "timing {name} ({}x{}, sigma {}): {:.3} s/frame = spatial {:.3} + flow/warp {:.3} + temporal {:.3}",
            t.height,
            t.width,
            sigma_to_8bit(sigma),
            t.total,
            t.spatial,
            t.flow,
            t.temporal
        );
    }
    Ok(())
}

fn add_noise_cmd(args: AddNoiseArgs, config: Option<&Path>) -> Result<(), Error> {
    let defaults = AddNoiseSettings {
        input: args.input.clone(),
        output: args.output.clone(),
        sigma_8bit: args.sigma,
        seed: args.seed,
    };
    let mut s = with_config_file(defaults, config)?;
    s.input = args.input;
    s.output = args.output;
    s.sigma_8bit = args.sigma;
    s.seed = args.seed;
    print_config("add-noise", &s)?;
    let seq = read_frame_dir(&s.input)?;
    let noisy = corrupt_sequence(&seq, sigma_from_8bit(s.sigma_8bit), s.seed)?;
    write_frame_dir(&s.output, &noisy)?;
    Ok(())
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Data(_) | Error::Dimension(_) | Error::Arity { .. } | Error::Io { .. } | Error::Image { .. } => {
            EXIT_DATA
        }
        Error::Config(_) | Error::Format(_) | Error::Json(_) | Error::State(_) => EXIT_CONFIG,
        Error::Training { .. } => EXIT_TRAINING,
        _ => EXIT_FAILURE,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let config = cli.config.as_deref();
    let result = match cli.command {
        Command::Denoise(a) => denoise(a, config),
        Command::TrainSpatial(a) => train_spatial_cmd(a, config),
        Command::TrainTemporal(a) => train_temporal_cmd(a, config),
        Command::Benchmark(a) => benchmark_cmd(a, config),
        Command::AddNoise(a) => add_noise_cmd(a, config),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if let Error::Training {
                last_checkpoint: Some(p),
                ..
            } = &e
            {
                eprintln!("last good checkpoint: {}", p.display());
            }
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn sigma_parsing() {
        assert_eq!(parse_sigma("25").unwrap(), 25.0);
        assert!(parse_sigma("-5").is_err());
        assert!(parse_sigma("75.5").is_err());
        assert!(parse_sigma("abc").is_err());
    }

    #[test]
    fn overlay_merges_objects() {
        let mut base = json!({"a": 1, "b": {"c": 2, "d": 3}});
        overlay(&mut base, json!({"b": {"d": 4}, "e": 5}));
        assert_eq!(base, json!({"a": 1, "b": {"c": 2, "d": 4}, "e": 5}));
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::Data("x".into())), EXIT_DATA);
        assert_eq!(exit_code(&Error::Config("x".into())), EXIT_CONFIG);
        assert_eq!(
            exit_code(&Error::Training {
                message: "x".into(),
                last_checkpoint: None
            }),
            EXIT_TRAINING
        );
        assert_eq!(exit_code(&Error::Flow("x".into())), EXIT_FAILURE);
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
