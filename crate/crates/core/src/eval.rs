//! PSNR metrics, the benchmark harness and inference timing.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{FrameSequence, Image};
use crate::noise::{add_awgn, sigma_from_8bit};
use crate::pipeline::{Denoiser, StageTimings};
use crate::rng::mix_seed;

/// Benchmark sequences are cut to this many frames.
pub const MAX_BENCHMARK_FRAMES: usize = 85;

/// Reported for a zero mean squared error.
pub const PSNR_INFINITE: f64 = f64::INFINITY;

/// Squared error summed over all samples and the sample count, with the
/// estimate clipped to `[0, peak]`.
fn squared_error(reference: &Image, estimate: &Image, peak: f64) -> Result<(f64, usize)> {
    reference.ensure_same_shape(estimate, "PSNR")?;
    let sse = reference
        .data()
        .iter()
        .zip(estimate.data())
        .map(|(r, e)| {
            let d = r - e.clamp(0.0, peak);
            d * d
        })
        .sum();
    Ok((sse, reference.data().len()))
}

pub fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse == 0.0 {
        PSNR_INFINITE
    } else {
        10.0 * (peak * peak / mse).log10()
    }
}

pub fn mse(reference: &Image, estimate: &Image) -> Result<f64> {
    let (sse, n) = squared_error(reference, estimate, 1.0)?;
    Ok(sse / n as f64)
}

pub fn psnr(reference: &Image, estimate: &Image, peak: f64) -> Result<f64> {
    let (sse, n) = squared_error(reference, estimate, peak)?;
    Ok(psnr_from_mse(sse / n as f64, peak))
}

/// Rule for turning per-frame errors into a sequence PSNR.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeqAggregation {
    /// PSNR of the MSE over all frames jointly.
    #[default]
    AggregateMse,
    /// Arithmetic mean of per-frame PSNRs.
    MeanOfFrames,
}

impl SeqAggregation {
    pub fn label(&self) -> &'static str {
        match self {
            SeqAggregation::AggregateMse => "PSNR of aggregate MSE",
            SeqAggregation::MeanOfFrames => "mean of per-frame PSNR",
        }
    }
}

pub fn psnr_seq(reference: &FrameSequence, estimate: &FrameSequence) -> Result<f64> {
    psnr_seq_with(reference, estimate, SeqAggregation::AggregateMse)
}

pub fn psnr_seq_with(reference: &FrameSequence, estimate: &FrameSequence, rule: SeqAggregation) -> Result<f64> {
    if reference.len() != estimate.len() {
        return Err(Error::Dimension(format!(
            "sequences of {} and {} frames",
            reference.len(),
            estimate.len()
        )));
    }
    let errors: Vec<(f64, usize)> = reference
        .frames()
        .iter()
        .zip(estimate.frames())
        .map(|(r, e)| squared_error(r, e, 1.0))
        .collect::<Result<_>>()?;
    Ok(match rule {
        SeqAggregation::AggregateMse => {
            let sse: f64 = errors.iter().map(|e| e.0).sum();
            let n: usize = errors.iter().map(|e| e.1).sum();
            psnr_from_mse(sse / n as f64, 1.0)
        }
        SeqAggregation::MeanOfFrames => {
            errors.iter().map(|(s, n)| psnr_from_mse(s / *n as f64, 1.0)).sum::<f64>() / errors.len() as f64
        }
    })
}

/// AWGN on every frame; frame `i` uses seed `mix_seed(seed, i)`.
pub fn corrupt_sequence(seq: &FrameSequence, sigma: f64, seed: u64) -> Result<FrameSequence> {
    let frames = seq
        .frames()
        .iter()
        .enumerate()
        .map(|(i, f)| add_awgn(f, sigma, mix_seed(seed, i as u64)))
        .collect::<Result<_>>()?;
    let mut out = FrameSequence::new(frames)?;
    out.frame_rate = seq.frame_rate;
    Ok(out)
}

/// Corruption seed of sequence `index` at `sigma_8bit`.
pub fn corruption_seed(base: u64, index: usize, sigma_8bit: f64) -> u64 {
    mix_seed(mix_seed(base, index as u64), sigma_8bit.to_bits())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkConfig {
    pub testset: String,
    /// Noise levels on the 8-bit scale.
    pub sigmas_8bit: Vec<f64>,
    pub max_frames: usize,
    pub seed: u64,
    pub aggregation: SeqAggregation,
    pub workers: usize,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            testset: "testset".into(),
            sigmas_8bit: vec![10.0, 20.0, 30.0, 40.0, 50.0],
            max_frames: MAX_BENCHMARK_FRAMES,
            seed: 0,
            aggregation: SeqAggregation::AggregateMse,
            workers: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceResult {
    pub name: String,
    pub frames: usize,
    pub noisy_psnr: f64,
    pub denoised_psnr: f64,
    pub seconds_per_frame: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SigmaRow {
    pub sigma_8bit: f64,
    pub sequences: Vec<SequenceResult>,
    pub mean_noisy_psnr: f64,
    pub mean_denoised_psnr: f64,
}

impl SigmaRow {
    pub fn new(sigma_8bit: f64, sequences: Vec<SequenceResult>) -> Self {
        let mean = |f: fn(&SequenceResult) -> f64| {
            sequences.iter().map(f).sum::<f64>() / sequences.len() as f64
        };
        SigmaRow {
            sigma_8bit,
            mean_noisy_psnr: mean(|s| s.noisy_psnr),
            mean_denoised_psnr: mean(|s| s.denoised_psnr),
            sequences,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub testset: String,
    pub aggregation: String,
    pub sequence_names: Vec<String>,
    pub rows: Vec<SigmaRow>,
    pub config: serde_json::Value,
}

fn fmt_db(v: f64) -> String {
    if v.is_infinite() {
        "inf".into()
    } else {
        format!("{v:.2}")
    }
}

impl BenchmarkReport {
    /// Plain-text table: one row per noise level, one column per sequence
    /// (denoised PSNR), then the testset means.
    pub fn to_table(&self) -> String {
        let mut headers: Vec<String> = vec!["sigma".into()];
        headers.extend(self.sequence_names.iter().cloned());
        headers.push("mean".into());
        headers.push("noisy mean".into());
        let mut rows: Vec<Vec<String>> = Vec::new();
        for row in &self.rows {
            let mut cells = vec![format!("{}", row.sigma_8bit)];
            cells.extend(row.sequences.iter().map(|s| fmt_db(s.denoised_psnr)));
            cells.push(fmt_db(row.mean_denoised_psnr));
            cells.push(fmt_db(row.mean_noisy_psnr));
            rows.push(cells);
        }
        let widths: Vec<usize> = (0..headers.len())
            .map(|i| {
                rows.iter()
                    .map(|r| r[i].len())
                    .chain([headers[i].len()])
                    .max()
                    .unwrap_or(0)
            })
            .collect();
        let line = |cells: &[String]| {
            cells
                .iter()
                .zip(&widths)
                .map(|(c, w)| format!("{c:>w$}"))
                .collect::<Vec<_>>()
                .join(" | ")
        };
        let mut out = String::new();
        let _ = writeln!(out, "PSNR (dB) on {} [{}]", self.testset, self.aggregation);
        let head = line(&headers);
        let _ = writeln!(out, "{head}");
        let _ = writeln!(out, "{}", "-".repeat(head.len()));
        for r in &rows {
            let _ = writeln!(out, "{}", line(r));
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Corrupt, denoise and score every sequence at every noise level. The
/// reference is the 8-bit quantized clean sequence.
pub fn run_benchmark(
    testset: &[(String, FrameSequence)],
    denoiser: &Denoiser,
    config: &BenchmarkConfig,
) -> Result<BenchmarkReport> {
    if testset.is_empty() {
        return Err(Error::Data("empty benchmark testset".into()));
    }
    let references: Vec<FrameSequence> = testset
        .iter()
        .map(|(_, seq)| {
            let cut = seq.truncated(config.max_frames);
            FrameSequence::new(cut.frames().iter().map(|f| f.quantized_8bit()).collect())
        })
        .collect::<Result<_>>()?;
    let mut rows = Vec::with_capacity(config.sigmas_8bit.len());
    for &sigma_8bit in &config.sigmas_8bit {
        let sigma = sigma_from_8bit(sigma_8bit);
        let mut results = Vec::with_capacity(testset.len());
        for (i, ((name, _), reference)) in testset.iter().zip(&references).enumerate() {
            let noisy = corrupt_sequence(reference, sigma, corruption_seed(config.seed, i, sigma_8bit))?;
            let start = Instant::now();
            let out = denoiser.denoise(&noisy, sigma, config.workers)?;
            let secs = start.elapsed().as_secs_f64();
            results.push(SequenceResult {
                name: name.clone(),
                frames: reference.len(),
                noisy_psnr: psnr_seq_with(reference, &noisy, config.aggregation)?,
                denoised_psnr: psnr_seq_with(reference, &out.sequence, config.aggregation)?,
                seconds_per_frame: secs / reference.len() as f64,
            });
        }
        rows.push(SigmaRow::new(sigma_8bit, results));
    }
    Ok(BenchmarkReport {
        testset: config.testset.clone(),
        aggregation: config.aggregation.label().into(),
        sequence_names: testset.iter().map(|(n, _)| n.clone()).collect(),
        rows,
        config: serde_json::to_value(config)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub seconds_per_frame: f64,
    /// Per-frame stage times.
    pub spatial: f64,
    pub flow: f64,
    pub temporal: f64,
    pub total: f64,
}

impl TimingReport {
    fn from_timings(t: &StageTimings, seq: &FrameSequence) -> Self {
        let n = seq.len() as f64;
        let (height, width, _) = seq.frame_shape();
        TimingReport {
            frames: seq.len(),
            height,
            width,
            seconds_per_frame: t.total / n,
            spatial: t.spatial / n,
            flow: t.flow / n,
            temporal: t.temporal / n,
            total: t.total / n,
        }
    }

    pub fn stage_sum(&self) -> f64 {
        self.spatial + self.flow + self.temporal
    }
}

/// Single-threaded wall-clock denoising time per frame of `seq` (already noisy).
pub fn time_inference(seq: &FrameSequence, denoiser: &Denoiser, sigma: f64) -> Result<TimingReport> {
    let out = denoiser.denoise(seq, sigma, 1)?;
    Ok(TimingReport::from_timings(&out.timings, seq))
}
