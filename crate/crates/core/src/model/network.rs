//! Forward and backward passes through a block's layer stack on batches of
//! quarter-resolution feature maps.

use rayon::prelude::*;

use super::conv::{conv_backward, conv_forward};
use super::{ConvLayer, DenoiserParams, NormState};
use crate::error::{Error, Result};
use crate::image::Image;

/// `n` feature maps of identical shape, stored sample-major, each `h x w x c`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBatch {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<f64>,
}

impl FeatureBatch {
    pub fn zeros(n: usize, h: usize, w: usize, c: usize) -> Self {
        FeatureBatch {
            n,
            h,
            w,
            c,
            data: vec![0.0; n * h * w * c],
        }
    }

    pub fn from_images(images: &[Image]) -> Result<Self> {
        let Some(first) = images.first() else {
            return Err(Error::Domain("empty batch".into()));
        };
        let (h, w, c) = first.shape();
        let mut data = Vec::with_capacity(images.len() * h * w * c);
        for img in images {
            if img.shape() != (h, w, c) {
                return Err(Error::Dimension(format!(
                    "batch member {:?} differs from {:?}",
                    img.shape(),
                    (h, w, c)
                )));
            }
            data.extend_from_slice(img.data());
        }
        Ok(FeatureBatch {
            n: images.len(),
            h,
            w,
            c,
            data,
        })
    }

    pub fn sample_len(&self) -> usize {
        self.h * self.w * self.c
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let len = self.sample_len();
        &self.data[i * len..(i + 1) * len]
    }

    pub fn to_images(&self) -> Vec<Image> {
        (0..self.n)
            .map(|i| {
                Image::from_vec(self.h, self.w, self.c, self.sample(i).to_vec())
                    .expect("batch sample shape")
            })
            .collect()
    }
}

/// Per-layer batch mean and (biased) variance observed during a training
/// forward pass; `None` for layers without batch normalization.
#[derive(Clone, Debug, Default)]
pub struct BatchStats {
    pub layers: Vec<Option<(Vec<f64>, Vec<f64>)>>,
    /// Number of values each statistic was computed over.
    pub count: usize,
}

/// Activations retained for the backward pass.
#[derive(Debug)]
pub struct TrainCache {
    /// Input of every layer; `inputs[l + 1]` is the post-activation output of layer `l`.
    inputs: Vec<FeatureBatch>,
    /// Normalized pre-activations and inverse std-devs for batch-normalized layers.
    normalized: Vec<Option<(Vec<f64>, Vec<f64>)>>,
    pub stats: BatchStats,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerGradients {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub gamma: Option<Vec<f64>>,
    pub beta: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGradients>,
}

impl Gradients {
    /// Same order as [`DenoiserParams::trainable_mut`].
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for l in &self.layers {
            out.push(&l.weight);
            out.push(&l.bias);
            if let (Some(g), Some(b)) = (&l.gamma, &l.beta) {
                out.push(g);
                out.push(b);
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

fn relu_inplace(values: &mut [f64]) {
    for v in values {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Apply a layer's normalization using fixed coefficients (folded affine, or
/// running statistics for train-mode parameters).
fn apply_fixed_norm(norm: &NormState, values: &mut [f64]) {
    let c = match norm {
        NormState::Batch { gamma, .. } => gamma.len(),
        NormState::Affine { scale, .. } => scale.len(),
    };
    match norm {
        NormState::Batch {
            gamma,
            beta,
            running_mean,
            running_var,
            eps,
            ..
        } => {
            for px in values.chunks_exact_mut(c) {
                for ch in 0..c {
                    px[ch] = gamma[ch] * (px[ch] - running_mean[ch]) / (running_var[ch] + eps).sqrt()
                        + beta[ch];
                }
            }
        }
        NormState::Affine { scale, shift } => {
            for px in values.chunks_exact_mut(c) {
                for ch in 0..c {
                    px[ch] = scale[ch] * px[ch] + shift[ch];
                }
            }
        }
    }
}

fn layer_infer(layer: &ConvLayer, input: &[f64], h: usize, w: usize, col: &mut Vec<f64>) -> Vec<f64> {
    let spec = &layer.spec;
    let mut out = vec![0.0; h * w * spec.out_channels];
    conv_forward(
        input,
        h,
        w,
        spec.in_channels,
        &layer.weight,
        &layer.bias,
        spec.out_channels,
        col,
        &mut out,
    );
    if let Some(norm) = &layer.norm {
        apply_fixed_norm(norm, &mut out);
    }
    if spec.has_activation {
        relu_inplace(&mut out);
    }
    out
}

impl DenoiserParams {
    fn check_input(&self, c: usize) -> Result<()> {
        let expected = self.layers[0].spec.in_channels;
        if c != expected {
            return Err(Error::Dimension(format!(
                "block expects {expected} input channels, got {c}"
            )));
        }
        Ok(())
    }

    /// Deterministic forward pass with fixed normalization: folded affine in
    /// eval mode, running statistics in train mode. Samples are independent.
    pub fn infer(&self, input: &FeatureBatch) -> Result<FeatureBatch> {
        self.check_input(input.c)?;
        let (h, w) = (input.h, input.w);
        let out_c = self.layers.last().expect("non-empty block").spec.out_channels;
        let samples: Vec<Vec<f64>> = (0..input.n)
            .into_par_iter()
            .map(|i| {
                let mut col = Vec::new();
                let mut x = input.sample(i).to_vec();
                for layer in &self.layers {
                    x = layer_infer(layer, &x, h, w, &mut col);
                }
                x
            })
            .collect();
        Ok(FeatureBatch {
            n: input.n,
            h,
            w,
            c: out_c,
            data: samples.concat(),
        })
    }

    pub fn infer_one(&self, input: &Image) -> Result<Image> {
        let batch = FeatureBatch::from_images(std::slice::from_ref(input))?;
        Ok(self.infer(&batch)?.to_images().remove(0))
    }

    /// Training forward pass: batch-normalized layers use the statistics of
    /// this batch (over all samples and positions).
    pub fn forward_train(&self, input: FeatureBatch) -> Result<(FeatureBatch, TrainCache)> {
        self.check_input(input.c)?;
        let (n, h, w) = (input.n, input.h, input.w);
        let m = n * h * w;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut normalized = Vec::with_capacity(self.layers.len());
        let mut stats = BatchStats {
            layers: Vec::with_capacity(self.layers.len()),
            count: m,
        };
        let mut x = input;
        for layer in &self.layers {
            let spec = &layer.spec;
            let cout = spec.out_channels;
            let mut z = FeatureBatch::zeros(n, h, w, cout);
            let in_len = x.sample_len();
            z.data
                .par_chunks_mut(h * w * cout)
                .zip(x.data.par_chunks(in_len))
                .for_each_init(Vec::new, |col, (out, inp)| {
                    conv_forward(
                        inp,
                        h,
                        w,
                        spec.in_channels,
                        &layer.weight,
                        &layer.bias,
                        cout,
                        col,
                        out,
                    )
                });

            match &layer.norm {
                Some(NormState::Batch {
                    gamma, beta, eps, ..
                }) => {
                    let mut mean = vec![0.0; cout];
                    for px in z.data.chunks_exact(cout) {
                        for (s, v) in mean.iter_mut().zip(px) {
                            *s += v;
                        }
                    }
                    mean.iter_mut().for_each(|s| *s /= m as f64);
                    let mut var = vec![0.0; cout];
                    for px in z.data.chunks_exact(cout) {
                        for ch in 0..cout {
                            let d = px[ch] - mean[ch];
                            var[ch] += d * d;
                        }
                    }
                    var.iter_mut().for_each(|s| *s /= m as f64);
                    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
                    let mut xhat = z.data;
                    for px in xhat.chunks_exact_mut(cout) {
                        for ch in 0..cout {
                            px[ch] = (px[ch] - mean[ch]) * inv_std[ch];
                        }
                    }
                    let mut y = xhat.clone();
                    for px in y.chunks_exact_mut(cout) {
                        for ch in 0..cout {
                            px[ch] = gamma[ch] * px[ch] + beta[ch];
                        }
                    }
                    z.data = y;
                    normalized.push(Some((xhat, inv_std)));
                    stats.layers.push(Some((mean, var)));
                }
                Some(norm @ NormState::Affine { .. }) => {
                    apply_fixed_norm(norm, &mut z.data);
                    normalized.push(None);
                    stats.layers.push(None);
                }
                None => {
                    normalized.push(None);
                    stats.layers.push(None);
                }
            }
            if spec.has_activation {
                relu_inplace(&mut z.data);
            }
            inputs.push(std::mem::replace(&mut x, z));
        }
        Ok((
            x,
            TrainCache {
                inputs,
                normalized,
                stats,
            },
        ))
    }

    /// Gradients of a scalar objective given its gradient w.r.t. the block output.
    pub fn backward(&self, cache: &TrainCache, grad_output: &FeatureBatch) -> Result<Gradients> {
        let depth = self.layers.len();
        let first = &cache.inputs[0];
        let (n, h, w) = (first.n, first.h, first.w);
        let out_c = self.layers[depth - 1].spec.out_channels;
        if (grad_output.n, grad_output.h, grad_output.w, grad_output.c) != (n, h, w, out_c) {
            return Err(Error::Dimension("output gradient shape mismatch".into()));
        }
        let m = (n * h * w) as f64;
        let mut grads: Vec<Option<LayerGradients>> = vec![None; depth];
        let mut g = grad_output.data.clone();

        for l in (0..depth).rev() {
            let layer = &self.layers[l];
            let spec = &layer.spec;
            let cout = spec.out_channels;
            let cin = spec.in_channels;

            if spec.has_activation {
                let activated = &cache.inputs[l + 1].data;
                for (gv, a) in g.iter_mut().zip(activated) {
                    if *a <= 0.0 {
                        *gv = 0.0;
                    }
                }
            }

            let (mut gamma_grad, mut beta_grad) = (None, None);
            match (&layer.norm, &cache.normalized[l]) {
                (Some(NormState::Batch { gamma, .. }), Some((xhat, inv_std))) => {
                    let mut dgamma = vec![0.0; cout];
                    let mut dbeta = vec![0.0; cout];
                    let mut sum_dxhat = vec![0.0; cout];
                    let mut sum_dxhat_xhat = vec![0.0; cout];
                    for (gp, xp) in g.chunks_exact(cout).zip(xhat.chunks_exact(cout)) {
                        for ch in 0..cout {
                            dgamma[ch] += gp[ch] * xp[ch];
                            dbeta[ch] += gp[ch];
                            let dx = gp[ch] * gamma[ch];
                            sum_dxhat[ch] += dx;
                            sum_dxhat_xhat[ch] += dx * xp[ch];
                        }
                    }
                    for (gp, xp) in g.chunks_exact_mut(cout).zip(xhat.chunks_exact(cout)) {
                        for ch in 0..cout {
                            let dx = gp[ch] * gamma[ch];
                            gp[ch] = inv_std[ch] / m
                                * (m * dx - sum_dxhat[ch] - xp[ch] * sum_dxhat_xhat[ch]);
                        }
                    }
                    gamma_grad = Some(dgamma);
                    beta_grad = Some(dbeta);
                }
                (Some(NormState::Affine { scale, .. }), _) => {
                    for gp in g.chunks_exact_mut(cout) {
                        for ch in 0..cout {
                            gp[ch] *= scale[ch];
                        }
                    }
                }
                (None, _) => {}
                (Some(NormState::Batch { .. }), None) => {
                    return Err(Error::State(format!("layer {l} has no cached normalization")));
                }
            }

            let input = &cache.inputs[l];
            let in_len = input.sample_len();
            let need_input_grad = l > 0;
            let per_sample: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = (0..n)
                .into_par_iter()
                .map_init(Vec::new, |col, i| {
                    let mut dw = vec![0.0; layer.weight.len()];
                    let mut db = vec![0.0; cout];
                    let mut dx = if need_input_grad { vec![0.0; in_len] } else { Vec::new() };
                    conv_backward(
                        input.sample(i),
                        h,
                        w,
                        cin,
                        &layer.weight,
                        cout,
                        &g[i * h * w * cout..(i + 1) * h * w * cout],
                        &mut dw,
                        &mut db,
                        need_input_grad.then_some(&mut dx[..]),
                        col,
                    );
                    (dw, db, dx)
                })
                .collect();

            let mut dw = vec![0.0; layer.weight.len()];
            let mut db = vec![0.0; cout];
            let mut dx = Vec::with_capacity(if need_input_grad { n * in_len } else { 0 });
            for (sw, sb, sx) in per_sample {
                dw.iter_mut().zip(&sw).for_each(|(a, b)| *a += b);
                db.iter_mut().zip(&sb).for_each(|(a, b)| *a += b);
                dx.extend_from_slice(&sx);
            }
            grads[l] = Some(LayerGradients {
                weight: dw,
                bias: db,
                gamma: gamma_grad,
                beta: beta_grad,
            });
            g = dx;
        }
        Ok(Gradients {
            layers: grads.into_iter().map(|g| g.expect("every layer visited")).collect(),
        })
    }

    /// Exponential moving average update of BN running statistics; the
    /// running variance uses the unbiased batch estimate.
    pub fn update_running_stats(&mut self, stats: &BatchStats) {
        let m = stats.count as f64;
        let unbias = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
        for (layer, s) in self.layers.iter_mut().zip(&stats.layers) {
            if let (
                Some(NormState::Batch {
                    running_mean,
                    running_var,
                    momentum,
                    ..
                }),
                Some((mean, var)),
            ) = (&mut layer.norm, s)
            {
                for ch in 0..mean.len() {
                    running_mean[ch] = (1.0 - *momentum) * running_mean[ch] + *momentum * mean[ch];
                    running_var[ch] =
                        (1.0 - *momentum) * running_var[ch] + *momentum * var[ch] * unbias;
                }
            }
        }
    }
}
