use super::{depth_to_space, space_to_depth, BlockKind, DenoiserParams};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::noise::{downsample_noise_map, NoiseMap};

/// Concatenate rearranged frames with the half-resolution noise map as the
/// last channel.
fn assemble(frames: &[&Image], map: &NoiseMap) -> Result<Image> {
    let quarter: Vec<Image> = frames.iter().map(|f| space_to_depth(f)).collect::<Result<_>>()?;
    let small = downsample_noise_map(map)?;
    let (h, w, _) = quarter[0].shape();
    let c: usize = quarter.iter().map(|q| q.channels()).sum::<usize>() + 1;
    let mut data = Vec::with_capacity(h * w * c);
    for p in 0..h * w {
        for q in &quarter {
            let qc = q.channels();
            data.extend_from_slice(&q.data()[p * qc..(p + 1) * qc]);
        }
        data.push(small.values()[p]);
    }
    Image::from_vec(h, w, c, data)
}

/// Network input of the spatial block: `(H/2) x (W/2) x 13`.
pub fn assemble_spatial_input(noisy: &Image, map: &NoiseMap) -> Result<Image> {
    map.ensure_matches(noisy)?;
    assemble(&[noisy], map)
}

/// Network input of the temporal block: `(H/2) x (W/2) x (12 * len + 1)`.
pub fn assemble_temporal_input(window: &[Image], map: &NoiseMap) -> Result<Image> {
    let first = window
        .first()
        .ok_or(Error::Arity { expected: 1, actual: 0 })?;
    for f in window {
        f.ensure_same_shape(first, "temporal window")?;
    }
    map.ensure_matches(first)?;
    let refs: Vec<&Image> = window.iter().collect();
    assemble(&refs, map)
}

/// `noisy - F_spa(noisy, map)`: the block predicts the noise, which the
/// residual connection removes.
pub fn spatial_forward(noisy: &Image, map: &NoiseMap, params: &DenoiserParams) -> Result<Image> {
    params.ensure_kind(BlockKind::Spatial)?;
    let input = assemble_spatial_input(noisy, map)?;
    let noise = depth_to_space(&params.infer_one(&input)?)?;
    let data = noisy.data().iter().zip(noise.data()).map(|(a, b)| a - b).collect();
    Image::from_vec(noisy.height(), noisy.width(), noisy.channels(), data)
}

/// `center + F_temp(window, map)` where `center` is the middle frame of the
/// aligned window.
pub fn temporal_forward(window: &[Image], map: &NoiseMap, params: &DenoiserParams) -> Result<Image> {
    params.ensure_kind(BlockKind::Temporal)?;
    let expected = params.config.window_len();
    if window.len() != expected {
        return Err(Error::Arity {
            expected,
            actual: window.len(),
        });
    }
    let input = assemble_temporal_input(window, map)?;
    let residual = depth_to_space(&params.infer_one(&input)?)?;
    let center = &window[expected / 2];
    let data = center.data().iter().zip(residual.data()).map(|(a, b)| a + b).collect();
    Image::from_vec(center.height(), center.width(), center.channels(), data)
}
