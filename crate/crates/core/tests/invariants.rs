//! Cross-module properties exercised through the public API.

mod common;

use std::sync::Arc;

use proptest::prelude::*;
use rand::Rng;
use serde_json::Map;

use vdenoise::checkpoint::encode;
use vdenoise::data::{
    build_temporal_samples, extract_spatial_samples, AugmentConfig, SigmaRange, SpatialDatasetConfig,
    TemporalDatasetConfig,
};
use vdenoise::eval::{psnr, psnr_seq};
use vdenoise::flow::{compensate, warp, BlockMatchFlow, FlowField, IdentityFlow};
use vdenoise::image::{FrameSequence, Image};
use vdenoise::model::{fold_batchnorm, spatial_forward, temporal_forward, BlockConfig, DenoiserParams};
use vdenoise::noise::{add_awgn, constant_noise_map, downsample_noise_map, sigma_from_8bit};
use vdenoise::pipeline::Denoiser;
use vdenoise::rng::stream_rng;
use vdenoise::train::{batch_loss, train_spatial, LossNorm, LrSchedule, TrainConfig};
use vdenoise::data::SpatialSample;

fn random_image(h: usize, w: usize, c: usize, seed: u64) -> Image {
    let mut rng = stream_rng(seed, 3);
    Image::from_fn(h, w, c, |_, _, _| rng.random::<f64>())
}

fn small(config: BlockConfig, seed: u64) -> DenoiserParams {
    DenoiserParams::init(config.with_width(6).with_depth(4), seed).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn blocks_preserve_shape_and_are_deterministic(hh in 1usize..8, hw in 1usize..8, seed in 0u64..1000) {
        let (h, w) = (2 * hh, 2 * hw);
        let map = constant_noise_map(0.1, h, w).unwrap();
        let sp = fold_batchnorm(&small(BlockConfig::spatial(), seed)).unwrap();
        let x = random_image(h, w, 3, seed);
        let a = spatial_forward(&x, &map, &sp).unwrap();
        prop_assert_eq!(a.shape(), (h, w, 3));
        prop_assert_eq!(&a, &spatial_forward(&x, &map, &sp).unwrap());

        let tp = fold_batchnorm(&small(BlockConfig::temporal(), seed + 1)).unwrap();
        let window: Vec<Image> = (0..5).map(|i| random_image(h, w, 3, seed * 7 + i)).collect();
        let b = temporal_forward(&window, &map, &tp).unwrap();
        prop_assert_eq!(b.shape(), (h, w, 3));
        prop_assert_eq!(&b, &temporal_forward(&window, &map, &tp).unwrap());
    }

    #[test]
    fn warp_is_linear(seed in 0u64..1000, a in -2.0f64..2.0, b in -2.0f64..2.0) {
        let (h, w) = (9, 11);
        let mut rng = stream_rng(seed, 9);
        let u: Vec<f64> = (0..h * w).map(|_| rng.random_range(-4.0..4.0)).collect();
        let v: Vec<f64> = (0..h * w).map(|_| rng.random_range(-4.0..4.0)).collect();
        let flow = FlowField::from_components(h, w, u, v).unwrap();
        let x = random_image(h, w, 3, seed);
        let y = random_image(h, w, 3, seed + 1);
        let combo = Image::from_fn(h, w, 3, |r, c, k| a * x.get(r, c, k) + b * y.get(r, c, k));
        let lhs = warp(&combo, &flow).unwrap();
        let (wx, wy) = (warp(&x, &flow).unwrap(), warp(&y, &flow).unwrap());
        for ((l, p), q) in lhs.data().iter().zip(wx.data()).zip(wy.data()) {
            prop_assert!((l - (a * p + b * q)).abs() < 1e-12);
        }
    }

    #[test]
    fn compensation_keeps_shape(h in 12usize..30, w in 12usize..30, seed in 0u64..100) {
        let r = random_image(h, w, 3, seed);
        let n = random_image(h, w, 3, seed + 1);
        prop_assert_eq!(compensate(&n, &r, &BlockMatchFlow::default()).unwrap().shape(), (h, w, 3));
    }

    #[test]
    fn constant_map_downsampling_is_lossless(hh in 1usize..10, hw in 1usize..10, s in 0.0f64..0.3) {
        let map = constant_noise_map(s, 2 * hh, 2 * hw).unwrap();
        let d = downsample_noise_map(&map).unwrap();
        prop_assert_eq!((d.height(), d.width()), (hh, hw));
        prop_assert!(d.values().iter().all(|&v| v == s));
    }

    #[test]
    fn awgn_is_reproducible(seed in any::<u64>(), s in 0.0f64..0.3) {
        let clean = random_image(6, 7, 3, 1);
        prop_assert_eq!(add_awgn(&clean, s, seed).unwrap(), add_awgn(&clean, s, seed).unwrap());
    }

    #[test]
    fn loss_is_zero_only_at_the_target(seed in 0u64..500, offset in prop_oneof![Just(0.0), 1e-6f64..1e-2]) {
        // With a zeroed final layer the block returns its input, so the loss
        // is the squared gap between the input and the target.
        let mut p = small(BlockConfig::spatial(), seed);
        p.zero_final_layer();
        let clean = random_image(4, 4, 3, seed);
        let noisy = Image::from_fn(4, 4, 3, |y, x, c| clean.get(y, x, c) + offset);
        let sample = SpatialSample {
            noisy,
            noise_map: constant_noise_map(0.1, 4, 4).unwrap(),
            clean,
            sigma: 0.1,
        };
        let loss = batch_loss(&[sample], &p, LossNorm::Sum).unwrap();
        prop_assert_eq!(loss == 0.0, offset == 0.0);
    }

    #[test]
    fn psnr_is_symmetric_and_monotone(seed in 0u64..500, a in 0.01f64..0.2) {
        let x = random_image(8, 8, 3, seed);
        let y = random_image(8, 8, 3, seed + 1);
        prop_assert_eq!(psnr(&x, &y, 1.0).unwrap(), psnr(&y, &x, 1.0).unwrap());
        let base = Image::filled(8, 8, 3, 0.5);
        let mut rng = stream_rng(seed, 4);
        let pattern: Vec<f64> = (0..base.data().len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let noisy = |amp: f64| Image::from_vec(8, 8, 3, pattern.iter().map(|p| 0.5 + amp * p).collect()).unwrap();
        prop_assert!(psnr(&base, &noisy(a), 1.0).unwrap() > psnr(&base, &noisy(a * 1.5), 1.0).unwrap());
        let one = |i: &Image| FrameSequence::new(vec![i.clone()]).unwrap();
        prop_assert_eq!(psnr_seq(&one(&x), &one(&y)).unwrap(), psnr(&x, &y, 1.0).unwrap());
    }
}

#[test]
fn noise_is_zero_mean() {
    let sigma = sigma_from_8bit(30.0);
    let clean = Image::filled(600, 600, 3, 0.5);
    let noisy = add_awgn(&clean, sigma, 77).unwrap();
    let n = noisy.data().len() as f64;
    let mean = noisy.data().iter().map(|v| v - 0.5).sum::<f64>() / n;
    assert!(mean.abs() <= 3.0 * sigma / n.sqrt(), "mean {mean}");
}

#[test]
fn datasets_are_reproducible_and_maps_match_sigma() {
    let corpus: Vec<Image> = (0..3).map(|i| common::still(i, 40, 40)).collect();
    let config = SpatialDatasetConfig {
        count: 20,
        patch_size: 16,
        seed: 5,
        ..Default::default()
    };
    let a = extract_spatial_samples(&corpus, &config).unwrap();
    assert_eq!(a, extract_spatial_samples(&corpus, &config).unwrap());
    for s in &a {
        assert!(s.noise_map.values().iter().all(|&v| v == s.sigma));
        assert!(s.sigma >= 0.0 && s.sigma <= sigma_from_8bit(55.0));
    }
}

#[test]
fn static_window_patches_are_colocated() {
    let frame = common::still(11, 40, 40);
    let sequences = vec![FrameSequence::new(vec![frame; 7]).unwrap()];
    let mut identity = small(BlockConfig::spatial(), 12);
    identity.zero_final_layer();
    let identity = fold_batchnorm(&identity).unwrap();
    let config = TemporalDatasetConfig {
        count: 6,
        patch_size: 16,
        sigma_range: SigmaRange::from_8bit(0.0, 0.0).unwrap(),
        seed: 13,
        augment: AugmentConfig::default(),
        ..Default::default()
    };
    for s in build_temporal_samples(&sequences, &config, &identity, &IdentityFlow).unwrap() {
        assert_eq!(s.window.len(), 5);
        for w in &s.window {
            assert_eq!(w, &s.clean_center);
        }
    }
}

#[test]
fn training_is_deterministic() {
    let corpus: Vec<Image> = (0..2).map(|i| common::still(40 + i, 32, 32)).collect();
    let data = extract_spatial_samples(
        &corpus,
        &SpatialDatasetConfig {
            count: 12,
            patch_size: 8,
            seed: 2,
            ..Default::default()
        },
    )
    .unwrap();
    let config = TrainConfig {
        epochs: 2,
        batch_size: 4,
        lr_schedule: LrSchedule::constant(1e-3, 2),
        orthogonalize_until_epoch: 1,
        width: 6,
        depth: Some(4),
        seed: 3,
        ..Default::default()
    };
    let a = train_spatial(&data, &config).unwrap();
    let b = train_spatial(&data, &config).unwrap();
    assert_eq!(a.state.loss_history, b.state.loss_history);
    assert_eq!(encode(&a.params, &Map::new()).unwrap(), encode(&b.params, &Map::new()).unwrap());
}

#[test]
fn pipeline_output_shape_range_and_single_spatial_pass() {
    let sp = fold_batchnorm(&small(BlockConfig::spatial(), 20)).unwrap();
    let tp = fold_batchnorm(&small(BlockConfig::temporal(), 21)).unwrap();
    let denoiser = Denoiser::new(sp, tp, Arc::new(BlockMatchFlow::default())).unwrap();
    for (n, h, w) in [(1, 15, 17), (3, 20, 20), (7, 16, 24)] {
        let seq = common::sequence(22 + n as u64, n, h, w, (0.5, 0.5));
        let noisy = FrameSequence::new(
            seq.frames().iter().enumerate().map(|(i, f)| add_awgn(f, 0.1, i as u64).unwrap()).collect(),
        )
        .unwrap();
        let out = denoiser.denoise(&noisy, 0.1, 1).unwrap();
        assert_eq!(out.sequence.len(), n);
        assert_eq!(out.spatial_passes, n);
        for f in out.sequence.frames() {
            assert_eq!(f.shape(), (h, w, 3));
            assert!(f.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}

#[test]
fn identity_models_with_identity_flow_pass_frames_through() {
    let mut sp = small(BlockConfig::spatial(), 30);
    sp.zero_final_layer();
    let mut tp = small(BlockConfig::temporal(), 31);
    tp.zero_final_layer();
    let denoiser = Denoiser::new(
        fold_batchnorm(&sp).unwrap(),
        fold_batchnorm(&tp).unwrap(),
        Arc::new(IdentityFlow),
    )
    .unwrap();
    let seq = common::sequence(32, 5, 18, 22, (0.0, 0.0));
    assert_eq!(denoiser.denoise(&seq, 0.0, 1).unwrap().sequence, seq);
}
