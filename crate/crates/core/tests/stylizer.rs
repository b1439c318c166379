mod common;

use common::gradcheck;
use issnet::stylizer::{adain, gram, ChannelStats, FeatureMap, ObjectiveSpec, PerceptualEncoder, StyleNet};
use issnet_nn::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn feature_map(channels: usize, h: usize, w: usize, seed: u64) -> FeatureMap<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..channels * h * w).map(|_| rng.random_range(-3.0..3.0)).collect();
    FeatureMap::new(channels, h, w, data, 1).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn adain_output_carries_the_style_statistics(
        channels in prop::sample::select(vec![4usize, 16]),
        hc in 2usize..=8, wc in 2usize..=8, hs in 2usize..=8, ws in 2usize..=8,
        seed in any::<u64>(),
    ) {
        let content = feature_map(channels, hc, wc, seed);
        let style = feature_map(channels, hs, ws, seed ^ 0x5eed);
        let out = adain(&content, &style, 1e-5).unwrap();
        let (o, s) = (ChannelStats::of(&out), ChannelStats::of(&style));
        for c in 0..channels {
            prop_assert!((o.mu[c] - s.mu[c]).abs() <= 1e-5);
            prop_assert!((o.sigma[c] - s.sigma[c]).abs() <= 1e-4);
        }
    }

    #[test]
    fn adain_of_a_map_with_itself_is_the_identity(
        channels in prop::sample::select(vec![4usize, 16]),
        h in 2usize..=8, w in 2usize..=8,
        seed in any::<u64>(),
    ) {
        let f = feature_map(channels, h, w, seed);
        let out = adain(&f, &f, 1e-5).unwrap();
        for (a, b) in out.data.iter().zip(&f.data) {
            prop_assert!((a - b).abs() <= 1e-5);
        }
    }

    #[test]
    fn gram_is_symmetric(channels in 1usize..6, h in 1usize..5, w in 1usize..5, seed in any::<u64>()) {
        let f = feature_map(channels, h, w, seed);
        let g = gram(&f);
        for i in 0..channels {
            for j in 0..channels {
                prop_assert_eq!(g[i * channels + j], g[j * channels + i]);
            }
        }
    }
}

#[test]
fn adain_rejects_mismatched_channels() {
    assert!(adain(&feature_map(4, 3, 3, 1), &feature_map(16, 3, 3, 2), 1e-5).is_err());
}

#[test]
fn constant_content_channel_is_floored_not_divided_by_zero() {
    let content = FeatureMap::new(1, 2, 2, vec![0.5; 4], 1).unwrap();
    let style = feature_map(1, 3, 3, 7);
    let out = adain(&content, &style, 1e-5).unwrap();
    assert!(out.data.iter().all(|v| v.is_finite()));
    let mu = ChannelStats::of(&style).mu[0];
    assert!(out.data.iter().all(|v| (v - mu).abs() < 1e-12));
}

fn toy_net(seed: u64) -> StyleNet<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut enc = PerceptualEncoder::<f64>::new(3, &[2, 3], &mut rng).unwrap();
    enc.freeze();
    StyleNet::new(enc, 2, 3, &mut rng).unwrap().allow_untrained()
}

fn images(batch: usize, size: usize, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..batch * 3 * size * size).map(|_| rng.random_range(0.0..1.0)).collect();
    Tensor::new(vec![batch, 3, size, size], data).unwrap()
}

#[test]
fn stylizer_objective_matches_finite_differences() {
    let mut net = toy_net(3);
    assert!(net.decoder.num_params() <= 1000);
    let (content, style) = (images(2, 8, 10), images(2, 8, 11));
    let spec = ObjectiveSpec { lambda_sty: 10.0, alpha: 1.0, eps: 1e-5, layers: vec![1, 2] };
    let mut grads = net.decoder.zero_grads();
    net.objective(&content, &style, &spec, Some(&mut grads)).unwrap();
    let analytic: Vec<f64> = grads.concat();

    let theta = net.decoder.flat_params();
    let report = gradcheck(&analytic, theta.len(), |i, delta| {
        let mut p = theta.clone();
        p[i] += delta;
        net.decoder.load_flat_params(&p).unwrap();
        net.objective(&content, &style, &spec, None).unwrap().total
    });
    assert!(report.rel_err <= 1e-3, "relative error {}", report.rel_err);
    assert!(report.kinks * 20 <= theta.len(), "{} of {} coordinates on a kink", report.kinks, theta.len());
}

#[test]
fn zero_alpha_decodes_to_the_reconstruction() {
    let net = toy_net(5);
    let (content, style) = (images(3, 8, 20), images(3, 8, 21));
    let mixed = net.decode_mixed(&content, &style, 0.0).unwrap();
    let recon = net.reconstruct(&content).unwrap();
    assert_eq!(mixed, recon);
}
