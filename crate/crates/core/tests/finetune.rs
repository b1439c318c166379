use issnet::consistency::{Architecture, Encoder};
use issnet::datasets::{Episode, ImageTensor};
use issnet::finetune::{
    argmax_f64, build_prototypes, classify_queries, finetune_on_support, label_propagation, run_episode, FinetuneConfig,
};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn image(rng: &mut ChaCha8Rng, size: usize) -> ImageTensor {
    ImageTensor::new(3, size, size, (0..3 * size * size).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
}

fn episode(ways: usize, shots: usize, queries: usize, seed: u64) -> Episode {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let support = (0..ways).flat_map(|c| vec![c; shots]).map(|c| (image(&mut rng, 16), c)).collect();
    let query = (0..ways).flat_map(|c| vec![c; queries]).map(|c| (image(&mut rng, 16), c)).collect();
    Episode::from_parts(ways, support, query).unwrap()
}

fn encoder(seed: u64) -> Encoder<f32> {
    Encoder::new(Architecture::SmallCnn, 3, 2, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn quick(epochs: usize) -> FinetuneConfig {
    FinetuneConfig { epochs, ..Default::default() }
}

fn random_logits(rng: &mut ChaCha8Rng, m: usize, c: usize, d: usize) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let logits = (0..m).map(|_| (0..c).map(|_| rng.random_range(-4.0..4.0)).collect()).collect();
    let emb = (0..m).map(|_| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
    (logits, emb)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn prototypes_ignore_support_order(seed in any::<u64>()) {
        let ep = episode(3, 3, 1, seed);
        let enc = encoder(1);
        let mut perm: Vec<usize> = (0..9).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(build_prototypes(&enc, &ep).unwrap(), build_prototypes(&enc, &ep.permute_support(&perm)).unwrap());
    }

    #[test]
    fn propagated_rows_are_distributions(m in 1usize..30, c in 2usize..8, alpha in 0.0f64..0.999, seed in any::<u64>()) {
        let (logits, emb) = random_logits(&mut ChaCha8Rng::seed_from_u64(seed), m, c, 4);
        for row in label_propagation(&logits, &emb, alpha, None).unwrap() {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
            prop_assert!(row.iter().all(|&v| v >= 0.0));
        }
    }
}

#[test]
fn vanishing_alpha_keeps_the_argmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for _ in 0..100 {
        let (logits, emb) = random_logits(&mut rng, 25, 5, 8);
        let refined = label_propagation(&logits, &emb, 1e-9, None).unwrap();
        for (r, l) in refined.iter().zip(&logits) {
            assert_eq!(argmax_f64(r), argmax_f64(l));
        }
    }
}

/// `sum_k (alpha S)^k Y`, truncated once the terms vanish.
fn propagation_series(logits: &[Vec<f64>], emb: &[Vec<f64>], alpha: f64) -> Vec<Vec<f64>> {
    let m = logits.len();
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
    let mut pairs: Vec<f64> =
        (0..m).flat_map(|i| (i + 1..m).map(move |j| (i, j))).map(|(i, j)| dist(&emb[i], &emb[j]).sqrt()).collect();
    pairs.sort_by(f64::total_cmp);
    let n = pairs.len();
    let sigma = if n % 2 == 1 { pairs[n / 2] } else { 0.5 * (pairs[n / 2 - 1] + pairs[n / 2]) };
    let w = |i: usize, j: usize| if i == j { 0.0 } else { (-dist(&emb[i], &emb[j]) / (2.0 * sigma * sigma)).exp() };
    let deg: Vec<f64> = (0..m).map(|i| (0..m).map(|j| w(i, j)).sum()).collect();
    let s = |i: usize, j: usize| w(i, j) / (deg[i] * deg[j]).sqrt();
    let y: Vec<Vec<f64>> = logits
        .iter()
        .map(|r| {
            let e: Vec<f64> = r.iter().map(|v| v.exp()).collect();
            let z: f64 = e.iter().sum();
            e.iter().map(|v| v / z).collect()
        })
        .collect();
    let mut f = y.clone();
    let mut term = y;
    for _ in 0..400 {
        term = (0..m)
            .map(|i| (0..term[0].len()).map(|c| alpha * (0..m).map(|j| s(i, j) * term[j][c]).sum::<f64>()).collect())
            .collect();
        for (fr, tr) in f.iter_mut().zip(&term) {
            fr.iter_mut().zip(tr).for_each(|(a, b)| *a += b);
        }
    }
    f.into_iter()
        .map(|r| {
            let z: f64 = r.iter().sum();
            r.into_iter().map(|v| v / z).collect()
        })
        .collect()
}

#[test]
fn propagation_matches_the_neumann_series() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for alpha in [0.1, 0.5, 0.9] {
        let (logits, emb) = random_logits(&mut rng, 12, 4, 3);
        let got = label_propagation(&logits, &emb, alpha, None).unwrap();
        let want = propagation_series(&logits, &emb, alpha);
        for (g, w) in got.iter().zip(&want) {
            for (a, b) in g.iter().zip(w) {
                assert!((a - b).abs() <= 1e-9, "{a} vs {b} at alpha {alpha}");
            }
        }
    }
}

#[test]
fn propagation_pulls_a_doubtful_point_to_its_cluster() {
    let emb = vec![vec![0.0, 0.0], vec![0.1, 0.0], vec![0.0, 0.1], vec![5.0, 5.0], vec![5.1, 5.0], vec![0.05, 0.05]];
    let mut logits = vec![vec![3.0, 0.0], vec![3.0, 0.0], vec![3.0, 0.0], vec![0.0, 3.0], vec![0.0, 3.0]];
    logits.push(vec![0.0, 0.3]);
    let refined = label_propagation(&logits, &emb, 0.9, None).unwrap();
    assert_eq!(argmax_f64(&logits[5]), 1);
    assert_eq!(argmax_f64(&refined[5]), 0);
    let oracle = propagation_series(&logits, &emb, 0.9);
    assert!(refined[5].iter().zip(&oracle[5]).all(|(a, b)| (a - b).abs() <= 1e-9));
}

#[test]
fn nearest_prototype_matches_a_brute_force_search() {
    let ep = episode(5, 2, 3, 11);
    let enc = encoder(2);
    let protos = build_prototypes(&enc, &ep).unwrap();
    let pred = classify_queries(&enc, &protos, &ep).unwrap();
    for (q, img) in ep.query.images().iter().enumerate() {
        let x = ImageTensor::batch::<f32>(&[img]).unwrap();
        let e = enc.embed(&x).unwrap();
        let best = protos
            .iter()
            .map(|p| p.vector.iter().zip(e.item(0)).map(|(a, &b)| (a - b as f64).powi(2)).sum::<f64>())
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap()
            .0;
        assert_eq!(pred.predicted[q], best);
    }
}

#[test]
fn fine_tuning_never_reads_queries() {
    let ep = episode(5, 1, 4, 5);
    finetune_on_support(&encoder(3), &ep, &quick(3), 0).unwrap();
    assert_eq!(ep.query.reads(), 0);
}

#[test]
fn zero_epochs_leave_the_encoder_untouched() {
    let enc = encoder(4);
    assert_eq!(finetune_on_support(&enc, &episode(3, 2, 1, 6), &quick(0), 0).unwrap(), enc);
}

#[test]
fn episodes_are_deterministic_per_seed() {
    let ep = episode(5, 1, 3, 8);
    let cfg = FinetuneConfig { use_augmentation: true, use_label_propagation: true, ..quick(3) };
    let a = run_episode(&encoder(5), &ep, &cfg, 17).unwrap();
    assert_eq!(a, run_episode(&encoder(5), &ep, &cfg, 17).unwrap());
    assert_eq!(a.predicted.len(), 15);
}

#[test]
fn one_shot_episode_runs_with_the_default_batch() {
    let ep = episode(5, 1, 2, 9);
    let cfg = quick(2);
    assert_eq!(cfg.batch_size, 4);
    let pred = run_episode(&encoder(6), &ep, &cfg, 1).unwrap();
    assert!((0.0..=1.0).contains(&pred.accuracy));
}

#[test]
fn low_lp_weight_does_not_hurt_separated_clusters() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..20 {
        let emb: Vec<Vec<f64>> = (0..15).map(|i| vec![(i / 5) as f64 * 10.0 + rng.random_range(-0.5..0.5)]).collect();
        let logits: Vec<Vec<f64>> = (0..15)
            .map(|i| (0..3).map(|c| if c == i / 5 { 2.0 } else { 0.0 } + rng.random_range(-0.5..0.5)).collect())
            .collect();
        let hits = |rows: &[Vec<f64>]| rows.iter().enumerate().filter(|(i, r)| argmax_f64(r) == i / 5).count();
        assert!(hits(&label_propagation(&logits, &emb, 0.01, None).unwrap()) >= hits(&logits));
    }
}
