mod common;

use common::gradcheck;
use issnet::consistency::{
    bsr_penalty, ce_loss, consistency_objective, ntxent_loss, pretrain, Architecture, Encoder, LinearClassifier,
    LossVariant, PretrainConfig,
};
use issnet::datasets::{generate_benchmark, BenchmarkSpec};
use issnet::seed::rng_for;
use issnet::stylizer::PseudoLabeledSet;
use issnet_nn::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn matrix(rows: usize, cols: usize, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn bsr_equals_squared_frobenius_norm(rows in 1usize..=64, cols in 1usize..=128, seed in any::<u64>()) {
        let f = matrix(rows, cols, seed);
        let fro: f64 = f.data().iter().map(|v| v * v).sum();
        prop_assert!((bsr_penalty(&f).unwrap() - fro).abs() <= 1e-5);
    }

    #[test]
    fn ntxent_is_invariant_to_embedding_scale(b in 2usize..8, d in 1usize..6, s in 0.1f64..10.0, seed in any::<u64>()) {
        let (a, p) = (matrix(b, d, seed), matrix(b, d, seed ^ 1));
        let scaled = a.map(|v| v * s);
        let (l1, l2) = (ntxent_loss(&a, &p, 0.5).unwrap(), ntxent_loss(&scaled, &p, 0.5).unwrap());
        prop_assert!((l1 - l2).abs() <= 1e-9);
    }
}

#[test]
fn uniform_logits_cost_log_of_the_class_count() {
    let logits = Tensor::<f64>::full(vec![3, 5], 0.7);
    assert!((ce_loss(&logits, &[0, 2, 4]).unwrap() - 5f64.ln()).abs() <= 1e-9);
}

#[test]
fn out_of_range_label_is_rejected() {
    assert!(ce_loss(&Tensor::<f64>::zeros(vec![1, 5]), &[5]).is_err());
}

fn toy_images(batch: usize, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::new(vec![batch, 3, 16, 16], (0..batch * 3 * 256).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
}

fn check_objective(variant: LossVariant) {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let enc0 = Encoder::<f64>::new(Architecture::SmallCnn, 3, 2, &mut rng).unwrap();
    let head0 = LinearClassifier::<f64>::new(enc0.embedding_dim(), 5, &mut rng);
    let x = toy_images(6, 1);
    let labels = [0, 1, 2, 3, 4, 0];
    let positives = toy_images(3, 2);
    let rows = [0usize, 2, 5];
    let cfg = PretrainConfig { loss_variant: variant, lambda_bsr: 0.5, lambda_ntxent: 1.0, ..Default::default() };
    let pair = Some((&rows[..], &positives));

    let mut eg = enc0.net.zero_grads();
    let mut hg = head0.zero_grads();
    consistency_objective(&enc0, &head0, x.clone(), &labels, pair, &cfg, Some((&mut eg, &mut hg))).unwrap();
    let mut analytic = eg.concat();
    analytic.extend(hg.concat());

    let n_enc = enc0.net.num_params();
    let mut head_theta = head0.layer.weight.clone();
    head_theta.extend(&head0.layer.bias);
    let total = n_enc + head_theta.len();
    let (mut enc, mut head) = (enc0.clone(), head0.clone());
    let report = gradcheck(&analytic, total, |i, delta| {
        let mut p = enc0.net.flat_params();
        let mut q = head_theta.clone();
        if i < n_enc {
            p[i] += delta;
        } else {
            q[i - n_enc] += delta;
        }
        enc.net.load_flat_params(&p).unwrap();
        let n_w = head.layer.weight.len();
        head.layer.weight.copy_from_slice(&q[..n_w]);
        head.layer.bias.copy_from_slice(&q[n_w..]);
        consistency_objective(&enc, &head, x.clone(), &labels, pair, &cfg, None).unwrap().loss
    });
    assert!(report.rel_err <= 1e-3, "{variant:?}: relative error {}", report.rel_err);
    assert!(report.kinks * 20 <= total, "{variant:?}: {} kinks", report.kinks);
}

#[test]
fn ce_objective_matches_finite_differences() {
    check_objective(LossVariant::Ce);
}

#[test]
fn bsr_objective_matches_finite_differences() {
    check_objective(LossVariant::Bsr);
}

#[test]
fn ntxent_objective_matches_finite_differences() {
    check_objective(LossVariant::NtxentCe);
}

fn small_pretrain(variant: LossVariant, lambda_bsr: f64) -> Vec<f64> {
    let bench = generate_benchmark(&BenchmarkSpec::desk(16, 0)).unwrap();
    let cfg = PretrainConfig { width: 4, epochs: 2, loss_variant: variant, lambda_bsr, lr: 0.05, ..Default::default() };
    let enc = Encoder::new(cfg.architecture, 3, cfg.width, &mut rng_for(7, "encoder-init", 0)).unwrap();
    let run = pretrain(&bench.source, &PseudoLabeledSet::empty(), enc, &cfg, 7).unwrap();
    run.history.iter().map(|r| r.loss).collect()
}

#[test]
fn zero_bsr_weight_reproduces_the_ce_trace() {
    let ce = small_pretrain(LossVariant::Ce, 0.0);
    assert_eq!(ce.len(), 2);
    assert_eq!(small_pretrain(LossVariant::Bsr, 0.0), ce);
}

#[test]
fn pretraining_is_deterministic_and_bsr_changes_the_trace() {
    let a = small_pretrain(LossVariant::Bsr, 1e-2);
    assert_eq!(a, small_pretrain(LossVariant::Bsr, 1e-2));
    assert_ne!(a, small_pretrain(LossVariant::Ce, 0.0));
}
