use std::sync::OnceLock;

use issnet::checkpoint::{load_pretrained, pretrained_hash, save_pretrained};
use issnet::consistency::{pretrain, Encoder, PretrainConfig, Pretrained};
use issnet::datasets::{generate_benchmark, BenchmarkSpec, SyntheticBenchmark};
use issnet::evaluation::{
    ablation_cells, emit_plots, run_ablation_matrix, run_protocol, summarize, AblationCell, EvalProtocol, EvalReport,
    ReportProvenance, ReportStatus, ResultsCache,
};
use issnet::finetune::FinetuneConfig;
use issnet::seed::rng_for;
use issnet::stylizer::PseudoLabeledSet;
use issnet::{IssError, RunConfig};
use proptest::prelude::*;

const CONFIG: &str = "test-config";

struct Fixture {
    bench: SyntheticBenchmark,
    model: Pretrained,
    provenance: ReportProvenance,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let bench = generate_benchmark(&BenchmarkSpec::desk(16, 0)).unwrap();
        let cfg = PretrainConfig { width: 4, epochs: 1, lr: 0.05, ..Default::default() };
        let enc = Encoder::new(cfg.architecture, 3, cfg.width, &mut rng_for(1, "encoder-init", 0)).unwrap();
        let model = pretrain(&bench.source, &PseudoLabeledSet::empty(), enc, &cfg, 1).unwrap();
        let provenance =
            ReportProvenance { checkpoint_hash: pretrained_hash(&model, CONFIG).unwrap(), config_hash: CONFIG.into() };
        Fixture { bench, model, provenance }
    })
}

fn protocol(seed: u64, episodes: usize, shots: usize) -> EvalProtocol {
    EvalProtocol {
        episodes,
        ways: 5,
        shots,
        queries: 15,
        seed,
        target: fixture().bench.targets[0].name().to_string(),
        config_hash: CONFIG.into(),
    }
}

fn finetune() -> FinetuneConfig {
    FinetuneConfig { epochs: 2, ..Default::default() }
}

fn evaluate(p: &EvalProtocol) -> EvalReport {
    let f = fixture();
    run_protocol(&f.model, &f.provenance, &f.bench.targets[0], p, &finetune(), "test").unwrap()
}

fn ci95_oracle(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    1.96 * var.sqrt() / n.sqrt()
}

proptest! {
    #[test]
    fn summary_matches_the_textbook_formula(xs in prop::collection::vec(0.0f64..1.0, 2..200)) {
        let s = summarize(&xs).unwrap();
        prop_assert!((s.ci95 - ci95_oracle(&xs)).abs() <= 1e-9);
        prop_assert!((s.mean - xs.iter().sum::<f64>() / xs.len() as f64).abs() <= 1e-12);
    }
}

#[test]
fn identical_protocols_give_identical_episode_vectors() {
    let a = evaluate(&protocol(3, 8, 1));
    let b = evaluate(&protocol(3, 8, 1));
    assert_eq!(a.accuracies(), b.accuracies());
    assert_eq!(a.fingerprint, b.fingerprint);
    assert!((a.ci95.unwrap() - ci95_oracle(&a.accuracies())).abs() <= 1e-9);
    assert!(a.episodes.iter().enumerate().all(|(i, e)| e.index == i));
}

#[test]
fn seeds_drive_distinct_episode_streams() {
    let target = &fixture().bench.targets[0];
    let (a, b) = (protocol(1, 4, 1), protocol(2, 4, 1));
    assert_ne!(a.episode_seed(0), b.episode_seed(0));
    let differs =
        (0..4).any(|i| a.sample(target, i).unwrap().support_images() != b.sample(target, i).unwrap().support_images());
    assert!(differs);
    assert_ne!(a.fingerprint("x", &finetune()).unwrap(), b.fingerprint("x", &finetune()).unwrap());
}

#[test]
fn infeasible_target_yields_a_not_applicable_report() {
    let mut p = protocol(0, 4, 1);
    p.ways = 500;
    let r = evaluate(&p);
    assert_eq!(r.status, ReportStatus::NotApplicable);
    assert!(r.mean.is_none() && r.episodes.is_empty() && r.reason.is_some());
}

#[test]
fn provenance_must_match_model_and_protocol() {
    let f = fixture();
    let target = &f.bench.targets[0];
    let forged = ReportProvenance { checkpoint_hash: "0".repeat(64), ..f.provenance.clone() };
    let err = run_protocol(&f.model, &forged, target, &protocol(0, 2, 1), &finetune(), "x").unwrap_err();
    assert!(matches!(err, IssError::Provenance(_)));
    let mut p = protocol(0, 2, 1);
    p.config_hash = "other".into();
    let err = run_protocol(&f.model, &f.provenance, target, &p, &finetune(), "x").unwrap_err();
    assert!(matches!(err, IssError::Provenance(_)));
}

#[test]
fn plots_cover_every_chart_and_are_reproducible() {
    let reports = vec![evaluate(&protocol(0, 3, 1)), evaluate(&protocol(0, 3, 2))];
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let out = emit_plots(&reports, d1.path()).unwrap();
    assert_eq!(out.files.len(), 5);
    assert_eq!(out.summary.len(), 2);
    for (e, r) in out.summary.iter().zip(&reports) {
        assert_eq!((e.mean, e.ci95, &e.fingerprint), (r.mean, r.ci95, &r.fingerprint));
    }
    let again = emit_plots(&reports, d2.path()).unwrap();
    for (a, b) in out.files.iter().zip(&again.files) {
        assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
    }
    assert!(emit_plots(&[], d1.path()).is_err());
}

#[test]
fn ablation_reuses_cached_results() {
    let f = fixture();
    let mut cfg = RunConfig::smoke();
    cfg.evaluation.episodes = 2;
    let cells: Vec<AblationCell> = vec![ablation_cells(&cfg.ablation.variants)[0], AblationCell::BASELINE];
    let dir = tempfile::tempdir().unwrap();
    let targets = [&f.bench.targets[0]];
    let pseudo = PseudoLabeledSet::empty();
    let mut cache = ResultsCache::on_disk(dir.path());
    let first = run_ablation_matrix(&cells, &targets, &cfg, &f.bench.source, &pseudo, &mut cache).unwrap();
    assert_eq!(cache.report_hits, 0);
    let mut cache = ResultsCache::on_disk(dir.path());
    let second = run_ablation_matrix(&cells, &targets, &cfg, &f.bench.source, &pseudo, &mut cache).unwrap();
    assert_eq!(first, second);
    assert_eq!(cache.report_hits, 2);
}

#[test]
fn checkpoint_round_trip_preserves_model_and_hash() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("enc.ckpt");
    let hash = save_pretrained(&path, &f.model, CONFIG).unwrap();
    assert_eq!(hash, f.provenance.checkpoint_hash);
    let loaded = load_pretrained(&path).unwrap();
    assert_eq!(loaded.hash, hash);
    assert_eq!(loaded.header.config_hash, CONFIG);
    assert_eq!(loaded.value.encoder, f.model.encoder);
    assert_eq!(loaded.value.classifier, f.model.classifier);
    let report = run_protocol(&loaded.value, &f.provenance, &f.bench.targets[0], &protocol(5, 2, 1), &finetune(), "x");
    assert_eq!(report.unwrap().accuracies(), evaluate(&protocol(5, 2, 1)).accuracies());
}
