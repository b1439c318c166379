//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any
//! failure. Run with `cargo test -p issnet-cli --test acceptance`.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::gradcheck;
use issnet::checkpoint::pretrained_hash;
use issnet::consistency::{
    bsr_penalty, ce_loss, consistency_objective, pretrain, Architecture, Encoder, LinearClassifier, LossVariant,
    PretrainConfig,
};
use issnet::datasets::{generate_benchmark, BenchmarkSpec};
use issnet::evaluation::{run_protocol, AblationTable, EvalProtocol, EvalReport, ReportProvenance};
use issnet::finetune::{argmax_f64, label_propagation, FinetuneConfig};
use issnet::seed::rng_for;
use issnet::stylizer::{adain, ChannelStats, FeatureMap, ObjectiveSpec, PerceptualEncoder, PseudoLabeledSet, StyleNet};
use issnet::RunConfig;
use issnet_cli::{cmd_ablate, cmd_pipeline};
use issnet_nn::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Minimum per-seed gap between full-pipeline and baseline mean accuracy,
/// calibrated once on the frozen desk benchmark.
const MARGIN: f64 = 0.05;
const SEEDS: [u64; 3] = [0, 1, 2];

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, budget_s: u64) -> Result<(), String> {
    ensure(elapsed.as_secs_f64() < budget_s as f64, || {
        format!("took {:.1}s, budget {budget_s}s", elapsed.as_secs_f64())
    })
}

fn adain_statistics() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let map = |c: usize, rng: &mut ChaCha8Rng| {
        let (h, w) = (rng.random_range(2..=8), rng.random_range(2..=8));
        FeatureMap::<f32>::new(c, h, w, (0..c * h * w).map(|_| rng.random_range(-3.0..3.0)).collect(), 1).unwrap()
    };
    let (mut worst_mu, mut worst_sigma, mut worst_id) = (0f64, 0f64, 0f64);
    for i in 0..1000 {
        let c = if i % 2 == 0 { 4 } else { 16 };
        let (content, style) = (map(c, &mut rng), map(c, &mut rng));
        let out = adain(&content, &style, 1e-5).map_err(|e| e.to_string())?;
        let (o, s) = (ChannelStats::of(&out), ChannelStats::of(&style));
        for k in 0..c {
            worst_mu = worst_mu.max((o.mu[k] - s.mu[k]).abs());
            worst_sigma = worst_sigma.max((o.sigma[k] - s.sigma[k]).abs());
        }
        let same = adain(&content, &content, 1e-5).map_err(|e| e.to_string())?;
        for (a, b) in same.data.iter().zip(&content.data) {
            worst_id = worst_id.max((a - b).abs() as f64);
        }
    }
    ensure(worst_mu <= 1e-5 && worst_sigma <= 1e-4 && worst_id <= 1e-5, || {
        format!("max errors mu {worst_mu:.2e}, sigma {worst_sigma:.2e}, identity {worst_id:.2e}")
    })?;
    within(start.elapsed(), 10)?;
    Ok(format!("1000 pairs; max |dmu| {worst_mu:.1e}, |dsigma| {worst_sigma:.1e}, identity {worst_id:.1e}"))
}

fn bsr_identity() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0f64;
    for _ in 0..1000 {
        let (b, d) = (rng.random_range(1..=64), rng.random_range(1..=128));
        let f = Tensor::<f64>::new(vec![b, d], (0..b * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let fro: f64 = f.data().iter().map(|v| v * v).sum();
        worst = worst.max((bsr_penalty(&f).map_err(|e| e.to_string())? - fro).abs());
    }
    ensure(worst <= 1e-5, || format!("max deviation {worst:.2e}"))?;
    within(start.elapsed(), 10)?;
    Ok(format!("1000 matrices; max deviation {worst:.1e}"))
}

fn images(batch: usize, size: usize, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..batch * 3 * size * size).map(|_| rng.random_range(0.0..1.0)).collect();
    Tensor::new(vec![batch, 3, size, size], data).unwrap()
}

fn toy_stylizer(seed: u64) -> StyleNet<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut enc = PerceptualEncoder::<f64>::new(3, &[2, 3], &mut rng).unwrap();
    enc.freeze();
    StyleNet::new(enc, 2, 3, &mut rng).unwrap().allow_untrained()
}

fn gradient_checks() -> Outcome {
    let start = Instant::now();
    let mut net = toy_stylizer(3);
    let (content, style) = (images(2, 8, 10), images(2, 8, 11));
    let spec = ObjectiveSpec { lambda_sty: 10.0, alpha: 1.0, eps: 1e-5, layers: vec![1, 2] };
    let mut grads = net.decoder.zero_grads();
    net.objective(&content, &style, &spec, Some(&mut grads)).map_err(|e| e.to_string())?;
    let theta = net.decoder.flat_params();
    let n_sty = theta.len();
    let sty = gradcheck(&grads.concat(), n_sty, |i, delta| {
        let mut p = theta.clone();
        p[i] += delta;
        net.decoder.load_flat_params(&p).unwrap();
        net.objective(&content, &style, &spec, None).unwrap().total
    });
    ensure(n_sty <= 1000, || format!("toy decoder has {n_sty} params"))?;
    ensure(sty.rel_err <= 1e-3 && sty.kinks * 20 <= n_sty, || {
        format!("stylizer objective rel err {:.2e}, {} kinks", sty.rel_err, sty.kinks)
    })?;

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let enc0 = Encoder::<f64>::new(Architecture::SmallCnn, 3, 2, &mut rng).unwrap();
    let head0 = LinearClassifier::<f64>::new(enc0.embedding_dim(), 5, &mut rng);
    let x = images(6, 16, 1);
    let labels = [0, 1, 2, 3, 4, 0];
    let cfg = PretrainConfig { loss_variant: LossVariant::Bsr, lambda_bsr: 0.5, ..Default::default() };
    let (mut eg, mut hg) = (enc0.net.zero_grads(), head0.zero_grads());
    consistency_objective(&enc0, &head0, x.clone(), &labels, None, &cfg, Some((&mut eg, &mut hg)))
        .map_err(|e| e.to_string())?;
    let mut analytic = eg.concat();
    analytic.extend(hg.concat());
    let n_enc = enc0.net.num_params();
    let mut head_theta = head0.layer.weight.clone();
    head_theta.extend(&head0.layer.bias);
    let total = n_enc + head_theta.len();
    let (mut enc, mut head) = (enc0.clone(), head0.clone());
    let cls = gradcheck(&analytic, total, |i, delta| {
        let (mut p, mut q) = (enc0.net.flat_params(), head_theta.clone());
        if i < n_enc {
            p[i] += delta;
        } else {
            q[i - n_enc] += delta;
        }
        enc.net.load_flat_params(&p).unwrap();
        let n_w = head.layer.weight.len();
        head.layer.weight.copy_from_slice(&q[..n_w]);
        head.layer.bias.copy_from_slice(&q[n_w..]);
        consistency_objective(&enc, &head, x.clone(), &labels, None, &cfg, None).unwrap().loss
    });
    ensure(cls.rel_err <= 1e-3 && cls.kinks * 20 <= total, || {
        format!("consistency objective rel err {:.2e}, {} kinks", cls.rel_err, cls.kinks)
    })?;
    within(start.elapsed(), 60)?;
    Ok(format!(
        "stylizer rel err {:.1e} ({n_sty} params, {} kinks); ce+bsr rel err {:.1e} ({total} params, {} kinks)",
        sty.rel_err, sty.kinks, cls.rel_err, cls.kinks
    ))
}

fn loss_collapse() -> Outcome {
    let bench = generate_benchmark(&BenchmarkSpec::desk(16, 0)).map_err(|e| e.to_string())?;
    let trace = |variant| {
        let cfg = PretrainConfig {
            width: 4,
            epochs: 3,
            loss_variant: variant,
            lambda_bsr: 0.0,
            lr: 0.05,
            ..Default::default()
        };
        let enc = Encoder::new(cfg.architecture, 3, cfg.width, &mut rng_for(7, "encoder-init", 0)).unwrap();
        let run = pretrain(&bench.source, &PseudoLabeledSet::empty(), enc, &cfg, 7).unwrap();
        run.history.iter().map(|r| r.loss).collect::<Vec<_>>()
    };
    let (ce, bsr) = (trace(LossVariant::Ce), trace(LossVariant::Bsr));
    ensure(ce == bsr, || format!("traces differ: {ce:?} vs {bsr:?}"))?;

    let net = toy_stylizer(5).cast::<f32>();
    let (content, style) = (images(3, 8, 20).cast::<f32>(), images(3, 8, 21).cast::<f32>());
    let mixed = net.decode_mixed(&content, &style, 0.0).map_err(|e| e.to_string())?;
    let recon = net.reconstruct(&content).map_err(|e| e.to_string())?;
    ensure(mixed == recon, || "alpha = 0 output differs from the reconstruction".into())?;
    Ok(format!("lambda_bsr = 0 trace equals ce over {} epochs; alpha = 0 equals reconstruction", ce.len()))
}

fn analytic_values() -> Outcome {
    let uniform = ce_loss(&Tensor::<f64>::full(vec![4, 5], 1.3), &[0, 1, 2, 3]).map_err(|e| e.to_string())?;
    let ce_err = (uniform - 5f64.ln()).abs();
    ensure(ce_err <= 1e-9, || format!("uniform ce off by {ce_err:.2e}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let instance = |rng: &mut ChaCha8Rng| {
        let m = rng.random_range(2..40);
        let logits: Vec<Vec<f64>> = (0..m).map(|_| (0..5).map(|_| rng.random_range(-4.0..4.0)).collect()).collect();
        let emb: Vec<Vec<f64>> = (0..m).map(|_| (0..8).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        (logits, emb)
    };
    let mut worst_sum = 0f64;
    for _ in 0..100 {
        let (logits, emb) = instance(&mut rng);
        for row in label_propagation(&logits, &emb, 0.99, None).map_err(|e| e.to_string())? {
            worst_sum = worst_sum.max((row.iter().sum::<f64>() - 1.0).abs());
        }
    }
    ensure(worst_sum <= 1e-6, || format!("propagated rows deviate from 1 by {worst_sum:.2e}"))?;
    for k in 0..100 {
        let (logits, emb) = instance(&mut rng);
        let refined = label_propagation(&logits, &emb, 1e-9, None).map_err(|e| e.to_string())?;
        let kept = refined.iter().zip(&logits).all(|(r, l)| argmax_f64(r) == argmax_f64(l));
        ensure(kept, || format!("instance {k}: argmax changed at lp_alpha = 1e-9"))?;
    }
    Ok(format!("ce error {ce_err:.1e}; row sums within {worst_sum:.1e}; argmax kept on 100 instances"))
}

fn directional_claim() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut lines = Vec::new();
    let mut failures = Vec::new();
    for seed in SEEDS {
        let mut cfg = RunConfig::desk();
        cfg.seed = seed;
        cfg.evaluation.targets = vec!["target_shifted".into()];
        let run = |skip: bool| -> Result<EvalReport, String> {
            let out = dir.path().join(format!("seed{seed}-{}", if skip { "baseline" } else { "issnet" }));
            let o = cmd_pipeline(&cfg, &out, skip, false).map_err(|e| e.to_string())?;
            o.reports.into_iter().next().ok_or_else(|| "no report".to_string())
        };
        let (full, base) = (run(false)?, run(true)?);
        let (fm, fc) = (full.mean.unwrap_or(0.0), full.ci95.unwrap_or(f64::INFINITY));
        let (bm, bc) = (base.mean.unwrap_or(0.0), base.ci95.unwrap_or(f64::INFINITY));
        let margin = fm - bm;
        lines.push(format!("seed {seed}: {fm:.3}±{fc:.3} vs {bm:.3}±{bc:.3}"));
        if !(margin >= MARGIN && fm - fc > bm + bc) {
            failures.push(format!("seed {seed}: margin {margin:.3} or overlapping intervals"));
        }
    }
    ensure(failures.is_empty(), || format!("{}; {}", failures.join("; "), lines.join("; ")))?;
    within(start.elapsed(), 20 * 60)?;
    Ok(format!("{} (margin >= {MARGIN}, {:.0}s)", lines.join("; "), start.elapsed().as_secs_f64()))
}

fn protocol_determinism() -> Outcome {
    let bench = generate_benchmark(&BenchmarkSpec::desk(16, 0)).map_err(|e| e.to_string())?;
    let cfg = PretrainConfig { width: 4, epochs: 2, lr: 0.05, ..Default::default() };
    let enc = Encoder::new(cfg.architecture, 3, cfg.width, &mut rng_for(3, "encoder-init", 0)).unwrap();
    let model = pretrain(&bench.source, &PseudoLabeledSet::empty(), enc, &cfg, 3).map_err(|e| e.to_string())?;
    let config_hash = "acceptance".to_string();
    let provenance = ReportProvenance {
        checkpoint_hash: pretrained_hash(&model, &config_hash).map_err(|e| e.to_string())?,
        config_hash: config_hash.clone(),
    };
    let target = &bench.targets[0];
    let protocol = EvalProtocol {
        episodes: 30,
        ways: 5,
        shots: 1,
        queries: 15,
        seed: 11,
        target: target.name().to_string(),
        config_hash,
    };
    let ft = FinetuneConfig { epochs: 3, ..Default::default() };
    let run = || run_protocol(&model, &provenance, target, &protocol, &ft, "determinism").map_err(|e| e.to_string());
    let (a, b) = (run()?, run()?);
    ensure(a.accuracies() == b.accuracies(), || "per-episode accuracies differ between runs".into())?;
    let xs = a.accuracies();
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let std = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let err = (a.ci95.unwrap_or(f64::NAN) - 1.96 * std / n.sqrt()).abs();
    ensure(err <= 1e-9, || format!("ci95 off by {err:.2e}"))?;
    Ok(format!("{} episodes identical; ci95 error {err:.1e}", xs.len()))
}

fn ablation_completeness() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let out = dir.path().join("ablate");
    cmd_ablate(&RunConfig::smoke(), &out, false).map_err(|e| e.to_string())?;
    let text = std::fs::read_to_string(out.join("ablation.json")).map_err(|e| e.to_string())?;
    let table: AblationTable = serde_json::from_str(&text).map_err(|e| e.to_string())?;
    let fps: std::collections::BTreeSet<&str> = table.rows.iter().map(|r| r.report.fingerprint.as_str()).collect();
    let ids: std::collections::BTreeSet<String> = table.rows.iter().map(|r| r.cell.id()).collect();
    ensure(table.rows.len() == 13 && fps.len() == 13 && ids.len() == 13, || {
        format!("{} reports, {} fingerprints, {} cells", table.rows.len(), fps.len(), ids.len())
    })?;
    Ok(format!("13 reports, 13 distinct fingerprints: {}", ids.into_iter().collect::<Vec<_>>().join(", ")))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("adain statistics", adain_statistics),
        ("bsr identity", bsr_identity),
        ("gradient checks", gradient_checks),
        ("loss-collapse equivalences", loss_collapse),
        ("analytic values", analytic_values),
        ("end-to-end directional claim", directional_claim),
        ("protocol determinism", protocol_determinism),
        ("ablation completeness", ablation_completeness),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        match check() {
            Ok(detail) => println!("criterion {} [{name}]: PASS ({detail})", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {} [{name}]: FAIL ({detail})", i + 1);
            }
        }
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
