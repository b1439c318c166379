//! Calibration probe for the desk configuration on the frozen benchmark.
//!
//! `MODE=pretrain` prints the pretraining loss curves of both arms only;
//! `MODE=eval` also runs the episodic protocol. Knobs come from the
//! environment so a sweep needs no rebuild.

use std::time::Instant;

use issnet::checkpoint::pretrained_hash;
use issnet::datasets::generate_benchmark;
use issnet::evaluation::{pretrain_for, run_protocol, EvalProtocol, ReportProvenance};
use issnet::stylizer::{generate_pseudo_labeled, train_stylizer, PseudoLabeledSet};
use issnet::RunConfig;

fn env<T: std::str::FromStr>(key: &str, default: T) -> T {
    std::env::var(key).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn main() {
    let mut cfg = RunConfig::desk();
    cfg.seed = env("SEED", 0);
    cfg.pretrain.epochs = env("PRE_EPOCHS", cfg.pretrain.epochs);
    cfg.pretrain.lr = env("PRE_LR", cfg.pretrain.lr);
    cfg.pretrain.width = env("WIDTH", cfg.pretrain.width);
    cfg.pretrain.batch_size = env("PRE_BATCH", cfg.pretrain.batch_size);
    cfg.stylizer.steps = env("STY_STEPS", cfg.stylizer.steps);
    cfg.finetune.epochs = env("FT_EPOCHS", cfg.finetune.epochs);
    let mode: String = env("MODE", "pretrain".to_string());
    let every: usize = env("EVERY", 10);
    let arms: String = env("ARMS", "both".to_string());

    let bench = generate_benchmark(&cfg.data.benchmark).unwrap();
    let pseudo = if arms == "baseline" {
        PseudoLabeledSet::empty()
    } else {
        let t = Instant::now();
        let sty = train_stylizer(&bench.source, &bench.styles, &cfg.stylizer, cfg.seed).unwrap();
        let pseudo = generate_pseudo_labeled(
            &bench.source,
            &bench.styles,
            &sty.net,
            cfg.stylizer.alpha,
            cfg.stylizer.pairing,
            cfg.seed,
        )
        .unwrap();
        println!("stylizer + {} pseudo images in {:.1}s", pseudo.len(), t.elapsed().as_secs_f64());
        pseudo
    };
    println!("seed {} lr {} epochs {}", cfg.seed, cfg.pretrain.lr, cfg.pretrain.epochs);

    let target = bench.targets.iter().find(|t| t.name() == "target_shifted").unwrap();
    for (label, set, stylize) in [("baseline", PseudoLabeledSet::empty(), false), ("issnet", pseudo, true)] {
        if arms != "both" && arms != label {
            continue;
        }
        let t = Instant::now();
        let p = pretrain_for(&cfg, &bench.source, &set).unwrap();
        let curve: Vec<String> = p
            .history
            .iter()
            .filter(|r| (r.epoch + 1) % every == 0)
            .map(|r| format!("{}:{:.3}/{:.2}", r.epoch + 1, r.loss, r.accuracy))
            .collect();
        println!("{label}: pretrain {:.1}s {}", t.elapsed().as_secs_f64(), curve.join(" "));
        if mode != "eval" {
            continue;
        }
        let hash = cfg.training_hash(stylize).unwrap();
        let provenance =
            ReportProvenance { checkpoint_hash: pretrained_hash(&p, &hash).unwrap(), config_hash: hash.clone() };
        let protocol = EvalProtocol {
            episodes: cfg.evaluation.episodes,
            ways: cfg.evaluation.ways,
            shots: cfg.evaluation.shots[0],
            queries: cfg.evaluation.queries,
            seed: cfg.seed,
            target: target.name().to_string(),
            config_hash: hash,
        };
        let r = run_protocol(&p, &provenance, target, &protocol, &cfg.finetune, label).unwrap();
        println!("{label}: mean {:.4} ci95 {:.4} ({:.1}s)", r.mean.unwrap(), r.ci95.unwrap(), r.wall_time);
    }
}
