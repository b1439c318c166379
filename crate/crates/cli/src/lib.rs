//! Pipeline stages behind the `issnet` binary. Each stage reads and writes
//! plain files under the output directory so partial reruns are cheap.

use std::fs;
use std::path::{Path, PathBuf};

use issnet::checkpoint::{self, load_pretrained, load_stylizer, save_pretrained, save_stylizer};
use issnet::config::RunConfig;
use issnet::consistency::Pretrained;
use issnet::datasets::{
    generate_benchmark, load_image_folder, write_image_folder, DatasetManifest, DatasetRole, DomainDataset,
    FolderOptions,
};
use issnet::evaluation::{
    ablation_cells, emit_plots, pretrain_for, reports_csv, run_ablation_matrix, run_protocol, EvalProtocol, EvalReport,
    ReportProvenance, ResultsCache,
};
use issnet::provenance::sha256_hex;
use issnet::stylizer::{generate_pseudo_labeled, train_stylizer, PseudoLabeledSet, StyleNet};
use issnet::IssError;
use log::info;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Iss(#[from] IssError),
    #[error("phase `{phase}` failed: {source}")]
    Phase { phase: &'static str, source: IssError },
    #[error("{0}")]
    Refused(String),
}

impl CliError {
    /// 2 for bad input or refusals, 3 for failures while computing.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Iss(e) | CliError::Phase { source: e, .. } if !e.is_validation() => 3,
            _ => 2,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

fn phase<T>(name: &'static str, r: issnet::Result<T>) -> CliResult<T> {
    r.map_err(|source| CliError::Phase { phase: name, source })
}

/// The datasets one run works on.
pub struct RunData {
    pub source: DomainDataset,
    pub styles: Vec<DomainDataset>,
    pub targets: Vec<DomainDataset>,
}

impl RunData {
    pub fn load(cfg: &RunConfig) -> issnet::Result<Self> {
        match &cfg.data.root {
            None => {
                let b = generate_benchmark(&cfg.data.benchmark)?;
                Ok(Self { source: b.source, styles: b.styles, targets: b.targets })
            }
            Some(root) => Self::from_dir(root, cfg.data.image_size),
        }
    }

    pub fn from_dir(root: &Path, size: usize) -> issnet::Result<Self> {
        let opts = FolderOptions { size };
        let subdirs = |name: &str| -> issnet::Result<Vec<PathBuf>> {
            let dir = root.join(name);
            let mut dirs: Vec<PathBuf> = fs::read_dir(&dir)
                .map_err(|e| IssError::io(&dir, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.is_dir())
                .collect();
            dirs.sort();
            Ok(dirs)
        };
        let source = load_image_folder(&root.join("source"), DatasetRole::LabeledSource, opts)?;
        let styles = subdirs("styles")?
            .iter()
            .map(|d| load_image_folder(d, DatasetRole::UnlabeledSource, opts))
            .collect::<issnet::Result<Vec<_>>>()?;
        let targets = subdirs("targets")?
            .iter()
            .map(|d| load_image_folder(d, DatasetRole::Target, opts))
            .collect::<issnet::Result<Vec<_>>>()?;
        Ok(Self { source, styles, targets })
    }

    /// Targets named in the config, or all of them.
    pub fn selected_targets(&self, cfg: &RunConfig) -> issnet::Result<Vec<&DomainDataset>> {
        let wanted = &cfg.evaluation.targets;
        if wanted.is_empty() {
            return Ok(self.targets.iter().collect());
        }
        wanted
            .iter()
            .map(|name| {
                self.targets
                    .iter()
                    .find(|t| t.name() == name)
                    .ok_or_else(|| IssError::Validation(format!("unknown target `{name}`")))
            })
            .collect()
    }
}

/// One file produced by a run, bound to the run's config hash.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: String,
    pub kind: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactIndex {
    pub config_hash: String,
    pub artifacts: Vec<Artifact>,
}

/// Reports as written to disk, stamped with the producing config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportFile {
    pub config_hash: String,
    pub reports: Vec<EvalReport>,
}

/// Collects artifacts for `artifacts.json`.
pub struct Outputs {
    dir: PathBuf,
    config_hash: String,
    artifacts: Vec<Artifact>,
}

impl Outputs {
    pub fn new(dir: &Path, cfg: &RunConfig) -> CliResult<Self> {
        fs::create_dir_all(dir).map_err(|e| IssError::io(dir, e))?;
        Ok(Self { dir: dir.to_path_buf(), config_hash: cfg.hash()?, artifacts: Vec::new() })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn config_hash(&self) -> &str {
        &self.config_hash
    }

    pub fn record(&mut self, path: &Path, kind: &str) -> CliResult<()> {
        let bytes = fs::read(path).map_err(|e| IssError::io(path, e))?;
        let rel = path.strip_prefix(&self.dir).unwrap_or(path).to_string_lossy().into_owned();
        self.artifacts.retain(|a| a.path != rel);
        self.artifacts.push(Artifact { path: rel, kind: kind.into(), sha256: sha256_hex(&bytes) });
        Ok(())
    }

    pub fn write(&mut self, name: &str, kind: &str, bytes: &[u8]) -> CliResult<PathBuf> {
        let path = self.dir.join(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| IssError::io(parent, e))?;
        }
        fs::write(&path, bytes).map_err(|e| IssError::io(&path, e))?;
        self.record(&path, kind)?;
        Ok(path)
    }

    pub fn write_json<S: Serialize>(&mut self, name: &str, kind: &str, value: &S) -> CliResult<PathBuf> {
        let text = serde_json::to_string_pretty(value).map_err(IssError::from)?;
        self.write(name, kind, text.as_bytes())
    }

    pub fn write_jsonl<S: Serialize>(&mut self, name: &str, kind: &str, rows: &[S]) -> CliResult<PathBuf> {
        let mut text = String::new();
        for r in rows {
            text.push_str(&serde_json::to_string(r).map_err(IssError::from)?);
            text.push('\n');
        }
        self.write(name, kind, text.as_bytes())
    }

    /// Writes `config.toml` and `artifacts.json`; call last.
    pub fn finish(mut self, cfg: &RunConfig) -> CliResult<ArtifactIndex> {
        self.write("config.toml", "config", cfg.to_toml_string()?.as_bytes())?;
        let index = ArtifactIndex { config_hash: self.config_hash.clone(), artifacts: self.artifacts.clone() };
        let path = self.dir.join(ARTIFACTS);
        fs::write(&path, serde_json::to_string_pretty(&index).map_err(IssError::from)?)
            .map_err(|e| IssError::io(&path, e))?;
        Ok(index)
    }
}

pub const ARTIFACTS: &str = "artifacts.json";

/// Refuses to overwrite a finished run unless forced.
pub fn guard_output(dir: &Path, force: bool) -> CliResult<()> {
    if !force && dir.join(ARTIFACTS).exists() {
        return Err(CliError::Refused(format!("{} already holds results; pass --force to overwrite", dir.display())));
    }
    Ok(())
}

/// Writes the datasets in the layout `RunData::from_dir` reads.
pub fn cmd_synth(cfg: &RunConfig, out: &Path, force: bool) -> CliResult<Value> {
    guard_output(out, force)?;
    let data = phase("synth", RunData::load(cfg))?;
    let mut outputs = Outputs::new(out, cfg)?;
    let mut manifests: Vec<DatasetManifest> = Vec::new();
    let mut write = |ds: &DomainDataset, rel: PathBuf| -> CliResult<()> {
        let files = phase("synth", write_image_folder(ds, &out.join("data").join(&rel)))?;
        for f in &files {
            outputs.record(f, "image")?;
        }
        manifests.push(ds.manifest());
        Ok(())
    };
    write(&data.source, "source".into())?;
    for s in &data.styles {
        write(s, PathBuf::from("styles").join(s.name()))?;
    }
    for t in &data.targets {
        write(t, PathBuf::from("targets").join(t.name()))?;
    }
    outputs.write_json(
        "data/manifest.json",
        "manifest",
        &json!({ "config_hash": outputs.config_hash(), "datasets": manifests }),
    )?;
    let index = outputs.finish(cfg)?;
    Ok(json!({
        "command": "synth",
        "data_dir": out.join("data"),
        "datasets": manifests.iter().map(|m| json!({"name": m.name, "role": m.role, "images": m.images})).collect::<Vec<_>>(),
        "config_hash": index.config_hash,
    }))
}

pub fn cmd_train_stylizer(cfg: &RunConfig, out: &Path, force: bool) -> CliResult<Value> {
    guard_output(out, force)?;
    let data = phase("train-stylizer", RunData::load(cfg))?;
    let mut outputs = Outputs::new(out, cfg)?;
    let net = stylizer_phase(cfg, &data, &mut outputs)?;
    let index = outputs.finish(cfg)?;
    Ok(json!({
        "command": "train-stylizer",
        "checkpoint": out.join("stylizer.ckpt"),
        "trained": net.is_trained(),
        "config_hash": index.config_hash,
    }))
}

fn stylizer_phase(cfg: &RunConfig, data: &RunData, outputs: &mut Outputs) -> CliResult<StyleNet<f32>> {
    info!("training stylizer");
    let trained = phase("train-stylizer", train_stylizer(&data.source, &data.styles, &cfg.stylizer, cfg.seed))?;
    let path = outputs.dir().join("stylizer.ckpt");
    phase("train-stylizer", save_stylizer(&path, &trained.net, &cfg.training_hash(true)?))?;
    outputs.record(&path, "stylizer_checkpoint")?;
    outputs.write_jsonl("stylizer_history.jsonl", "history", &trained.history)?;
    Ok(trained.net)
}

fn stylize_phase(
    cfg: &RunConfig,
    data: &RunData,
    net: &StyleNet<f32>,
    outputs: &mut Outputs,
) -> CliResult<PseudoLabeledSet> {
    info!("generating the pseudo-labeled set");
    let pseudo = phase(
        "stylize",
        generate_pseudo_labeled(&data.source, &data.styles, net, cfg.stylizer.alpha, cfg.stylizer.pairing, cfg.seed),
    )?;
    let dir = outputs.dir().join("pseudo");
    phase("stylize", pseudo.save(&dir))?;
    outputs.record(&dir.join("manifest.json"), "pseudo_manifest")?;
    let images = dir.join("images");
    let mut files: Vec<PathBuf> =
        fs::read_dir(&images).map_err(|e| IssError::io(&images, e))?.filter_map(|e| e.ok().map(|e| e.path())).collect();
    files.sort();
    for f in &files {
        outputs.record(f, "image")?;
    }
    Ok(pseudo)
}

pub fn cmd_stylize(cfg: &RunConfig, stylizer: &Path, out: &Path, force: bool) -> CliResult<Value> {
    guard_output(out, force)?;
    let data = phase("stylize", RunData::load(cfg))?;
    let loaded = phase("stylize", load_stylizer(stylizer))?;
    let mut outputs = Outputs::new(out, cfg)?;
    let pseudo = stylize_phase(cfg, &data, &loaded.value, &mut outputs)?;
    let index = outputs.finish(cfg)?;
    Ok(json!({
        "command": "stylize",
        "pseudo_dir": out.join("pseudo"),
        "images": pseudo.len(),
        "stylizer_hash": loaded.hash,
        "config_hash": index.config_hash,
    }))
}

fn pretrain_phase(
    cfg: &RunConfig,
    labeled: &DomainDataset,
    pseudo: &PseudoLabeledSet,
    stylize: bool,
    outputs: &mut Outputs,
) -> CliResult<(Pretrained, ReportProvenance)> {
    info!("pretraining on {} labeled + {} pseudo images", labeled.len(), pseudo.len());
    let training_hash = cfg.training_hash(stylize)?;
    let p = phase("pretrain", pretrain_for(cfg, labeled, pseudo))?;
    let path = outputs.dir().join("pretrained.ckpt");
    let checkpoint_hash = phase("pretrain", save_pretrained(&path, &p, &training_hash))?;
    outputs.record(&path, "encoder_checkpoint")?;
    outputs.write_jsonl("pretrain_history.jsonl", "history", &p.history)?;
    Ok((p, ReportProvenance { checkpoint_hash, config_hash: training_hash }))
}

pub fn cmd_pretrain(
    cfg: &RunConfig,
    labeled: Option<&Path>,
    pseudo: Option<&Path>,
    out: &Path,
    force: bool,
) -> CliResult<Value> {
    guard_output(out, force)?;
    let opts = FolderOptions { size: cfg.data.image_size };
    let source = match labeled {
        Some(dir) => phase("pretrain", load_image_folder(dir, DatasetRole::LabeledSource, opts))?,
        None => phase("pretrain", RunData::load(cfg))?.source,
    };
    let (set, stylize) = match pseudo {
        Some(dir) => (phase("pretrain", PseudoLabeledSet::load(dir, opts))?, true),
        None => (PseudoLabeledSet::empty(), false),
    };
    let mut outputs = Outputs::new(out, cfg)?;
    let (p, prov) = pretrain_phase(cfg, &source, &set, stylize, &mut outputs)?;
    let index = outputs.finish(cfg)?;
    let last = p.history.last();
    Ok(json!({
        "command": "pretrain",
        "checkpoint": out.join("pretrained.ckpt"),
        "checkpoint_hash": prov.checkpoint_hash,
        "training_hash": prov.config_hash,
        "final_loss": last.map(|h| h.loss),
        "final_accuracy": last.map(|h| h.accuracy),
        "config_hash": index.config_hash,
    }))
}

fn evaluate_phase(
    cfg: &RunConfig,
    targets: &[&DomainDataset],
    model: &Pretrained,
    provenance: &ReportProvenance,
    label: &str,
    outputs: &mut Outputs,
) -> CliResult<Vec<EvalReport>> {
    let mut reports = Vec::new();
    for target in targets {
        for &shots in &cfg.evaluation.shots {
            info!("evaluating {label} on {} ({shots}-shot)", target.name());
            let protocol = EvalProtocol {
                episodes: cfg.evaluation.episodes,
                ways: cfg.evaluation.ways,
                shots,
                queries: cfg.evaluation.queries,
                seed: cfg.seed,
                target: target.name().to_string(),
                config_hash: provenance.config_hash.clone(),
            };
            reports.push(phase("evaluate", run_protocol(model, provenance, target, &protocol, &cfg.finetune, label))?);
        }
    }
    write_reports(&reports, outputs)?;
    Ok(reports)
}

fn write_reports(reports: &[EvalReport], outputs: &mut Outputs) -> CliResult<()> {
    let file = ReportFile { config_hash: outputs.config_hash().to_string(), reports: reports.to_vec() };
    outputs.write_json("reports.json", "reports", &file)?;
    let episodes: Vec<Value> = reports
        .iter()
        .flat_map(|r| {
            r.episodes.iter().map(move |e| {
                json!({"label": r.label, "target": r.protocol.target, "shots": r.protocol.shots,
                       "episode": e.index, "seed": e.seed, "accuracy": e.accuracy})
            })
        })
        .collect();
    outputs.write_jsonl("episodes.jsonl", "episodes", &episodes)?;
    outputs.write("reports.csv", "table", reports_csv(reports).as_bytes())?;
    let plots = phase("report", emit_plots(reports, &outputs.dir().join("plots")))?;
    for f in &plots.files {
        outputs.record(f, "plot")?;
    }
    Ok(())
}

fn summary(r: &EvalReport) -> Value {
    json!({
        "label": r.label,
        "target": r.protocol.target,
        "shots": r.protocol.shots,
        "status": r.status,
        "episodes": r.episodes.len(),
        "mean": r.mean,
        "ci95": r.ci95,
        "fingerprint": r.fingerprint,
    })
}

pub fn cmd_evaluate(cfg: &RunConfig, checkpoint: &Path, label: &str, out: &Path, force: bool) -> CliResult<Value> {
    guard_output(out, force)?;
    let loaded = phase("evaluate", load_pretrained(checkpoint))?;
    let data = phase("evaluate", RunData::load(cfg))?;
    let targets = data.selected_targets(cfg)?;
    let provenance = ReportProvenance { checkpoint_hash: loaded.hash, config_hash: loaded.header.config_hash };
    let mut outputs = Outputs::new(out, cfg)?;
    let reports = evaluate_phase(cfg, &targets, &loaded.value, &provenance, label, &mut outputs)?;
    let index = outputs.finish(cfg)?;
    Ok(
        json!({ "command": "evaluate", "reports": reports.iter().map(summary).collect::<Vec<_>>(), "config_hash": index.config_hash }),
    )
}

pub struct PipelineOutcome {
    pub label: &'static str,
    pub reports: Vec<EvalReport>,
    pub artifacts: ArtifactIndex,
}

/// Stylize, pretrain, evaluate. `skip_stylize` yields the control run that
/// pretrains on the labeled source alone.
pub fn cmd_pipeline(cfg: &RunConfig, out: &Path, skip_stylize: bool, force: bool) -> CliResult<PipelineOutcome> {
    cfg.validate()?;
    guard_output(out, force)?;
    let data = phase("data", RunData::load(cfg))?;
    let targets = data.selected_targets(cfg)?;
    let mut outputs = Outputs::new(out, cfg)?;
    let pseudo = if skip_stylize {
        PseudoLabeledSet::empty()
    } else {
        let net = stylizer_phase(cfg, &data, &mut outputs)?;
        stylize_phase(cfg, &data, &net, &mut outputs)?
    };
    let (model, provenance) = pretrain_phase(cfg, &data.source, &pseudo, !skip_stylize, &mut outputs)?;
    let label = if skip_stylize { "baseline" } else { "issnet" };
    let reports = evaluate_phase(cfg, &targets, &model, &provenance, label, &mut outputs)?;
    let artifacts = outputs.finish(cfg)?;
    Ok(PipelineOutcome { label, reports, artifacts })
}

pub fn pipeline_summary(o: &PipelineOutcome) -> Value {
    json!({
        "command": "pipeline",
        "label": o.label,
        "reports": o.reports.iter().map(summary).collect::<Vec<_>>(),
        "config_hash": o.artifacts.config_hash,
    })
}

pub fn cmd_ablate(cfg: &RunConfig, out: &Path, force: bool) -> CliResult<Value> {
    cfg.validate()?;
    guard_output(out, force)?;
    let data = phase("data", RunData::load(cfg))?;
    let targets = data.selected_targets(cfg)?;
    let mut outputs = Outputs::new(out, cfg)?;
    let net = stylizer_phase(cfg, &data, &mut outputs)?;
    let pseudo = stylize_phase(cfg, &data, &net, &mut outputs)?;
    let cells = ablation_cells(&cfg.ablation.variants);
    let mut cache = ResultsCache::on_disk(out.join("cache"));
    let table = phase("ablate", run_ablation_matrix(&cells, &targets, cfg, &data.source, &pseudo, &mut cache))?;
    outputs.write_json("ablation.json", "ablation", &table)?;
    write_reports(&table.reports(), &mut outputs)?;
    let index = outputs.finish(cfg)?;
    Ok(json!({
        "command": "ablate",
        "cells": cells.len(),
        "reports": table.rows.iter().map(|r| summary(&r.report)).collect::<Vec<_>>(),
        "cache_hits": cache.report_hits,
        "config_hash": index.config_hash,
    }))
}

/// Re-plots and re-tabulates saved report files.
pub fn cmd_report(cfg: &RunConfig, inputs: &[PathBuf], out: &Path, force: bool) -> CliResult<Value> {
    guard_output(out, force)?;
    let mut reports = Vec::new();
    for path in inputs {
        if !path.exists() {
            return Err(IssError::NotFound(path.clone()).into());
        }
        let text = fs::read_to_string(path).map_err(|e| IssError::io(path, e))?;
        let file: ReportFile = serde_json::from_str(&text).map_err(IssError::from)?;
        reports.extend(file.reports);
    }
    let mut outputs = Outputs::new(out, cfg)?;
    write_reports(&reports, &mut outputs)?;
    let index = outputs.finish(cfg)?;
    Ok(json!({ "command": "report", "reports": reports.len(), "config_hash": index.config_hash }))
}

/// Re-hashes every artifact of a run directory and checks each checkpoint.
pub fn cmd_verify(dir: &Path) -> CliResult<Value> {
    let index_path = dir.join(ARTIFACTS);
    if !index_path.exists() {
        return Err(IssError::NotFound(index_path).into());
    }
    let text = fs::read_to_string(&index_path).map_err(|e| IssError::io(&index_path, e))?;
    let index: ArtifactIndex = serde_json::from_str(&text).map_err(IssError::from)?;
    let cfg = RunConfig::load(&dir.join("config.toml"))?;
    let mismatch = |m: String| CliError::Iss(IssError::Provenance(m));
    if cfg.hash()? != index.config_hash {
        return Err(mismatch("config.toml does not hash to the recorded config hash".into()));
    }
    for a in &index.artifacts {
        let path = dir.join(&a.path);
        let bytes = fs::read(&path).map_err(|e| IssError::io(&path, e))?;
        if sha256_hex(&bytes) != a.sha256 {
            return Err(mismatch(format!("{} was modified", a.path)));
        }
        match a.kind.as_str() {
            "encoder_checkpoint" | "stylizer_checkpoint" => {
                checkpoint::decode(&bytes)?;
            }
            "reports" => {
                let file: ReportFile = serde_json::from_slice(&bytes).map_err(IssError::from)?;
                if file.config_hash != index.config_hash {
                    return Err(mismatch(format!("{} carries another config hash", a.path)));
                }
            }
            _ => {}
        }
    }
    Ok(json!({ "command": "verify", "verified": index.artifacts.len(), "config_hash": index.config_hash }))
}
