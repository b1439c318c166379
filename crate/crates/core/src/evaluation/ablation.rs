use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};

use super::{run_protocol, EvalProtocol, EvalReport, ReportProvenance};
use crate::checkpoint::{load_pretrained, pretrained_hash, save_pretrained};
use crate::config::RunConfig;
use crate::consistency::{pretrain, Encoder, LossVariant, Pretrained};
use crate::datasets::DomainDataset;
use crate::error::{IssError, Result};
use crate::seed::rng_for;
use crate::stylizer::PseudoLabeledSet;

/// One cell of the matrix. `variant: None` is the control row: CE on the
/// labeled source alone, no augmentation, no propagation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AblationCell {
    pub variant: Option<LossVariant>,
    pub augmentation: bool,
    pub label_propagation: bool,
}

impl AblationCell {
    pub const BASELINE: AblationCell = AblationCell { variant: None, augmentation: false, label_propagation: false };

    pub fn is_baseline(&self) -> bool {
        self.variant.is_none()
    }

    pub fn id(&self) -> String {
        match self.variant {
            None => "baseline".into(),
            Some(v) => {
                let mut s = v.id().to_string();
                if self.augmentation {
                    s.push_str("+da");
                }
                if self.label_propagation {
                    s.push_str("+lp");
                }
                s
            }
        }
    }

    /// The run configuration this cell evaluates.
    pub fn apply(&self, base: &RunConfig) -> RunConfig {
        let mut cfg = base.clone();
        cfg.pretrain.loss_variant = self.variant.unwrap_or(LossVariant::Ce);
        cfg.pretrain.use_augmentation = self.augmentation;
        cfg.finetune.use_augmentation = self.augmentation;
        cfg.finetune.use_label_propagation = self.label_propagation;
        cfg
    }
}

/// `variants x {DA off, on} x {LP off, on}` followed by the baseline.
pub fn ablation_cells(variants: &[LossVariant]) -> Vec<AblationCell> {
    let mut cells = Vec::with_capacity(variants.len() * 4 + 1);
    for &v in variants {
        for augmentation in [false, true] {
            for label_propagation in [false, true] {
                cells.push(AblationCell { variant: Some(v), augmentation, label_propagation });
            }
        }
    }
    cells.push(AblationCell::BASELINE);
    cells
}

/// Reports keyed by fingerprint and checkpoints keyed by training hash,
/// optionally mirrored on disk so an interrupted matrix resumes.
#[derive(Debug, Default)]
pub struct ResultsCache {
    dir: Option<PathBuf>,
    reports: BTreeMap<String, EvalReport>,
    checkpoints: BTreeMap<String, (Pretrained, String)>,
    pub report_hits: usize,
    pub checkpoint_hits: usize,
}

impl ResultsCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn on_disk(dir: impl Into<PathBuf>) -> Self {
        Self { dir: Some(dir.into()), ..Self::default() }
    }

    fn report_path(&self, fingerprint: &str) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join("reports").join(format!("{fingerprint}.json")))
    }

    fn checkpoint_path(&self, training_hash: &str) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join("checkpoints").join(format!("{training_hash}.ckpt")))
    }

    fn report(&mut self, fingerprint: &str) -> Result<Option<EvalReport>> {
        if let Some(r) = self.reports.get(fingerprint) {
            self.report_hits += 1;
            return Ok(Some(r.clone()));
        }
        if let Some(path) = self.report_path(fingerprint).filter(|p| p.exists()) {
            let text = fs::read_to_string(&path).map_err(|e| IssError::io(&path, e))?;
            let r: EvalReport = serde_json::from_str(&text)?;
            if r.fingerprint == fingerprint {
                self.report_hits += 1;
                self.reports.insert(fingerprint.to_string(), r.clone());
                return Ok(Some(r));
            }
        }
        Ok(None)
    }

    fn store_report(&mut self, r: &EvalReport) -> Result<()> {
        if let Some(path) = self.report_path(&r.fingerprint) {
            write_file(&path, serde_json::to_string_pretty(r)?.as_bytes())?;
        }
        self.reports.insert(r.fingerprint.clone(), r.clone());
        Ok(())
    }

    /// Returns the cached checkpoint for `training_hash` or trains one.
    fn checkpoint(
        &mut self,
        training_hash: &str,
        train: impl FnOnce() -> Result<Pretrained>,
    ) -> Result<(Pretrained, String)> {
        if let Some(hit) = self.checkpoints.get(training_hash) {
            self.checkpoint_hits += 1;
            return Ok(hit.clone());
        }
        let entry = match self.checkpoint_path(training_hash) {
            Some(path) if path.exists() => {
                let loaded = load_pretrained(&path)?;
                if loaded.header.config_hash != training_hash {
                    return Err(IssError::Provenance(format!("{} was trained under another config", path.display())));
                }
                self.checkpoint_hits += 1;
                (loaded.value, loaded.hash)
            }
            path => {
                let p = train()?;
                let hash = match path {
                    Some(path) => save_pretrained(&path, &p, training_hash)?,
                    None => pretrained_hash(&p, training_hash)?,
                };
                (p, hash)
            }
        };
        self.checkpoints.insert(training_hash.to_string(), entry.clone());
        Ok(entry)
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| IssError::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| IssError::io(path, e))
}

/// Pretrains the encoder `cfg` describes on `labeled ∪ pseudo`.
pub fn pretrain_for(cfg: &RunConfig, labeled: &DomainDataset, pseudo: &PseudoLabeledSet) -> Result<Pretrained> {
    let p = &cfg.pretrain;
    let enc =
        Encoder::new(p.architecture, labeled.image_shape()[0], p.width, &mut rng_for(cfg.seed, "encoder-init", 0))?;
    pretrain(labeled, pseudo, enc, p, cfg.seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub cell: AblationCell,
    pub report: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn reports(&self) -> Vec<EvalReport> {
        self.rows.iter().map(|r| r.report.clone()).collect()
    }

    pub fn to_csv(&self) -> String {
        super::reports_csv(&self.reports())
    }
}

/// Evaluates every cell on every target at every configured shot count.
/// Non-baseline cells pretrain on `labeled ∪ pseudo`; the baseline on
/// `labeled` alone.
pub fn run_ablation_matrix(
    cells: &[AblationCell],
    targets: &[&DomainDataset],
    base: &RunConfig,
    labeled: &DomainDataset,
    pseudo: &PseudoLabeledSet,
    cache: &mut ResultsCache,
) -> Result<AblationTable> {
    if cells.is_empty() || targets.is_empty() {
        return Err(IssError::Validation("ablation needs at least one cell and one target".into()));
    }
    let empty = PseudoLabeledSet::empty();
    let mut rows = Vec::new();
    for cell in cells {
        let cfg = cell.apply(base);
        let stylize = !cell.is_baseline();
        let training_hash = cfg.training_hash(stylize)?;
        let data = if stylize { pseudo } else { &empty };
        let (model, checkpoint_hash) = cache.checkpoint(&training_hash, || {
            info!("ablation: pretraining {}", cell.id());
            pretrain_for(&cfg, labeled, data)
        })?;
        let provenance = ReportProvenance { checkpoint_hash, config_hash: training_hash.clone() };
        for target in targets {
            for &shots in &cfg.evaluation.shots {
                let protocol = EvalProtocol {
                    episodes: cfg.evaluation.episodes,
                    ways: cfg.evaluation.ways,
                    shots,
                    queries: cfg.evaluation.queries,
                    seed: cfg.seed,
                    target: target.name().to_string(),
                    config_hash: training_hash.clone(),
                };
                let fingerprint = protocol.fingerprint(&provenance.checkpoint_hash, &cfg.finetune)?;
                let report = match cache.report(&fingerprint)? {
                    Some(r) => r,
                    None => {
                        info!("ablation: evaluating {} on {} ({shots}-shot)", cell.id(), target.name());
                        let r = run_protocol(&model, &provenance, target, &protocol, &cfg.finetune, &cell.id())?;
                        cache.store_report(&r)?;
                        r
                    }
                };
                rows.push(AblationRow { cell: *cell, report });
            }
        }
    }
    Ok(AblationTable { rows })
}
