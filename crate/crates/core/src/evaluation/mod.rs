//! The episodic protocol, its reports, the ablation matrix and plots.

mod ablation;
mod plots;
mod stats;

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::pretrained_hash;
use crate::consistency::Pretrained;
use crate::datasets::{check_feasible, sample_episode, DomainDataset, Episode};
use crate::error::{IssError, Result};
use crate::finetune::{run_episode, FinetuneConfig};
use crate::provenance::canonical_hash;
use crate::seed::{derive_seed, rng_for};

pub use ablation::{
    ablation_cells, pretrain_for, run_ablation_matrix, AblationCell, AblationRow, AblationTable, ResultsCache,
};
pub use plots::{emit_plots, PlotEntry, PlotOutput};
pub use stats::{summarize, Summary};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalProtocol {
    pub episodes: usize,
    pub ways: usize,
    pub shots: usize,
    pub queries: usize,
    pub seed: u64,
    pub target: String,
    /// Training hash of the configuration that produced the checkpoint.
    pub config_hash: String,
}

impl EvalProtocol {
    pub fn validate(&self) -> Result<()> {
        if self.episodes == 0 || self.ways == 0 || self.shots == 0 {
            return Err(IssError::Validation("protocol needs episodes, ways and shots >= 1".into()));
        }
        Ok(())
    }

    /// Seed of episode `index`; sampling and fine-tuning both derive from it.
    pub fn episode_seed(&self, index: usize) -> u64 {
        derive_seed(self.seed, "episode", index as u64)
    }

    pub fn sample(&self, target: &DomainDataset, index: usize) -> Result<Episode> {
        let mut rng = rng_for(self.episode_seed(index), "sample", 0);
        sample_episode(target, self.ways, self.shots, self.queries, &mut rng)
    }

    /// Binds the protocol, the checkpoint and every fine-tuning knob.
    pub fn fingerprint(&self, checkpoint_hash: &str, finetune: &FinetuneConfig) -> Result<String> {
        #[derive(Serialize)]
        struct Key<'a> {
            protocol: &'a EvalProtocol,
            checkpoint_hash: &'a str,
            finetune: &'a FinetuneConfig,
        }
        canonical_hash(&Key { protocol: self, checkpoint_hash, finetune })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportProvenance {
    pub checkpoint_hash: String,
    pub config_hash: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportStatus {
    Complete,
    /// The target cannot supply the requested episodes.
    NotApplicable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub index: usize,
    pub seed: u64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    pub status: ReportStatus,
    pub reason: Option<String>,
    pub episodes: Vec<EpisodeRecord>,
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub ci95: Option<f64>,
    pub protocol: EvalProtocol,
    pub finetune: FinetuneConfig,
    pub fingerprint: String,
    pub wall_time: f64,
    pub provenance: ReportProvenance,
}

impl EvalReport {
    pub fn accuracies(&self) -> Vec<f64> {
        self.episodes.iter().map(|e| e.accuracy).collect()
    }

    pub fn is_complete(&self) -> bool {
        self.status == ReportStatus::Complete
    }
}

/// Runs `protocol.episodes` independent episodes, each fine-tuning a fresh
/// copy of the pretrained encoder. An infeasible target yields an N/A
/// report; provenance that does not match the model or protocol is an error.
pub fn run_protocol(
    pretrained: &Pretrained,
    provenance: &ReportProvenance,
    target: &DomainDataset,
    protocol: &EvalProtocol,
    finetune: &FinetuneConfig,
    label: &str,
) -> Result<EvalReport> {
    protocol.validate()?;
    finetune.validate()?;
    if provenance.config_hash != protocol.config_hash {
        return Err(IssError::Provenance(format!(
            "checkpoint was trained under config {} but the protocol expects {}",
            provenance.config_hash, protocol.config_hash
        )));
    }
    let actual = pretrained_hash(pretrained, &provenance.config_hash)?;
    if actual != provenance.checkpoint_hash {
        return Err(IssError::Provenance(format!(
            "model hashes to {actual}, provenance claims {}",
            provenance.checkpoint_hash
        )));
    }
    if protocol.target != target.name() {
        return Err(IssError::Validation(format!(
            "protocol targets `{}` but dataset is `{}`",
            protocol.target,
            target.name()
        )));
    }
    let fingerprint = protocol.fingerprint(&provenance.checkpoint_hash, finetune)?;
    let start = Instant::now();
    let mut report = EvalReport {
        label: label.to_string(),
        status: ReportStatus::Complete,
        reason: None,
        episodes: Vec::new(),
        mean: None,
        std: None,
        ci95: None,
        protocol: protocol.clone(),
        finetune: finetune.clone(),
        fingerprint,
        wall_time: 0.0,
        provenance: provenance.clone(),
    };
    if let Err(e) = check_feasible(target, protocol.ways, protocol.shots, protocol.queries) {
        report.status = ReportStatus::NotApplicable;
        report.reason = Some(e.to_string());
        return Ok(report);
    }

    let mut episodes = (0..protocol.episodes)
        .into_par_iter()
        .map(|index| {
            let ep = protocol.sample(target, index)?;
            let seed = protocol.episode_seed(index);
            let pred = run_episode(&pretrained.encoder, &ep, finetune, seed)?;
            Ok(EpisodeRecord { index, seed, accuracy: pred.accuracy })
        })
        .collect::<Result<Vec<_>>>()?;
    episodes.sort_by_key(|e| e.index);
    let s = summarize(&episodes.iter().map(|e| e.accuracy).collect::<Vec<_>>())?;
    report.episodes = episodes;
    report.mean = Some(s.mean);
    report.std = Some(s.std);
    report.ci95 = Some(s.ci95);
    report.wall_time = start.elapsed().as_secs_f64();
    Ok(report)
}

/// One CSV line per report.
pub fn reports_csv(reports: &[EvalReport]) -> String {
    let fmt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_else(|| "N/A".into());
    let mut out = String::from("label,target,ways,shots,episodes,status,mean,ci95,fingerprint\n");
    for r in reports {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.label,
            r.protocol.target,
            r.protocol.ways,
            r.protocol.shots,
            r.episodes.len(),
            match r.status {
                ReportStatus::Complete => "complete",
                ReportStatus::NotApplicable => "n/a",
            },
            fmt(r.mean),
            fmt(r.ci95),
            r.fingerprint
        ));
    }
    out
}
