//! The run configuration: every module's settings plus the global seed.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::consistency::{LossVariant, PretrainConfig};
use crate::datasets::BenchmarkSpec;
use crate::error::{IssError, Result};
use crate::finetune::FinetuneConfig;
use crate::provenance::canonical_hash;
use crate::stylizer::StylizerConfig;

/// Where the datasets come from. With `root` unset the synthetic benchmark
/// is generated in memory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Directory laid out as written by `synth`: `source/`, `styles/<name>/`,
    /// `targets/<name>/`.
    pub root: Option<PathBuf>,
    /// Side length images are resized to when read from `root`.
    pub image_size: usize,
    pub benchmark: BenchmarkSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { root: None, image_size: 64, benchmark: BenchmarkSpec::desk(64, 0) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSettings {
    pub episodes: usize,
    pub ways: usize,
    pub shots: Vec<usize>,
    pub queries: usize,
    /// Target names to evaluate; empty means all.
    pub targets: Vec<String>,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self { episodes: 100, ways: 5, shots: vec![1], queries: 15, targets: Vec::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationSettings {
    pub variants: Vec<LossVariant>,
}

impl Default for AblationSettings {
    fn default() -> Self {
        Self { variants: vec![LossVariant::Ce, LossVariant::Bsr, LossVariant::NtxentCe] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Output directory. Not part of the hash: moving results does not
    /// change what produced them.
    #[serde(skip_serializing)]
    pub out_dir: Option<PathBuf>,
    pub data: DataConfig,
    pub stylizer: StylizerConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub evaluation: EvalSettings,
    pub ablation: AblationSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::desk()
    }
}

/// The part of a run that determines a pretrained checkpoint.
#[derive(Serialize)]
struct TrainingKey<'a> {
    seed: u64,
    data: &'a DataConfig,
    stylizer: Option<&'a StylizerConfig>,
    pretrain: &'a PretrainConfig,
}

impl RunConfig {
    /// Settings sized for a single laptop core on the synthetic benchmark.
    pub fn desk() -> Self {
        Self {
            seed: 0,
            out_dir: None,
            data: DataConfig::default(),
            stylizer: StylizerConfig { steps: 150, ..Default::default() },
            pretrain: PretrainConfig { width: 8, epochs: 80, lr: 0.01, ..Default::default() },
            finetune: FinetuneConfig { epochs: 10, ..Default::default() },
            evaluation: EvalSettings::default(),
            ablation: AblationSettings::default(),
        }
    }

    /// A seconds-scale run on 16x16 images, for smoke tests.
    pub fn smoke() -> Self {
        let mut cfg = Self::desk();
        cfg.data = DataConfig { root: None, image_size: 16, benchmark: BenchmarkSpec::desk(16, 0) };
        cfg.stylizer.steps = 4;
        cfg.stylizer.warmup_epochs = 1;
        cfg.stylizer.encoder_widths = vec![4, 8, 8, 8];
        cfg.pretrain.width = 4;
        cfg.pretrain.epochs = 2;
        cfg.finetune.epochs = 2;
        cfg.evaluation.episodes = 3;
        cfg.evaluation.targets = vec!["target_shifted".into()];
        cfg
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| IssError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(IssError::NotFound(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| IssError::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| IssError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.stylizer.validate()?;
        self.pretrain.validate()?;
        self.finetune.validate()?;
        let e = &self.evaluation;
        if e.episodes == 0 || e.ways == 0 || e.shots.is_empty() || e.shots.contains(&0) {
            return Err(IssError::Validation("evaluation needs episodes, ways and shots >= 1".into()));
        }
        if self.ablation.variants.is_empty() {
            return Err(IssError::Validation("ablation needs at least one loss variant".into()));
        }
        Ok(())
    }

    /// Content hash of the whole configuration (key order independent).
    pub fn hash(&self) -> Result<String> {
        canonical_hash(self)
    }

    /// Hash of everything that shapes a pretrained checkpoint. `stylize`
    /// false drops the stylizer section: the baseline never uses it.
    pub fn training_hash(&self, stylize: bool) -> Result<String> {
        canonical_hash(&TrainingKey {
            seed: self.seed,
            data: &self.data,
            stylizer: stylize.then_some(&self.stylizer),
            pretrain: &self.pretrain,
        })
    }
}
