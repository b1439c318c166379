//! Inter-source style transfer: the AdaIN network, its losses and the
//! generation of the pseudo-labeled set.

mod adain;
mod generate;
mod losses;
mod net;
mod perceptual;
mod train;

use serde::{Deserialize, Serialize};

use crate::error::{IssError, Result};

pub use adain::{adain, adain_batch, ChannelStats, FeatureMap};
pub use generate::{generate_pseudo_labeled, stylize, PairingPolicy, Provenance, PseudoLabeledSet};
pub use losses::{gram, perceptual_loss, style_loss};
pub use net::{AdainLoss, ObjectiveSpec, StyleNet};
pub use perceptual::{warm_up_encoder, PerceptualEncoder, WarmupSettings};
pub use train::{train_decoder, train_stylizer, StylizerStep, TrainedStylizer};

/// How style images are drawn from the unlabeled sources.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StyleSampling {
    /// A domain uniformly, then an image of it uniformly.
    UniformDomain,
    /// An image uniformly from the union of all domains.
    UniformPool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StylizerConfig {
    pub alpha: f64,
    pub lambda_sty: f64,
    /// 1-based perceptual encoder stages used by both losses.
    pub perceptual_layers: Vec<usize>,
    pub encoder_widths: Vec<usize>,
    /// Stage whose output is re-normalised; the decoder mirrors stages up to it.
    pub adain_stage: usize,
    pub steps: usize,
    pub batch_size: usize,
    /// Adam learning rate for the decoder.
    pub lr: f64,
    pub eps: f64,
    pub warmup_epochs: usize,
    pub warmup_lr: f64,
    pub trend_window: usize,
    pub style_sampling: StyleSampling,
    pub pairing: PairingPolicy,
}

impl Default for StylizerConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            lambda_sty: 10.0,
            perceptual_layers: vec![1, 2, 3, 4],
            encoder_widths: vec![16, 32, 64, 64],
            adain_stage: 3,
            steps: 300,
            batch_size: 8,
            lr: 1e-3,
            eps: 1e-5,
            warmup_epochs: 3,
            warmup_lr: 0.01,
            trend_window: 20,
            style_sampling: StyleSampling::UniformDomain,
            pairing: PairingPolicy::OnePerDomain,
        }
    }
}

impl StylizerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(IssError::Validation(m));
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad(format!("alpha must lie in [0, 1], got {}", self.alpha));
        }
        // Zero is accepted: it reduces the objective to reconstruction.
        if !(self.lambda_sty >= 0.0 && self.lambda_sty.is_finite()) {
            return bad(format!("lambda_sty must be non-negative, got {}", self.lambda_sty));
        }
        if self.perceptual_layers.is_empty() || self.perceptual_layers.contains(&0) {
            return bad("perceptual_layers must be non-empty 1-based stage ids".into());
        }
        let stages = self.encoder_widths.len();
        if stages == 0 || self.encoder_widths.contains(&0) {
            return bad("encoder_widths must be non-empty and positive".into());
        }
        if let Some(l) = self.perceptual_layers.iter().find(|&&l| l > stages) {
            return bad(format!("perceptual layer {l} exceeds the {stages} encoder stages"));
        }
        if self.adain_stage == 0 || self.adain_stage > stages {
            return bad(format!("adain_stage must lie in 1..={stages}"));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.lr > 0.0 && self.eps > 0.0 && self.warmup_lr > 0.0) {
            return bad("learning rates and eps must be positive".into());
        }
        Ok(())
    }
}
