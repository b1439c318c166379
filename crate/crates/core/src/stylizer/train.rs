use issnet_nn::{Adam, Tensor};
use log::{info, warn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::net::{AdainLoss, ObjectiveSpec, StyleNet};
use super::perceptual::{warm_up_encoder, PerceptualEncoder, WarmupSettings};
use super::{StyleSampling, StylizerConfig};
use crate::datasets::{DomainDataset, ImageTensor};
use crate::error::{IssError, Result};
use crate::seed::rng_for;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StylizerStep {
    pub step: usize,
    pub perceptual: f64,
    pub style: f64,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct TrainedStylizer {
    pub net: StyleNet<f32>,
    pub history: Vec<StylizerStep>,
    /// Mean loss of the perceptual encoder warm-up, per epoch.
    pub warmup_history: Vec<f64>,
}

impl TrainedStylizer {
    /// Whether the last `window` totals average below the first `window`.
    pub fn trend_decreasing(&self, window: usize) -> bool {
        trend_decreasing(&self.history, window)
    }
}

pub(crate) fn trend_decreasing(history: &[StylizerStep], window: usize) -> bool {
    let w = window.clamp(1, (history.len() / 2).max(1));
    if history.len() < 2 {
        return false;
    }
    let mean = |s: &[StylizerStep]| s.iter().map(|h| h.total).sum::<f64>() / s.len() as f64;
    mean(&history[history.len() - w..]) < mean(&history[..w])
}

fn check_inputs(labeled: &DomainDataset, styles: &[DomainDataset]) -> Result<()> {
    if styles.is_empty() {
        return Err(IssError::Validation("at least one style domain is required".into()));
    }
    if labeled.is_empty() || styles.iter().any(|s| s.is_empty()) {
        return Err(IssError::Validation("stylizer datasets must be non-empty".into()));
    }
    let shape = labeled.image_shape();
    if let Some(s) = styles.iter().find(|s| s.image_shape() != shape) {
        return Err(IssError::Shape(format!(
            "style domain `{}` has images {:?}, content has {:?}",
            s.name(),
            s.image_shape(),
            shape
        )));
    }
    Ok(())
}

pub(crate) fn pick_style<'a, R: Rng + ?Sized>(
    styles: &'a [DomainDataset],
    sampling: StyleSampling,
    rng: &mut R,
) -> (usize, usize, &'a ImageTensor) {
    match sampling {
        StyleSampling::UniformDomain => {
            let d = rng.random_range(0..styles.len());
            let i = rng.random_range(0..styles[d].len());
            (d, i, styles[d].image(i))
        }
        StyleSampling::UniformPool => {
            let total: usize = styles.iter().map(|s| s.len()).sum();
            let mut i = rng.random_range(0..total);
            let mut d = 0;
            while i >= styles[d].len() {
                i -= styles[d].len();
                d += 1;
            }
            (d, i, styles[d].image(i))
        }
    }
}

/// Builds and warms up the perceptual encoder, then trains the decoder.
pub fn train_stylizer(
    labeled: &DomainDataset,
    styles: &[DomainDataset],
    cfg: &StylizerConfig,
    seed: u64,
) -> Result<TrainedStylizer> {
    cfg.validate()?;
    check_inputs(labeled, styles)?;
    let mut rng = rng_for(seed, "stylizer-init", 0);
    let channels = labeled.image_shape()[0];
    let mut enc = PerceptualEncoder::new(channels, &cfg.encoder_widths, &mut rng)?;
    let warmup =
        WarmupSettings { epochs: cfg.warmup_epochs, batch_size: cfg.batch_size.max(16), lr: cfg.warmup_lr, seed };
    let warmup_history = warm_up_encoder(&mut enc, labeled, &warmup)?;
    let net = StyleNet::new(enc, cfg.adain_stage, channels, &mut rng)?;
    let mut trained = train_decoder(net, labeled, styles, cfg, seed)?;
    trained.warmup_history = warmup_history;
    Ok(trained)
}

/// Trains the decoder of `net` (its encoder stays frozen) with Adam on
/// `l_per + lambda_sty * l_sty`.
pub fn train_decoder(
    mut net: StyleNet<f32>,
    labeled: &DomainDataset,
    styles: &[DomainDataset],
    cfg: &StylizerConfig,
    seed: u64,
) -> Result<TrainedStylizer> {
    cfg.validate()?;
    check_inputs(labeled, styles)?;
    let spec = ObjectiveSpec {
        lambda_sty: cfg.lambda_sty,
        alpha: cfg.alpha,
        eps: cfg.eps,
        layers: cfg.perceptual_layers.clone(),
    };
    net.eps = cfg.eps;
    let frozen = net.encoder.flat_params();
    let mut opt = Adam::new(cfg.lr);
    let mut rng = rng_for(seed, "stylizer-batches", 0);
    let mut history = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let (content, style) = sample_pair_batch(labeled, styles, cfg, &mut rng)?;
        let mut grads = net.decoder.zero_grads();
        let loss = net.objective(&content, &style, &spec, Some(&mut grads))?;
        if !loss.total.is_finite() || grads.iter().flatten().any(|g| !g.is_finite()) {
            return Err(divergence(&net, &history, step, loss));
        }
        opt.step(net.decoder.params_mut(), &grads)?;
        history.push(StylizerStep { step, perceptual: loss.perceptual, style: loss.style, total: loss.total });
        if step % 50 == 0 {
            info!("stylizer step {step}: per {:.4} sty {:.4} total {:.4}", loss.perceptual, loss.style, loss.total);
        }
    }
    debug_assert_eq!(frozen, net.encoder.flat_params());
    if cfg.steps > 0 && !trend_decreasing(&history, cfg.trend_window) {
        warn!("stylizer loss did not decrease over {} steps", cfg.steps);
    }
    net.mark_trained();
    Ok(TrainedStylizer { net, history, warmup_history: Vec::new() })
}

fn sample_pair_batch<R: Rng + ?Sized>(
    labeled: &DomainDataset,
    styles: &[DomainDataset],
    cfg: &StylizerConfig,
    rng: &mut R,
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let mut content = Vec::with_capacity(cfg.batch_size);
    let mut style = Vec::with_capacity(cfg.batch_size);
    for _ in 0..cfg.batch_size {
        content.push(labeled.image(rng.random_range(0..labeled.len())));
        style.push(pick_style(styles, cfg.style_sampling, rng).2);
    }
    Ok((ImageTensor::batch(&content)?, ImageTensor::batch(&style)?))
}

fn divergence(net: &StyleNet<f32>, history: &[StylizerStep], step: usize, loss: AdainLoss) -> IssError {
    let norm: f64 = net.decoder.flat_params().iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
    let last = history.last().map(|h| format!("{:.6}", h.total)).unwrap_or_else(|| "none".into());
    IssError::Diverged {
        phase: "train_stylizer",
        step,
        detail: format!(
            "loss per={} sty={} total={}; last finite total {last}; decoder param norm {norm:.4}",
            loss.perceptual, loss.style, loss.total
        ),
    }
}
