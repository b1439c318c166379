//! Target-side adaptation: fine-tune the encoder on an episode's support
//! set, classify queries by nearest prototype, optionally refine by label
//! propagation.

mod propagation;

use issnet_nn::{Sgd, Tensor};
use log::warn;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::consistency::{bsr_penalty_grad, ce_loss_grad, Encoder, LinearClassifier};
use crate::datasets::{augment, AugmentPolicy, Episode, ImageTensor};
use crate::error::{IssError, Result};
use crate::seed::rng_for;

pub use propagation::{label_propagation, median_pairwise_distance};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Distance {
    SquaredEuclidean,
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// BSR weight during fine-tuning; zero gives plain CE.
    pub lambda_bsr: f64,
    pub use_augmentation: bool,
    pub augmentation: AugmentPolicy,
    pub use_label_propagation: bool,
    pub lp_alpha: f64,
    /// Affinity bandwidth; `None` uses the median pairwise query distance.
    pub lp_sigma: Option<f64>,
    pub distance: Distance,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 600,
            lr: 1e-2,
            momentum: 0.9,
            weight_decay: 1e-3,
            batch_size: 4,
            lambda_bsr: 0.0,
            use_augmentation: false,
            augmentation: AugmentPolicy::default(),
            use_label_propagation: false,
            lp_alpha: 0.99,
            lp_sigma: None,
            distance: Distance::SquaredEuclidean,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(IssError::Validation(m));
        if self.batch_size == 0 {
            return bad("finetune batch_size must be positive".into());
        }
        if !(self.lr >= 0.0 && self.momentum >= 0.0 && self.weight_decay >= 0.0 && self.lambda_bsr >= 0.0) {
            return bad("finetune lr, momentum, weight_decay and lambda_bsr must be non-negative".into());
        }
        if !(0.0..1.0).contains(&self.lp_alpha) {
            return bad(format!("lp_alpha must lie in [0, 1), got {}", self.lp_alpha));
        }
        if let Some(s) = self.lp_sigma {
            if !(s > 0.0 && s.is_finite()) {
                return bad(format!("lp_sigma must be positive, got {s}"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prototype {
    pub class_id: usize,
    pub vector: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodePrediction {
    /// `[C*Q][C]`
    pub logits: Vec<Vec<f64>>,
    pub predicted: Vec<usize>,
    pub truth: Vec<usize>,
    pub accuracy: f64,
}

impl EpisodePrediction {
    pub(crate) fn from_scores(scores: Vec<Vec<f64>>, truth: Vec<usize>) -> Self {
        let predicted: Vec<usize> = scores.iter().map(|r| argmax_f64(r)).collect();
        let hits = predicted.iter().zip(&truth).filter(|(p, t)| p == t).count();
        let accuracy = if truth.is_empty() { 0.0 } else { hits as f64 / truth.len() as f64 };
        Self { logits: scores, predicted, truth, accuracy }
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax_f64(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Fine-tunes a copy of `enc` with CE through a temporary linear head on
/// the support set only. Fails if any query pixel was read meanwhile.
pub fn finetune_on_support(
    enc: &Encoder<f32>,
    episode: &Episode,
    cfg: &FinetuneConfig,
    seed: u64,
) -> Result<Encoder<f32>> {
    cfg.validate()?;
    let query_reads = episode.query.reads();
    let mut adapted = enc.clone();
    if cfg.epochs == 0 {
        return Ok(adapted);
    }
    let support = episode.support_images();
    let labels = episode.support_labels();
    let n = support.len();
    let batch = if cfg.batch_size > n {
        warn!("finetune batch size {} exceeds the {n} support samples; using {n}", cfg.batch_size);
        n
    } else {
        cfg.batch_size
    };
    let mut rng = rng_for(seed, "finetune", 0);
    let mut head = LinearClassifier::<f32>::new(adapted.embedding_dim(), episode.ways, &mut rng);
    let mut enc_opt = Sgd::new(cfg.lr, cfg.momentum, cfg.weight_decay);
    let mut head_opt = Sgd::new(cfg.lr, cfg.momentum, cfg.weight_decay);
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let views: Vec<ImageTensor>;
        let pool: Vec<&ImageTensor> = if cfg.use_augmentation {
            views = support.iter().map(|img| augment(img, &mut rng, &cfg.augmentation)).collect();
            views.iter().collect()
        } else {
            support.iter().collect()
        };
        for chunk in order.chunks(batch) {
            let x: Tensor<f32> = ImageTensor::batch(&chunk.iter().map(|&i| pool[i]).collect::<Vec<_>>())?;
            let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let (emb, trace) = adapted.embed_traced(x)?;
            let logits = head.logits(&emb)?;
            if !logits.all_finite() {
                return Err(IssError::Diverged { phase: "finetune", step: epoch, detail: "non-finite logits".into() });
            }
            let (mut loss, dlogits) = ce_loss_grad(&logits, &y)?;
            let mut head_grads = head.zero_grads();
            let mut demb = head.backward(&emb, &dlogits, &mut head_grads)?;
            if cfg.lambda_bsr > 0.0 {
                let (p, mut g) = bsr_penalty_grad(&emb)?;
                loss += cfg.lambda_bsr * p;
                g.scale(cfg.lambda_bsr as f32);
                demb.add_assign(&g)?;
            }
            if !loss.is_finite() {
                return Err(IssError::Diverged { phase: "finetune", step: epoch, detail: format!("loss {loss}") });
            }
            let mut enc_grads = adapted.net.zero_grads();
            adapted.net.backward(&trace, demb, Some(&mut enc_grads), false)?;
            enc_opt.step(adapted.net.params_mut(), &enc_grads)?;
            head_opt.step(head.params_mut(), &head_grads)?;
        }
    }
    if episode.query.reads() != query_reads {
        return Err(IssError::Isolation("fine-tuning read query images".into()));
    }
    Ok(adapted)
}

fn embed_rows(enc: &Encoder<f32>, images: &[ImageTensor]) -> Result<Vec<Vec<f64>>> {
    let mut rows = Vec::with_capacity(images.len());
    for chunk in images.chunks(32) {
        let x = ImageTensor::batch::<f32>(&chunk.iter().collect::<Vec<_>>())?;
        let e = enc.embed(&x)?;
        if !e.all_finite() {
            return Err(IssError::Diverged { phase: "embed", step: 0, detail: "non-finite embedding".into() });
        }
        rows.extend((0..e.batch()).map(|i| e.item(i).iter().map(|&v| v as f64).collect::<Vec<f64>>()));
    }
    Ok(rows)
}

/// Mean support embedding per episode class. Members are summed in a
/// canonical (sorted) order, so support order cannot change the result.
pub fn build_prototypes(enc: &Encoder<f32>, episode: &Episode) -> Result<Vec<Prototype>> {
    let emb = embed_rows(enc, episode.support_images())?;
    prototypes_from(&emb, episode.support_labels(), episode.ways)
}

pub(crate) fn prototypes_from(emb: &[Vec<f64>], labels: &[usize], ways: usize) -> Result<Vec<Prototype>> {
    (0..ways)
        .map(|c| {
            let mut members: Vec<&Vec<f64>> = emb.iter().zip(labels).filter(|(_, &y)| y == c).map(|(e, _)| e).collect();
            if members.is_empty() {
                return Err(IssError::Validation(format!("episode class {c} has no support items")));
            }
            members.sort_by(|a, b| {
                a.iter()
                    .zip(b.iter())
                    .map(|(x, y)| x.total_cmp(y))
                    .find(|o| o.is_ne())
                    .unwrap_or(std::cmp::Ordering::Equal)
            });
            let d = members[0].len();
            let mut vector = vec![0.0; d];
            for m in &members {
                for (v, x) in vector.iter_mut().zip(m.iter()) {
                    *v += x;
                }
            }
            let k = members.len() as f64;
            vector.iter_mut().for_each(|v| *v /= k);
            Ok(Prototype { class_id: c, vector })
        })
        .collect()
}

pub(crate) fn scores(emb: &[Vec<f64>], protos: &[Prototype], distance: Distance) -> Vec<Vec<f64>> {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    emb.iter()
        .map(|q| {
            protos
                .iter()
                .map(|p| match distance {
                    Distance::SquaredEuclidean => -q.iter().zip(&p.vector).map(|(a, b)| (a - b) * (a - b)).sum::<f64>(),
                    Distance::Cosine => {
                        let dot: f64 = q.iter().zip(&p.vector).map(|(a, b)| a * b).sum();
                        dot / (norm(q) * norm(&p.vector)) - 1.0
                    }
                })
                .collect()
        })
        .collect()
}

/// Logit `(q, c) = -|emb(q) - proto_c|^2`; prediction is the argmax.
pub fn classify_queries(enc: &Encoder<f32>, prototypes: &[Prototype], episode: &Episode) -> Result<EpisodePrediction> {
    classify_with(enc, prototypes, episode, Distance::SquaredEuclidean).map(|(p, _)| p)
}

pub(crate) fn classify_with(
    enc: &Encoder<f32>,
    prototypes: &[Prototype],
    episode: &Episode,
    distance: Distance,
) -> Result<(EpisodePrediction, Vec<Vec<f64>>)> {
    if prototypes.len() != episode.ways {
        return Err(IssError::Validation(format!(
            "{} prototypes for a {}-way episode",
            prototypes.len(),
            episode.ways
        )));
    }
    let emb = embed_rows(enc, episode.query.images())?;
    let s = scores(&emb, prototypes, distance);
    Ok((EpisodePrediction::from_scores(s, episode.query.labels().to_vec()), emb))
}

/// One complete episode: adapt, build prototypes, classify, optionally
/// refine by label propagation.
pub fn run_episode(
    enc: &Encoder<f32>,
    episode: &Episode,
    cfg: &FinetuneConfig,
    seed: u64,
) -> Result<EpisodePrediction> {
    let adapted = finetune_on_support(enc, episode, cfg, seed)?;
    let protos = build_prototypes(&adapted, episode)?;
    let (pred, emb) = classify_with(&adapted, &protos, episode, cfg.distance)?;
    if !cfg.use_label_propagation {
        return Ok(pred);
    }
    let refined = label_propagation(&pred.logits, &emb, cfg.lp_alpha, cfg.lp_sigma)?;
    Ok(EpisodePrediction::from_scores(refined, pred.truth))
}
