use std::time::Instant;

use issnet_nn::{Real, Sgd, Tensor};
use log::info;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::encoder::{Architecture, Encoder, LinearClassifier};
use super::losses::{bsr_penalty_grad, ce_loss_grad, ntxent_loss_grad};
use crate::datasets::{augment, AugmentPolicy, DomainDataset, ImageTensor};
use crate::error::{IssError, Result};
use crate::seed::rng_for;
use crate::stylizer::PseudoLabeledSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossVariant {
    Ce,
    Bsr,
    NtxentCe,
}

impl LossVariant {
    pub fn id(self) -> &'static str {
        match self {
            LossVariant::Ce => "ce",
            LossVariant::Bsr => "bsr",
            LossVariant::NtxentCe => "ntxent_ce",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub architecture: Architecture,
    /// Base channel width of the encoder.
    pub width: usize,
    pub loss_variant: LossVariant,
    pub lambda_bsr: f64,
    pub lambda_ntxent: f64,
    pub tau: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub use_augmentation: bool,
    pub augmentation: AugmentPolicy,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            architecture: Architecture::SmallCnn,
            width: 16,
            loss_variant: LossVariant::Ce,
            lambda_bsr: 1e-3,
            lambda_ntxent: 1.0,
            tau: 0.5,
            epochs: 50,
            batch_size: 32,
            lr: 1e-3,
            momentum: 0.9,
            weight_decay: 5e-4,
            use_augmentation: false,
            augmentation: AugmentPolicy::default(),
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(IssError::Validation(m.into()));
        if !(self.lambda_bsr >= 0.0 && self.lambda_bsr.is_finite()) {
            return bad("lambda_bsr must be non-negative");
        }
        if !(self.lambda_ntxent >= 0.0 && self.lambda_ntxent.is_finite()) {
            return bad("lambda_ntxent must be non-negative");
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad("tau must be positive");
        }
        if self.batch_size == 0 || self.width == 0 {
            return bad("batch_size and width must be positive");
        }
        if !(self.lr > 0.0 && self.momentum >= 0.0 && self.weight_decay >= 0.0) {
            return bad("lr must be positive; momentum and weight_decay non-negative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
    pub wall_time: f64,
}

#[derive(Debug, Clone)]
pub struct Pretrained {
    pub encoder: Encoder<f32>,
    pub classifier: LinearClassifier<f32>,
    /// Source label behind each classifier output.
    pub label_space: Vec<usize>,
    pub history: Vec<EpochRecord>,
}

/// A failed run together with the state after the last finished epoch.
#[derive(Debug)]
pub struct PretrainFailure {
    pub error: IssError,
    pub last_good: Option<Box<Pretrained>>,
}

impl From<IssError> for PretrainFailure {
    fn from(error: IssError) -> Self {
        Self { error, last_good: None }
    }
}

impl From<issnet_nn::NnError> for PretrainFailure {
    fn from(e: issnet_nn::NnError) -> Self {
        IssError::from(e).into()
    }
}

/// Trains `enc` and a fresh linear head with SGD on `labeled ∪ pseudo`.
pub fn pretrain(
    labeled: &DomainDataset,
    pseudo: &PseudoLabeledSet,
    enc: Encoder<f32>,
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<Pretrained> {
    pretrain_checkpointed(labeled, pseudo, enc, cfg, seed).map_err(|f| f.error)
}

struct Pool<'a> {
    labeled: &'a DomainDataset,
    pseudo: &'a PseudoLabeledSet,
    targets: Vec<usize>,
}

impl Pool<'_> {
    fn image(&self, i: usize) -> &ImageTensor {
        let n = self.labeled.len();
        if i < n {
            self.labeled.image(i)
        } else {
            &self.pseudo.images[i - n]
        }
    }

    fn batch<R: Rng + ?Sized>(
        &self,
        idx: &[usize],
        policy: Option<&AugmentPolicy>,
        rng: &mut R,
    ) -> Result<Tensor<f32>> {
        match policy {
            None => ImageTensor::batch(&idx.iter().map(|&i| self.image(i)).collect::<Vec<_>>()),
            Some(p) => {
                let owned: Vec<ImageTensor> = idx.iter().map(|&i| augment(self.image(i), rng, p)).collect();
                ImageTensor::batch(&owned.iter().collect::<Vec<_>>())
            }
        }
    }
}

pub fn pretrain_checkpointed(
    labeled: &DomainDataset,
    pseudo: &PseudoLabeledSet,
    mut enc: Encoder<f32>,
    cfg: &PretrainConfig,
    seed: u64,
) -> std::result::Result<Pretrained, PretrainFailure> {
    cfg.validate()?;
    let labels = labeled.labels().ok_or_else(|| IssError::Validation("pretraining needs a labeled source".into()))?;
    let space = labeled.label_space();
    let mut pseudo_space = pseudo.labels.clone();
    pseudo_space.sort_unstable();
    pseudo_space.dedup();
    if !pseudo.is_empty() && pseudo_space != space {
        return Err(
            IssError::Validation("pseudo-labeled set and labeled source have different label spaces".into()).into()
        );
    }
    if pseudo.provenance.iter().any(|p| p.content_index >= labeled.len()) {
        return Err(IssError::Validation("pseudo-labeled provenance points outside the labeled source".into()).into());
    }
    let dense = |y: &usize| space.binary_search(y).expect("label in space");
    let targets: Vec<usize> = labels.iter().chain(&pseudo.labels).map(dense).collect();
    let pool = Pool { labeled, pseudo, targets };

    let mut rng = rng_for(seed, "pretrain", 0);
    let mut head = LinearClassifier::new(enc.embedding_dim(), space.len(), &mut rng);
    let mut enc_opt = Sgd::new(cfg.lr, cfg.momentum, cfg.weight_decay);
    let mut head_opt = Sgd::new(cfg.lr, cfg.momentum, cfg.weight_decay);
    let policy = cfg.use_augmentation.then_some(&cfg.augmentation);
    let n_l = labeled.len();
    let mut order: Vec<usize> = (0..pool.targets.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut last_good: Option<Box<Pretrained>> = None;
    let start = Instant::now();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct, mut seen, mut steps) = (0.0, 0usize, 0usize, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let x = pool.batch(chunk, policy, &mut rng)?;
            let y: Vec<usize> = chunk.iter().map(|&i| pool.targets[i]).collect();
            let pair = match cfg.loss_variant {
                LossVariant::NtxentCe => Some(contrastive_pair(&pool, chunk, n_l, &mut rng)?),
                _ => None,
            };
            let mut enc_grads = enc.net.zero_grads();
            let mut head_grads = head.zero_grads();
            let out = consistency_objective(
                &enc,
                &head,
                x,
                &y,
                pair.as_ref().map(|(rows, t)| (rows.as_slice(), t)),
                cfg,
                Some((&mut enc_grads, &mut head_grads)),
            )?;
            if !out.logits.all_finite() {
                let error = IssError::Diverged {
                    phase: "pretrain",
                    step: epoch,
                    detail: format!("non-finite logits at batch {steps}; last good epoch {}", history.len()),
                };
                return Err(PretrainFailure { error, last_good });
            }
            for (i, &t) in y.iter().enumerate() {
                if argmax(out.logits.item(i)) == t {
                    correct += 1;
                }
            }
            seen += y.len();
            let loss = out.loss;
            if !loss.is_finite() {
                let error = IssError::Diverged {
                    phase: "pretrain",
                    step: epoch,
                    detail: format!("loss {loss} at batch {steps}; last good epoch {}", history.len()),
                };
                return Err(PretrainFailure { error, last_good });
            }
            enc_opt.step(enc.net.params_mut(), &enc_grads)?;
            head_opt.step(head.params_mut(), &head_grads)?;
            loss_sum += loss;
            steps += 1;
        }
        let record = EpochRecord {
            epoch,
            loss: loss_sum / steps.max(1) as f64,
            accuracy: correct as f64 / seen.max(1) as f64,
            wall_time: start.elapsed().as_secs_f64(),
        };
        info!("pretrain epoch {epoch}: loss {:.4} acc {:.3}", record.loss, record.accuracy);
        history.push(record);
        last_good = Some(Box::new(Pretrained {
            encoder: enc.clone(),
            classifier: head.clone(),
            label_space: space.clone(),
            history: history.clone(),
        }));
    }
    Ok(Pretrained { encoder: enc, classifier: head, label_space: space, history })
}

/// Positives for NT-Xent: the batch rows holding pseudo items, paired with
/// their content images. A batch without pseudo items pairs every row with
/// an augmented view of itself.
fn contrastive_pair<R: Rng + ?Sized>(
    pool: &Pool<'_>,
    chunk: &[usize],
    n_l: usize,
    rng: &mut R,
) -> Result<(Vec<usize>, Tensor<f32>)> {
    let rows: Vec<usize> = (0..chunk.len()).filter(|&r| chunk[r] >= n_l).collect();
    if rows.is_empty() {
        let view = pool.batch(chunk, Some(&AugmentPolicy::default()), rng)?;
        return Ok(((0..chunk.len()).collect(), view));
    }
    let content: Vec<&ImageTensor> =
        rows.iter().map(|&r| pool.labeled.image(pool.pseudo.provenance[chunk[r] - n_l].content_index)).collect();
    Ok((rows, ImageTensor::batch(&content)?))
}

#[derive(Debug, Clone)]
pub struct ObjectiveOutput<T> {
    pub loss: f64,
    pub logits: Tensor<T>,
}

/// One batch of the consistency objective
/// `CE(W M(x), y) + lambda_bsr BSR(M(x)) + lambda_ntxent NTXent(M(x'), M(x)[rows])`,
/// with the term set chosen by `cfg.loss_variant`. `pair` holds the rows
/// of `x` that have a positive and the batch `x'` of those positives.
/// Gradients are added into `grads` (encoder, head) when given. Non-finite
/// logits short-circuit with a NaN loss.
pub fn consistency_objective<T: Real>(
    enc: &Encoder<T>,
    head: &LinearClassifier<T>,
    x: Tensor<T>,
    labels: &[usize],
    pair: Option<(&[usize], &Tensor<T>)>,
    cfg: &PretrainConfig,
    grads: Option<(&mut [Vec<T>], &mut [Vec<T>])>,
) -> Result<ObjectiveOutput<T>> {
    let (emb, trace) = enc.embed_traced(x)?;
    let logits = head.logits(&emb)?;
    if !logits.all_finite() {
        return Ok(ObjectiveOutput { loss: f64::NAN, logits });
    }
    let (mut loss, dlogits) = ce_loss_grad(&logits, labels)?;
    let mut head_grads = head.zero_grads();
    let mut demb = head.backward(&emb, &dlogits, &mut head_grads)?;
    let mut enc_grads = enc.net.zero_grads();
    match cfg.loss_variant {
        LossVariant::Ce => {}
        LossVariant::Bsr => {
            let (p, mut g) = bsr_penalty_grad(&emb)?;
            loss += cfg.lambda_bsr * p;
            g.scale(T::lit(cfg.lambda_bsr));
            demb.add_assign(&g)?;
        }
        LossVariant::NtxentCe => {
            if let Some((rows, positives)) = pair.filter(|(rows, _)| rows.len() >= 2) {
                if positives.batch() != rows.len() {
                    return Err(IssError::Shape(format!("{} positives for {} rows", positives.batch(), rows.len())));
                }
                let (ea, ta) = enc.embed_traced(positives.clone())?;
                let eb = Tensor::stack(&rows.iter().map(|&r| emb.item(r)).collect::<Vec<_>>(), &[emb.item_len()])?;
                let (l, mut ga, mut gb) = ntxent_loss_grad(&ea, &eb, cfg.tau)?;
                loss += cfg.lambda_ntxent * l;
                ga.scale(T::lit(cfg.lambda_ntxent));
                gb.scale(T::lit(cfg.lambda_ntxent));
                for (k, &r) in rows.iter().enumerate() {
                    for (o, &g) in demb.item_mut(r).iter_mut().zip(gb.item(k)) {
                        *o += g;
                    }
                }
                if grads.is_some() {
                    enc.net.backward(&ta, ga, Some(&mut enc_grads), false)?;
                }
            }
        }
    }
    if let Some((eg, hg)) = grads {
        enc.net.backward(&trace, demb, Some(&mut enc_grads), false)?;
        for (acc, g) in eg.iter_mut().zip(&enc_grads).chain(hg.iter_mut().zip(&head_grads)) {
            for (a, &v) in acc.iter_mut().zip(g) {
                *a += v;
            }
        }
    }
    Ok(ObjectiveOutput { loss, logits })
}

/// Index of the largest value; ties go to the lowest index.
pub(crate) fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
