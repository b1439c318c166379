use issnet_nn::{Conv2d, Layer, Linear, Real, SeqTrace, Sequential, Sgd, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;

use crate::consistency::ce_loss_grad;
use crate::datasets::{DomainDataset, ImageTensor};
use crate::error::{IssError, Result};
use crate::seed::rng_for;

/// Convolutional feature extractor `phi`: stage `i` (1-based) emits
/// `phi_i`. Stage 1 keeps full resolution; every later stage halves it.
#[derive(Debug, Clone, PartialEq)]
pub struct PerceptualEncoder<T = f32> {
    stages: Vec<Sequential<T>>,
    channels: Vec<usize>,
    frozen: bool,
}

impl<T: Real> PerceptualEncoder<T> {
    pub fn new<R: Rng + ?Sized>(in_channels: usize, widths: &[usize], rng: &mut R) -> Result<Self> {
        if widths.is_empty() || widths.contains(&0) {
            return Err(IssError::Validation("perceptual encoder needs positive stage widths".into()));
        }
        let mut prev = in_channels;
        let mut stages = Vec::with_capacity(widths.len());
        for (i, &w) in widths.iter().enumerate() {
            let mut layers = Vec::new();
            if i > 0 {
                layers.push(Layer::MaxPool2);
            }
            layers.push(Layer::Conv(Conv2d::new(prev, w, 3, 1, 1, 1.0, rng)));
            layers.push(Layer::Relu);
            stages.push(Sequential::new(layers));
            prev = w;
        }
        Ok(Self { stages, channels: widths.to_vec(), frozen: false })
    }

    /// Wraps externally supplied (e.g. pretrained) stages. `channels[i]` is
    /// the channel count emitted by stage `i + 1`. The result is frozen.
    pub fn from_stages(stages: Vec<Sequential<T>>, channels: Vec<usize>) -> Result<Self> {
        if stages.is_empty() || stages.len() != channels.len() {
            return Err(IssError::Validation(format!("{} stages but {} channel counts", stages.len(), channels.len())));
        }
        Ok(Self { stages, channels, frozen: true })
    }

    pub fn stage_count(&self) -> usize {
        self.stages.len()
    }

    pub fn stages(&self) -> &[Sequential<T>] {
        &self.stages
    }

    /// Channels emitted by 1-based stage `id`.
    pub fn channels(&self, id: usize) -> usize {
        self.channels[id - 1]
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn stages_mut(&mut self) -> Result<&mut [Sequential<T>]> {
        if self.frozen {
            return Err(IssError::Validation("perceptual encoder is frozen".into()));
        }
        Ok(&mut self.stages)
    }

    fn check_depth(&self, upto: usize) -> Result<()> {
        if upto == 0 || upto > self.stages.len() {
            return Err(IssError::Validation(format!(
                "stage {upto} requested from a {}-stage encoder",
                self.stages.len()
            )));
        }
        Ok(())
    }

    /// Activations of stages `1..=upto`.
    pub fn features(&self, x: &Tensor<T>, upto: usize) -> Result<Vec<Tensor<T>>> {
        self.check_depth(upto)?;
        let mut out: Vec<Tensor<T>> = Vec::with_capacity(upto);
        for stage in &self.stages[..upto] {
            let y = stage.forward(out.last().unwrap_or(x))?;
            out.push(y);
        }
        Ok(out)
    }

    pub fn features_traced(&self, x: Tensor<T>, upto: usize) -> Result<(Vec<Tensor<T>>, Vec<SeqTrace<T>>)> {
        self.check_depth(upto)?;
        let mut out: Vec<Tensor<T>> = Vec::with_capacity(upto);
        let mut traces = Vec::with_capacity(upto);
        let mut input = x;
        for stage in &self.stages[..upto] {
            let (y, t) = stage.forward_traced(input)?;
            input = y.clone();
            out.push(y);
            traces.push(t);
        }
        Ok((out, traces))
    }

    /// Gradient with respect to the encoder input, given gradients on any
    /// subset of the traced stage outputs. Parameters are never touched.
    pub fn backward_input(&self, traces: &[SeqTrace<T>], mut stage_grads: Vec<Option<Tensor<T>>>) -> Result<Tensor<T>> {
        if traces.is_empty() || traces.len() != stage_grads.len() {
            return Err(IssError::Shape("stage gradients do not match traces".into()));
        }
        let mut g: Option<Tensor<T>> = None;
        for s in (0..traces.len()).rev() {
            let mut upstream = match (g.take(), stage_grads[s].take()) {
                (Some(a), Some(b)) => {
                    let mut a = a;
                    a.add_assign(&b)?;
                    Some(a)
                }
                (a, b) => a.or(b),
            };
            let Some(up) = upstream.take() else { continue };
            g = self.stages[s].backward(&traces[s], up, None, true)?;
        }
        g.ok_or_else(|| IssError::Shape("no stage received a gradient".into()))
    }

    pub fn cast<U: Real>(&self) -> PerceptualEncoder<U> {
        PerceptualEncoder {
            stages: self.stages.iter().map(|s| s.cast()).collect(),
            channels: self.channels.clone(),
            frozen: self.frozen,
        }
    }

    pub fn flat_params(&self) -> Vec<T> {
        self.stages.iter().flat_map(|s| s.flat_params()).collect()
    }

    pub fn num_params(&self) -> usize {
        self.stages.iter().map(|s| s.num_params()).sum()
    }

    /// Restores parameters saved with [`Self::flat_params`], frozen or not.
    pub(crate) fn load_flat_params(&mut self, flat: &[T]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(IssError::Shape(format!(
                "perceptual encoder has {} parameters, got {}",
                self.num_params(),
                flat.len()
            )));
        }
        let mut offset = 0;
        for s in &mut self.stages {
            let n = s.num_params();
            s.load_flat_params(&flat[offset..offset + n])?;
            offset += n;
        }
        Ok(())
    }
}

/// Settings for the short classification warm-up that gives the perceptual
/// encoder meaningful features before it is frozen.
#[derive(Debug, Clone, PartialEq)]
pub struct WarmupSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

/// Trains the encoder stages with a temporary global-pool + linear head on
/// the labeled source, then freezes the encoder. Returns per-epoch mean loss.
pub fn warm_up_encoder(
    enc: &mut PerceptualEncoder<f32>,
    labeled: &DomainDataset,
    s: &WarmupSettings,
) -> Result<Vec<f64>> {
    let labels = labeled
        .labels()
        .ok_or_else(|| IssError::Validation("encoder warm-up needs a labeled dataset".into()))?
        .to_vec();
    let space = labeled.label_space();
    let dense: Vec<usize> = labels.iter().map(|y| space.binary_search(y).expect("label in space")).collect();
    let mut rng = rng_for(s.seed, "perceptual-warmup", 0);
    let last = *enc.channels.last().expect("non-empty");

    let mut layers: Vec<Layer<f32>> = enc.stages_mut()?.iter().flat_map(|st| st.layers.clone()).collect();
    let split: Vec<usize> = enc.stages.iter().map(|st| st.layers.len()).collect();
    layers.push(Layer::GlobalAvgPool);
    layers.push(Layer::Linear(Linear::new(last, space.len(), 1.0, &mut rng)));
    let mut net = Sequential::new(layers);
    let mut opt = Sgd::new(s.lr, 0.9, 5e-4);
    let batch = s.batch_size.max(1);
    let mut order: Vec<usize> = (0..labeled.len()).collect();
    let mut history = Vec::with_capacity(s.epochs);
    for epoch in 0..s.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut steps = 0;
        for chunk in order.chunks(batch) {
            let imgs: Vec<&ImageTensor> = chunk.iter().map(|&i| labeled.image(i)).collect();
            let x = ImageTensor::batch::<f32>(&imgs)?;
            let y: Vec<usize> = chunk.iter().map(|&i| dense[i]).collect();
            let (logits, trace) = net.forward_traced(x)?;
            let (loss, g) = ce_loss_grad(&logits, &y)?;
            if !loss.is_finite() {
                return Err(IssError::Diverged {
                    phase: "perceptual warm-up",
                    step: epoch,
                    detail: format!("loss {loss}"),
                });
            }
            let mut grads = net.zero_grads();
            net.backward(&trace, g, Some(&mut grads), false)?;
            opt.step(net.params_mut(), &grads)?;
            total += loss;
            steps += 1;
        }
        history.push(total / steps.max(1) as f64);
    }

    let mut it = net.layers.into_iter();
    for (stage, n) in enc.stages.iter_mut().zip(split) {
        stage.layers = it.by_ref().take(n).collect();
    }
    enc.freeze();
    Ok(history)
}
