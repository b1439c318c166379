use issnet_nn::{Conv2d, Grads, Layer, Real, Sequential, Tensor};
use rand::Rng;

use super::adain::{adain_batch, interpolate};
use super::losses::{perceptual_terms, style_terms};
use super::perceptual::PerceptualEncoder;
use crate::error::{IssError, Result};

/// The AdaIN network: encoder `E_A` (the first `adain_stage` stages of the
/// frozen perceptual encoder), the AdaIN layer and a trainable decoder `D_A`.
#[derive(Debug, Clone, PartialEq)]
pub struct StyleNet<T = f32> {
    pub encoder: PerceptualEncoder<T>,
    pub adain_stage: usize,
    pub decoder: Sequential<T>,
    /// Floor for the content sigma inside AdaIN.
    pub eps: f64,
    trained: bool,
    allow_untrained: bool,
}

/// Value of `l_per + lambda_sty * l_sty` and its two parts.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdainLoss {
    pub perceptual: f64,
    pub style: f64,
    pub total: f64,
}

/// Knobs of the stylizer objective.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveSpec {
    pub lambda_sty: f64,
    pub alpha: f64,
    pub eps: f64,
    pub layers: Vec<usize>,
}

impl<T: Real> StyleNet<T> {
    /// Decoder mirroring stages `adain_stage..=2` (3x3 conv, ReLU, nearest
    /// 2x upsampling each), then a 3x3 conv block and a 3x3 conv to
    /// `out_channels`.
    pub fn new<R: Rng + ?Sized>(
        encoder: PerceptualEncoder<T>,
        adain_stage: usize,
        out_channels: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if adain_stage == 0 || adain_stage > encoder.stage_count() {
            return Err(IssError::Validation(format!(
                "adain stage {adain_stage} outside 1..={}",
                encoder.stage_count()
            )));
        }
        if !encoder.is_frozen() {
            return Err(IssError::Validation("the stylizer encoder must be frozen".into()));
        }
        let mut layers = Vec::new();
        for s in (2..=adain_stage).rev() {
            let (i, o) = (encoder.channels(s), encoder.channels(s - 1));
            layers.push(Layer::Conv(Conv2d::new(i, o, 3, 1, 1, 1.0, rng)));
            layers.push(Layer::Relu);
            layers.push(Layer::Upsample2);
        }
        let c1 = encoder.channels(1);
        layers.push(Layer::Conv(Conv2d::new(c1, c1, 3, 1, 1, 1.0, rng)));
        layers.push(Layer::Relu);
        layers.push(Layer::Conv(Conv2d::new(c1, out_channels, 3, 1, 1, 1.0, rng)));
        Ok(Self {
            encoder,
            adain_stage,
            decoder: Sequential::new(layers),
            eps: 1e-5,
            trained: false,
            allow_untrained: false,
        })
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    pub(crate) fn mark_trained(&mut self) {
        self.trained = true;
    }

    /// Lets an untrained net be used for stylisation (tests, smoke runs).
    pub fn allow_untrained(mut self) -> Self {
        self.allow_untrained = true;
        self
    }

    pub(crate) fn check_usable(&self) -> Result<()> {
        if self.trained || self.allow_untrained {
            Ok(())
        } else {
            Err(IssError::Validation("stylizer is untrained".into()))
        }
    }

    pub fn encode(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.encoder.features(x, self.adain_stage)?.pop().expect("at least one stage"))
    }

    /// `D_A(alpha * AdaIN(f_c, f_s) + (1 - alpha) * f_c)`, unclamped.
    pub fn decode_mixed(&self, content: &Tensor<T>, style: &Tensor<T>, alpha: f64) -> Result<Tensor<T>> {
        let fc = self.encode(content)?;
        let fs = self.encode(style)?;
        let t = mixed_target(&fc, &fs, alpha, self.eps)?;
        Ok(self.decoder.forward(&t)?)
    }

    /// `D_A(f_c)`: the pure reconstruction path.
    pub fn reconstruct(&self, content: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.decoder.forward(&self.encode(content)?)?)
    }

    pub fn cast<U: Real>(&self) -> StyleNet<U> {
        StyleNet {
            encoder: self.encoder.cast(),
            adain_stage: self.adain_stage,
            decoder: self.decoder.cast(),
            eps: self.eps,
            trained: self.trained,
            allow_untrained: self.allow_untrained,
        }
    }

    /// Evaluates the objective on one batch of (content, style) pairs and,
    /// when `grads` is given, accumulates decoder parameter gradients.
    pub fn objective(
        &self,
        content: &Tensor<T>,
        style: &Tensor<T>,
        spec: &ObjectiveSpec,
        grads: Option<&mut Grads<T>>,
    ) -> Result<AdainLoss> {
        let depth = spec
            .layers
            .iter()
            .copied()
            .max()
            .ok_or_else(|| IssError::Validation("perceptual_layers is empty".into()))?;
        if spec.layers.contains(&0) {
            return Err(IssError::Validation("perceptual layer ids are 1-based".into()));
        }
        let depth = depth.max(self.adain_stage);
        let fc = self.encoder.features(content, depth)?;
        let fs = self.encoder.features(style, depth)?;
        let k = self.adain_stage - 1;
        let t = mixed_target(&fc[k], &fs[k], spec.alpha, spec.eps)?;
        let (generated, dec_trace) = self.decoder.forward_traced(t)?;
        if generated.shape() != content.shape() {
            return Err(IssError::Shape(format!(
                "decoder produced {:?} for input {:?}",
                generated.shape(),
                content.shape()
            )));
        }
        let (fg, enc_traces) = self.encoder.features_traced(generated, depth)?;

        let (per, per_g) = perceptual_terms(&pick(&fc, &spec.layers), &pick(&fg, &spec.layers))?;
        let (sty, sty_g) = style_terms(&pick(&fs, &spec.layers), &pick(&fg, &spec.layers))?;
        let loss = AdainLoss { perceptual: per, style: sty, total: per + spec.lambda_sty * sty };

        if let Some(grads) = grads {
            let lam = T::lit(spec.lambda_sty);
            let mut stage_grads: Vec<Option<Tensor<T>>> = vec![None; depth];
            for ((&l, mut gp), mut gs) in spec.layers.iter().zip(per_g).zip(sty_g) {
                gs.scale(lam);
                gp.add_assign(&gs)?;
                match &mut stage_grads[l - 1] {
                    Some(acc) => acc.add_assign(&gp)?,
                    slot => *slot = Some(gp),
                }
            }
            let dg = self.encoder.backward_input(&enc_traces, stage_grads)?;
            self.decoder.backward(&dec_trace, dg, Some(grads), false)?;
        }
        Ok(loss)
    }
}

fn pick<'a, T>(features: &'a [Tensor<T>], layers: &[usize]) -> Vec<&'a Tensor<T>> {
    layers.iter().map(|&l| &features[l - 1]).collect()
}

pub(crate) fn mixed_target<T: Real>(fc: &Tensor<T>, fs: &Tensor<T>, alpha: f64, eps: f64) -> Result<Tensor<T>> {
    let t = adain_batch(fc, fs, eps)?;
    Ok(if alpha == 1.0 { t } else { interpolate(&t, fc, alpha) })
}
