use issnet_nn::{Conv2d, Layer, Linear, Real, Residual, SeqTrace, Sequential, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{IssError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Architecture {
    SmallCnn,
    Resnet10Like,
    Resnet12Like,
}

impl Architecture {
    pub fn id(self) -> &'static str {
        match self {
            Architecture::SmallCnn => "small-cnn",
            Architecture::Resnet10Like => "resnet10-like",
            Architecture::Resnet12Like => "resnet12-like",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "small-cnn" => Ok(Architecture::SmallCnn),
            "resnet10-like" => Ok(Architecture::Resnet10Like),
            "resnet12-like" => Ok(Architecture::Resnet12Like),
            other => Err(IssError::Validation(format!("unknown architecture `{other}`"))),
        }
    }
}

fn conv<T: Real, R: Rng + ?Sized>(i: usize, o: usize, k: usize, s: usize, gain: f64, rng: &mut R) -> Layer<T> {
    Layer::Conv(Conv2d::new(i, o, k, s, k / 2, gain, rng))
}

/// Basic block: two 3x3 convs, strided 1x1 projection when the shape changes.
fn basic_block<T: Real, R: Rng + ?Sized>(i: usize, o: usize, stride: usize, rng: &mut R) -> Layer<T> {
    let main = Sequential::new(vec![conv(i, o, 3, stride, 1.0, rng), Layer::Relu, conv(o, o, 3, 1, 0.5, rng)]);
    let shortcut = (i != o || stride != 1).then(|| Sequential::new(vec![conv(i, o, 1, stride, 1.0, rng)]));
    Layer::Residual(Box::new(Residual { main, shortcut }))
}

/// Three 3x3 convs with a 1x1 projection, followed by 2x2 max-pooling.
fn resnet12_block<T: Real, R: Rng + ?Sized>(i: usize, o: usize, rng: &mut R) -> Vec<Layer<T>> {
    let main = Sequential::new(vec![
        conv(i, o, 3, 1, 1.0, rng),
        Layer::Relu,
        conv(o, o, 3, 1, 1.0, rng),
        Layer::Relu,
        conv(o, o, 3, 1, 0.5, rng),
    ]);
    let shortcut = Some(Sequential::new(vec![conv(i, o, 1, 1, 1.0, rng)]));
    vec![Layer::Residual(Box::new(Residual { main, shortcut })), Layer::MaxPool2]
}

/// Embedding network `M`: images `[B, c, h, w]` to embeddings `[B, d]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder<T = f32> {
    pub arch: Architecture,
    pub width: usize,
    pub in_channels: usize,
    pub net: Sequential<T>,
}

impl<T: Real> Encoder<T> {
    pub fn new<R: Rng + ?Sized>(arch: Architecture, in_channels: usize, width: usize, rng: &mut R) -> Result<Self> {
        if width == 0 || in_channels == 0 {
            return Err(IssError::Validation("encoder width and input channels must be positive".into()));
        }
        let w = width;
        let mut layers = Vec::new();
        match arch {
            Architecture::SmallCnn => {
                let mut prev = in_channels;
                for o in [w, 2 * w, 4 * w, 4 * w] {
                    layers.extend([conv(prev, o, 3, 1, 1.0, rng), Layer::Relu, Layer::MaxPool2]);
                    prev = o;
                }
            }
            Architecture::Resnet10Like => {
                layers.extend([conv(in_channels, w, 3, 1, 1.0, rng), Layer::Relu, Layer::MaxPool2]);
                let mut prev = w;
                for (o, s) in [(w, 1), (2 * w, 2), (4 * w, 2), (8 * w, 2)] {
                    layers.push(basic_block(prev, o, s, rng));
                    prev = o;
                }
            }
            Architecture::Resnet12Like => {
                let mut prev = in_channels;
                for o in [w, 2 * w, 4 * w, 8 * w] {
                    layers.extend(resnet12_block(prev, o, rng));
                    prev = o;
                }
            }
        }
        layers.push(Layer::GlobalAvgPool);
        Ok(Self { arch, width, in_channels, net: Sequential::new(layers) })
    }

    pub fn embedding_dim(&self) -> usize {
        match self.arch {
            Architecture::SmallCnn => 4 * self.width,
            Architecture::Resnet10Like | Architecture::Resnet12Like => 8 * self.width,
        }
    }

    pub fn embed(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.net.forward(x)?)
    }

    pub fn embed_traced(&self, x: Tensor<T>) -> Result<(Tensor<T>, SeqTrace<T>)> {
        Ok(self.net.forward_traced(x)?)
    }

    pub fn cast<U: Real>(&self) -> Encoder<U> {
        Encoder { arch: self.arch, width: self.width, in_channels: self.in_channels, net: self.net.cast() }
    }
}

/// Linear head `W` over encoder embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearClassifier<T = f32> {
    pub layer: Linear<T>,
}

impl<T: Real> LinearClassifier<T> {
    pub fn new<R: Rng + ?Sized>(embedding_dim: usize, num_classes: usize, rng: &mut R) -> Self {
        Self { layer: Linear::new(embedding_dim, num_classes, 1.0, rng) }
    }

    pub fn num_classes(&self) -> usize {
        self.layer.out_features
    }

    pub fn logits(&self, emb: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.layer.forward(emb)?)
    }

    /// Accumulates weight/bias gradients into `grads` and returns the
    /// embedding gradient.
    pub fn backward(&self, emb: &Tensor<T>, grad: &Tensor<T>, grads: &mut [Vec<T>]) -> Result<Tensor<T>> {
        Ok(self.layer.backward(emb, grad, Some(grads), true)?.expect("input grad requested"))
    }

    pub fn params_mut(&mut self) -> Vec<&mut Vec<T>> {
        vec![&mut self.layer.weight, &mut self.layer.bias]
    }

    pub fn zero_grads(&self) -> Vec<Vec<T>> {
        vec![vec![T::zero(); self.layer.weight.len()], vec![T::zero(); self.layer.bias.len()]]
    }
}
