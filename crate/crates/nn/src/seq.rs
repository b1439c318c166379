use crate::error::{NnError, Result};
use crate::layers::{Layer, Trace};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Sequential<T> {
    pub layers: Vec<Layer<T>>,
}

#[derive(Debug, Clone)]
pub struct SeqTrace<T>(Vec<Trace<T>>);

/// Gradient buffers laid out like [`Sequential::params`].
pub type Grads<T> = Vec<Vec<T>>;

impl<T: Real> Sequential<T> {
    pub fn new(layers: Vec<Layer<T>>) -> Self {
        Self { layers }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut layers = self.layers.iter();
        let Some(first) = layers.next() else {
            return Ok(x.clone());
        };
        let mut y = first.forward(x)?;
        for layer in layers {
            y = layer.forward(&y)?;
        }
        Ok(y)
    }

    pub fn forward_traced(&self, x: Tensor<T>) -> Result<(Tensor<T>, SeqTrace<T>)> {
        let mut traces = Vec::with_capacity(self.layers.len());
        let mut y = x;
        for layer in &self.layers {
            let (next, t) = layer.forward_traced(y)?;
            traces.push(t);
            y = next;
        }
        Ok((y, SeqTrace(traces)))
    }

    /// Back-propagates `grad` (w.r.t. the output of the traced call).
    ///
    /// Parameter gradients are accumulated into `grads` when given; the input
    /// gradient is returned only when `input_grad` is set.
    pub fn backward(
        &self,
        trace: &SeqTrace<T>,
        grad: Tensor<T>,
        mut grads: Option<&mut [Vec<T>]>,
        input_grad: bool,
    ) -> Result<Option<Tensor<T>>> {
        if trace.0.len() != self.layers.len() {
            return Err(NnError::Shape("trace length does not match network".into()));
        }
        if let Some(g) = grads.as_deref() {
            if g.len() != self.num_param_tensors() {
                return Err(NnError::Params(format!(
                    "expected {} gradient tensors, got {}",
                    self.num_param_tensors(),
                    g.len()
                )));
            }
        }
        let mut offset = self.num_param_tensors();
        let mut grad = Some(grad);
        for (i, (layer, t)) in self.layers.iter().zip(&trace.0).enumerate().rev() {
            let n = layer.num_param_tensors();
            offset -= n;
            let g_layer = grads.as_deref_mut().map(|g| &mut g[offset..offset + n]);
            let need_input = i > 0 || input_grad;
            let upstream = grad.take().expect("gradient present while layers remain");
            grad = layer.backward(t, upstream, g_layer, need_input)?;
            if grad.is_none() {
                break;
            }
        }
        Ok(grad)
    }

    pub fn params(&self) -> Vec<&[T]> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Vec<T>> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    pub fn num_param_tensors(&self) -> usize {
        self.layers.iter().map(|l| l.num_param_tensors()).sum()
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn zero_grads(&self) -> Grads<T> {
        self.params().iter().map(|p| vec![T::zero(); p.len()]).collect()
    }

    /// Flattened copy of every parameter, in layout order.
    pub fn flat_params(&self) -> Vec<T> {
        self.params().concat()
    }

    pub fn load_flat_params(&mut self, flat: &[T]) -> Result<()> {
        let total = self.num_params();
        if flat.len() != total {
            return Err(NnError::Params(format!("network has {total} parameters, got {}", flat.len())));
        }
        let mut offset = 0;
        for p in self.params_mut() {
            let n = p.len();
            p.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Same architecture with parameters converted to another scalar type.
    pub fn cast<U: Real>(&self) -> Sequential<U> {
        use crate::layers::{Conv2d, Linear, Residual};
        fn conv_vec<T: Real, U: Real>(v: &[T]) -> Vec<U> {
            v.iter().map(|x| U::lit(x.to_f64_lossy())).collect()
        }
        let layers = self
            .layers
            .iter()
            .map(|l| match l {
                Layer::Conv(c) => Layer::Conv(Conv2d {
                    in_channels: c.in_channels,
                    out_channels: c.out_channels,
                    kernel: c.kernel,
                    stride: c.stride,
                    padding: c.padding,
                    weight: conv_vec(&c.weight),
                    bias: conv_vec(&c.bias),
                }),
                Layer::Linear(x) => Layer::Linear(Linear {
                    in_features: x.in_features,
                    out_features: x.out_features,
                    weight: conv_vec(&x.weight),
                    bias: conv_vec(&x.bias),
                }),
                Layer::Relu => Layer::Relu,
                Layer::MaxPool2 => Layer::MaxPool2,
                Layer::Upsample2 => Layer::Upsample2,
                Layer::GlobalAvgPool => Layer::GlobalAvgPool,
                Layer::Residual(r) => Layer::Residual(Box::new(Residual {
                    main: r.main.cast(),
                    shortcut: r.shortcut.as_ref().map(|s| s.cast()),
                })),
            })
            .collect();
        Sequential { layers }
    }
}
