//! Layers with hand-written backward passes.
//!
//! Forward passes never mutate the layer; anything the backward pass needs is
//! returned in a [`Trace`], so one network can be evaluated several times
//! (e.g. content, style and generated images) and differentiated through only
//! the traced calls.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{NnError, Result};
use crate::real::Real;
use crate::seq::{SeqTrace, Sequential};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// `[out, in, k, k]`
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub in_features: usize,
    pub out_features: usize,
    /// `[out, in]`
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

/// `relu(main(x) + shortcut(x))`; a missing shortcut is the identity.
#[derive(Debug, Clone, PartialEq)]
pub struct Residual<T> {
    pub main: Sequential<T>,
    pub shortcut: Option<Sequential<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer<T> {
    Conv(Conv2d<T>),
    Linear(Linear<T>),
    Relu,
    /// 2x2 window, stride 2.
    MaxPool2,
    /// Nearest-neighbour 2x upsampling.
    Upsample2,
    /// `[b, c, h, w] -> [b, c]`
    GlobalAvgPool,
    Residual(Box<Residual<T>>),
}

#[derive(Debug, Clone)]
pub enum Trace<T> {
    Input(Tensor<T>),
    Mask(Vec<bool>),
    Pool { argmax: Vec<usize>, in_shape: Vec<usize> },
    Shape(Vec<usize>),
    Residual { main: SeqTrace<T>, shortcut: Option<SeqTrace<T>>, mask: Vec<bool> },
}

fn out_size(n: usize, k: usize, s: usize, p: usize) -> usize {
    (n + 2 * p - k) / s + 1
}

impl<T: Real> Conv2d<T> {
    /// He-normal weights, zero bias. `gain` scales the standard deviation.
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        let fan_in = (in_channels * kernel * kernel) as f64;
        let normal = Normal::new(0.0, gain * (2.0 / fan_in).sqrt()).expect("finite std");
        let weight = (0..out_channels * in_channels * kernel * kernel).map(|_| T::lit(normal.sample(rng))).collect();
        Self { in_channels, out_channels, kernel, stride, padding, weight, bias: vec![T::zero(); out_channels] }
    }

    fn out_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if h + 2 * self.padding < self.kernel || w + 2 * self.padding < self.kernel {
            return Err(NnError::Shape(format!("conv kernel {} does not fit {h}x{w} input", self.kernel)));
        }
        Ok((out_size(h, self.kernel, self.stride, self.padding), out_size(w, self.kernel, self.stride, self.padding)))
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<(usize, usize, usize, usize)> {
        let (b, c, h, w) = x.dims4()?;
        if c != self.in_channels {
            return Err(NnError::Shape(format!("conv expects {} channels, got {c}", self.in_channels)));
        }
        Ok((b, c, h, w))
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (b, c, h, w) = self.check_input(x)?;
        let (oh, ow) = self.out_hw(h, w)?;
        let ckk = c * self.kernel * self.kernel;
        let ohw = oh * ow;
        let mut cols = vec![T::zero(); ckk * ohw];
        let mut out = Tensor::zeros(vec![b, self.out_channels, oh, ow]);
        for i in 0..b {
            im2col(x.item(i), c, h, w, self.kernel, self.stride, self.padding, oh, ow, &mut cols);
            let y = out.item_mut(i);
            for (o, row) in y.chunks_mut(ohw).enumerate() {
                row.fill(self.bias[o]);
            }
            T::gemm(self.out_channels, ckk, ohw, T::one(), &self.weight, ckk, 1, &cols, ohw, 1, T::one(), y, ohw, 1);
        }
        Ok(out)
    }

    /// Accumulates into `grads = [d_weight, d_bias]` when given.
    pub fn backward(
        &self,
        x: &Tensor<T>,
        grad_out: &Tensor<T>,
        grads: Option<&mut [Vec<T>]>,
        input_grad: bool,
    ) -> Result<Option<Tensor<T>>> {
        let (b, c, h, w) = self.check_input(x)?;
        let (oh, ow) = self.out_hw(h, w)?;
        if grad_out.shape() != [b, self.out_channels, oh, ow] {
            return Err(NnError::Shape(format!("conv backward: gradient shape {:?}", grad_out.shape())));
        }
        let ckk = c * self.kernel * self.kernel;
        let ohw = oh * ow;
        let mut cols = vec![T::zero(); ckk * ohw];
        let mut dx = input_grad.then(|| Tensor::zeros(x.shape().to_vec()));
        let mut grads = grads;
        for i in 0..b {
            let gy = grad_out.item(i);
            if let Some(g) = grads.as_deref_mut() {
                im2col(x.item(i), c, h, w, self.kernel, self.stride, self.padding, oh, ow, &mut cols);
                let (gw, gb) = g.split_at_mut(1);
                T::gemm(self.out_channels, ohw, ckk, T::one(), gy, ohw, 1, &cols, 1, ohw, T::one(), &mut gw[0], ckk, 1);
                for (o, row) in gy.chunks(ohw).enumerate() {
                    gb[0][o] += row.iter().copied().sum::<T>();
                }
            }
            if let Some(dx) = dx.as_mut() {
                T::gemm(
                    ckk,
                    self.out_channels,
                    ohw,
                    T::one(),
                    &self.weight,
                    1,
                    ckk,
                    gy,
                    ohw,
                    1,
                    T::zero(),
                    &mut cols,
                    ohw,
                    1,
                );
                col2im(&cols, c, h, w, self.kernel, self.stride, self.padding, oh, ow, dx.item_mut(i));
            }
        }
        Ok(dx)
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Real>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    s: usize,
    p: usize,
    oh: usize,
    ow: usize,
    cols: &mut [T],
) {
    let ohw = oh * ow;
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * ohw..(row + 1) * ohw];
                for oy in 0..oh {
                    let drow = &mut dst[oy * ow..(oy + 1) * ow];
                    let iy = (oy * s + ky) as isize - p as isize;
                    if iy < 0 || iy >= h as isize {
                        drow.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * s + kx) as isize - p as isize;
                        *d = if ix >= 0 && ix < w as isize { src[ix as usize] } else { T::zero() };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Real>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    s: usize,
    p: usize,
    oh: usize,
    ow: usize,
    dx: &mut [T],
) {
    let ohw = oh * ow;
    for ci in 0..c {
        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * ohw..(row + 1) * ohw];
                for oy in 0..oh {
                    let iy = (oy * s + ky) as isize - p as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let drow = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, &v) in src[oy * ow..(oy + 1) * ow].iter().enumerate() {
                        let ix = (ox * s + kx) as isize - p as isize;
                        if ix >= 0 && ix < w as isize {
                            drow[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

impl<T: Real> Linear<T> {
    /// Uniform in `±gain/sqrt(in)`, zero bias.
    pub fn new<R: Rng + ?Sized>(in_features: usize, out_features: usize, gain: f64, rng: &mut R) -> Self {
        let bound = gain / (in_features as f64).sqrt();
        let weight = (0..in_features * out_features).map(|_| T::lit(rng.random_range(-bound..=bound))).collect();
        Self { in_features, out_features, weight, bias: vec![T::zero(); out_features] }
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<usize> {
        let (b, d) = x.dims2()?;
        if d != self.in_features {
            return Err(NnError::Shape(format!("linear expects {} features, got {d}", self.in_features)));
        }
        Ok(b)
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let b = self.check_input(x)?;
        let (din, dout) = (self.in_features, self.out_features);
        let mut y = Tensor::zeros(vec![b, dout]);
        for row in y.data_mut().chunks_mut(dout) {
            row.copy_from_slice(&self.bias);
        }
        T::gemm(b, din, dout, T::one(), x.data(), din, 1, &self.weight, 1, din, T::one(), y.data_mut(), dout, 1);
        Ok(y)
    }

    pub fn backward(
        &self,
        x: &Tensor<T>,
        grad_out: &Tensor<T>,
        grads: Option<&mut [Vec<T>]>,
        input_grad: bool,
    ) -> Result<Option<Tensor<T>>> {
        let b = self.check_input(x)?;
        let (din, dout) = (self.in_features, self.out_features);
        if grad_out.shape() != [b, dout] {
            return Err(NnError::Shape(format!("linear backward: gradient shape {:?}", grad_out.shape())));
        }
        if let Some(g) = grads {
            let (gw, gb) = g.split_at_mut(1);
            T::gemm(dout, b, din, T::one(), grad_out.data(), 1, dout, x.data(), din, 1, T::one(), &mut gw[0], din, 1);
            for row in grad_out.data().chunks(dout) {
                for (acc, &v) in gb[0].iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        if !input_grad {
            return Ok(None);
        }
        let mut dx = Tensor::zeros(vec![b, din]);
        T::gemm(
            b,
            dout,
            din,
            T::one(),
            grad_out.data(),
            dout,
            1,
            &self.weight,
            din,
            1,
            T::zero(),
            dx.data_mut(),
            din,
            1,
        );
        Ok(Some(dx))
    }
}

fn relu_forward<T: Real>(x: Tensor<T>) -> (Tensor<T>, Vec<bool>) {
    let mask: Vec<bool> = x.data().iter().map(|&v| v > T::zero()).collect();
    let y = x.map(|v| if v > T::zero() { v } else { T::zero() });
    (y, mask)
}

fn relu_backward<T: Real>(mask: &[bool], mut grad: Tensor<T>) -> Result<Tensor<T>> {
    if mask.len() != grad.len() {
        return Err(NnError::Shape("relu backward: mask/gradient length mismatch".into()));
    }
    for (g, &m) in grad.data_mut().iter_mut().zip(mask) {
        if !m {
            *g = T::zero();
        }
    }
    Ok(grad)
}

fn maxpool_forward<T: Real>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let (b, c, h, w) = x.dims4()?;
    let (oh, ow) = (h / 2, w / 2);
    if oh == 0 || ow == 0 {
        return Err(NnError::Shape(format!("max-pool on {h}x{w} input")));
    }
    let mut out = Tensor::zeros(vec![b, c, oh, ow]);
    let mut argmax = Vec::with_capacity(b * c * oh * ow);
    let src = x.data();
    let dst = out.data_mut();
    let mut o = 0;
    for plane in 0..b * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if src[idx] > src[best] {
                        best = idx;
                    }
                }
                dst[o] = src[best];
                argmax.push(best);
                o += 1;
            }
        }
    }
    Ok((out, argmax))
}

fn upsample_forward<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, c, h, w) = x.dims4()?;
    let mut out = Tensor::zeros(vec![b, c, 2 * h, 2 * w]);
    let src = x.data();
    let dst = out.data_mut();
    for plane in 0..b * c {
        for y in 0..2 * h {
            let srow = &src[plane * h * w + (y / 2) * w..][..w];
            let drow = &mut dst[plane * 4 * h * w + y * 2 * w..][..2 * w];
            for (xo, d) in drow.iter_mut().enumerate() {
                *d = srow[xo / 2];
            }
        }
    }
    Ok(out)
}

fn upsample_backward<T: Real>(in_shape: &[usize], grad: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, c, h, w) = match in_shape {
        &[b, c, h, w] => (b, c, h, w),
        _ => return Err(NnError::Shape("upsample backward: bad input shape".into())),
    };
    if grad.shape() != [b, c, 2 * h, 2 * w] {
        return Err(NnError::Shape(format!("upsample backward: gradient {:?}", grad.shape())));
    }
    let mut dx = Tensor::zeros(in_shape.to_vec());
    let g = grad.data();
    let d = dx.data_mut();
    for plane in 0..b * c {
        for y in 0..2 * h {
            for x in 0..2 * w {
                d[plane * h * w + (y / 2) * w + x / 2] += g[plane * 4 * h * w + y * 2 * w + x];
            }
        }
    }
    Ok(dx)
}

fn gap_forward<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, c, h, w) = x.dims4()?;
    let hw = h * w;
    let inv = T::one() / T::lit(hw as f64);
    let data = x.data().chunks(hw).map(|p| p.iter().copied().sum::<T>() * inv).collect();
    Tensor::new(vec![b, c], data)
}

fn gap_backward<T: Real>(in_shape: &[usize], grad: &Tensor<T>) -> Result<Tensor<T>> {
    let hw: usize = in_shape[2..].iter().product();
    if grad.len() * hw != in_shape.iter().product::<usize>() {
        return Err(NnError::Shape("global-pool backward: gradient size".into()));
    }
    let inv = T::one() / T::lit(hw as f64);
    let mut data = Vec::with_capacity(grad.len() * hw);
    for &g in grad.data() {
        data.extend(std::iter::repeat_n(g * inv, hw));
    }
    Tensor::new(in_shape.to_vec(), data)
}

impl<T: Real> Layer<T> {
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Layer::Conv(c) => c.forward(x),
            Layer::Linear(l) => l.forward(x),
            Layer::Relu => Ok(x.map(|v| if v > T::zero() { v } else { T::zero() })),
            Layer::MaxPool2 => maxpool_forward(x).map(|(y, _)| y),
            Layer::Upsample2 => upsample_forward(x),
            Layer::GlobalAvgPool => gap_forward(x),
            Layer::Residual(r) => {
                let mut y = r.main.forward(x)?;
                match &r.shortcut {
                    Some(s) => y.add_assign(&s.forward(x)?)?,
                    None => y.add_assign(x)?,
                }
                Ok(y.map(|v| if v > T::zero() { v } else { T::zero() }))
            }
        }
    }

    pub fn forward_traced(&self, x: Tensor<T>) -> Result<(Tensor<T>, Trace<T>)> {
        match self {
            Layer::Conv(c) => {
                let y = c.forward(&x)?;
                Ok((y, Trace::Input(x)))
            }
            Layer::Linear(l) => {
                let y = l.forward(&x)?;
                Ok((y, Trace::Input(x)))
            }
            Layer::Relu => {
                let (y, mask) = relu_forward(x);
                Ok((y, Trace::Mask(mask)))
            }
            Layer::MaxPool2 => {
                let (y, argmax) = maxpool_forward(&x)?;
                Ok((y, Trace::Pool { argmax, in_shape: x.shape().to_vec() }))
            }
            Layer::Upsample2 => Ok((upsample_forward(&x)?, Trace::Shape(x.shape().to_vec()))),
            Layer::GlobalAvgPool => Ok((gap_forward(&x)?, Trace::Shape(x.shape().to_vec()))),
            Layer::Residual(r) => {
                let (short, short_trace) = match &r.shortcut {
                    Some(s) => {
                        let (y, t) = s.forward_traced(x.clone())?;
                        (y, Some(t))
                    }
                    None => (x.clone(), None),
                };
                let (mut y, main_trace) = r.main.forward_traced(x)?;
                y.add_assign(&short)?;
                let (y, mask) = relu_forward(y);
                Ok((y, Trace::Residual { main: main_trace, shortcut: short_trace, mask }))
            }
        }
    }

    /// `grads` covers exactly this layer's parameter tensors.
    pub fn backward(
        &self,
        trace: &Trace<T>,
        grad: Tensor<T>,
        grads: Option<&mut [Vec<T>]>,
        input_grad: bool,
    ) -> Result<Option<Tensor<T>>> {
        match (self, trace) {
            (Layer::Conv(c), Trace::Input(x)) => c.backward(x, &grad, grads, input_grad),
            (Layer::Linear(l), Trace::Input(x)) => l.backward(x, &grad, grads, input_grad),
            (Layer::Relu, Trace::Mask(mask)) => relu_backward(mask, grad).map(Some),
            (Layer::MaxPool2, Trace::Pool { argmax, in_shape }) => {
                if argmax.len() != grad.len() {
                    return Err(NnError::Shape("max-pool backward: gradient size".into()));
                }
                let mut dx = Tensor::zeros(in_shape.clone());
                let d = dx.data_mut();
                for (&idx, &g) in argmax.iter().zip(grad.data()) {
                    d[idx] += g;
                }
                Ok(Some(dx))
            }
            (Layer::Upsample2, Trace::Shape(s)) => upsample_backward(s, &grad).map(Some),
            (Layer::GlobalAvgPool, Trace::Shape(s)) => gap_backward(s, &grad).map(Some),
            (Layer::Residual(r), Trace::Residual { main, shortcut, mask }) => {
                let grad = relu_backward(mask, grad)?;
                let n_main = r.main.num_param_tensors();
                let (g_main, g_short) = match grads {
                    Some(g) => {
                        let (a, b) = g.split_at_mut(n_main);
                        (Some(a), Some(b))
                    }
                    None => (None, None),
                };
                let mut dx = r.main.backward(main, grad.clone(), g_main, true)?.expect("input grad requested");
                match (&r.shortcut, shortcut) {
                    (Some(s), Some(t)) => {
                        let ds = s.backward(t, grad, g_short, true)?.expect("input grad requested");
                        dx.add_assign(&ds)?;
                    }
                    (None, None) => dx.add_assign(&grad)?,
                    _ => return Err(NnError::Shape("residual trace does not match block".into())),
                }
                Ok(Some(dx))
            }
            _ => Err(NnError::Shape("trace does not match layer kind".into())),
        }
    }

    pub fn params(&self) -> Vec<&[T]> {
        match self {
            Layer::Conv(c) => vec![&c.weight, &c.bias],
            Layer::Linear(l) => vec![&l.weight, &l.bias],
            Layer::Residual(r) => {
                let mut p = r.main.params();
                if let Some(s) = &r.shortcut {
                    p.extend(s.params());
                }
                p
            }
            _ => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Vec<T>> {
        match self {
            Layer::Conv(c) => vec![&mut c.weight, &mut c.bias],
            Layer::Linear(l) => vec![&mut l.weight, &mut l.bias],
            Layer::Residual(r) => {
                let mut p = r.main.params_mut();
                if let Some(s) = &mut r.shortcut {
                    p.extend(s.params_mut());
                }
                p
            }
            _ => Vec::new(),
        }
    }

    pub fn num_param_tensors(&self) -> usize {
        match self {
            Layer::Conv(_) | Layer::Linear(_) => 2,
            Layer::Residual(r) => r.main.num_param_tensors() + r.shortcut.as_ref().map_or(0, |s| s.num_param_tensors()),
            _ => 0,
        }
    }
}
