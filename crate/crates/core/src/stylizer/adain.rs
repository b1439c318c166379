use issnet_nn::{Real, Tensor};

use crate::error::{IssError, Result};

/// Activations of one encoder stage for a single image.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<T = f32> {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
    /// 1-based index of the encoder stage that produced the map.
    pub layer_id: usize,
}

impl<T: Real> FeatureMap<T> {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<T>, layer_id: usize) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 || data.len() != channels * height * width {
            return Err(IssError::Shape(format!("feature map {channels}x{height}x{width} with {} values", data.len())));
        }
        Ok(Self { channels, height, width, data, layer_id })
    }

    /// Splits a `[batch, c, h, w]` activation into per-item maps.
    pub fn from_batch(t: &Tensor<T>, layer_id: usize) -> Result<Vec<Self>> {
        let (b, c, h, w) = t.dims4()?;
        (0..b).map(|i| Self::new(c, h, w, t.item(i).to_vec(), layer_id)).collect()
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }
}

/// Per-channel mean and population standard deviation over spatial positions.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStats {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl ChannelStats {
    pub fn of<T: Real>(fm: &FeatureMap<T>) -> Self {
        Self::of_planes(&fm.data, fm.channels)
    }

    fn of_planes<T: Real>(data: &[T], channels: usize) -> Self {
        let plane = data.len() / channels;
        let mut mu = Vec::with_capacity(channels);
        let mut sigma = Vec::with_capacity(channels);
        for p in data.chunks(plane) {
            let m = p.iter().map(|v| v.to_f64_lossy()).sum::<f64>() / plane as f64;
            let var = p.iter().map(|v| (v.to_f64_lossy() - m).powi(2)).sum::<f64>() / plane as f64;
            mu.push(m);
            sigma.push(var.sqrt());
        }
        Self { mu, sigma }
    }
}

/// Re-normalises one `[c, h, w]` content block to the style block's channel
/// statistics. Content sigma is floored at `eps` inside the division.
fn adain_planes<T: Real>(content: &[T], style: &[T], channels: usize, eps: f64, out: &mut [T]) {
    let c = ChannelStats::of_planes(content, channels);
    let s = ChannelStats::of_planes(style, channels);
    let plane = content.len() / channels;
    for ch in 0..channels {
        let scale = s.sigma[ch] / c.sigma[ch].max(eps);
        let src = &content[ch * plane..(ch + 1) * plane];
        let dst = &mut out[ch * plane..(ch + 1) * plane];
        for (o, &x) in dst.iter_mut().zip(src) {
            *o = T::lit((x.to_f64_lossy() - c.mu[ch]) * scale + s.mu[ch]);
        }
    }
}

/// Adaptive instance normalisation: content features with the style's
/// per-channel mean and standard deviation.
pub fn adain<T: Real>(content: &FeatureMap<T>, style: &FeatureMap<T>, eps: f64) -> Result<FeatureMap<T>> {
    if content.channels != style.channels {
        return Err(IssError::Shape(format!(
            "adain: content has {} channels, style has {}",
            content.channels, style.channels
        )));
    }
    let mut out = content.clone();
    adain_planes(&content.data, &style.data, content.channels, eps, &mut out.data);
    Ok(out)
}

/// Batched [`adain`]: item `i` of `content` takes the statistics of item `i`
/// of `style`. Spatial sizes may differ.
pub fn adain_batch<T: Real>(content: &Tensor<T>, style: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
    let (b, c, _, _) = content.dims4()?;
    let (bs, cs, _, _) = style.dims4()?;
    if b != bs || c != cs {
        return Err(IssError::Shape(format!("adain: content {:?} vs style {:?}", content.shape(), style.shape())));
    }
    let mut out = content.clone();
    for i in 0..b {
        adain_planes(content.item(i), style.item(i), c, eps, out.item_mut(i));
    }
    Ok(out)
}

/// `alpha * stylised + (1 - alpha) * content`.
pub(crate) fn interpolate<T: Real>(stylised: &Tensor<T>, content: &Tensor<T>, alpha: f64) -> Tensor<T> {
    let (a, b) = (T::lit(alpha), T::lit(1.0 - alpha));
    let mut out = content.clone();
    for (o, (&s, &c)) in out.data_mut().iter_mut().zip(stylised.data().iter().zip(content.data())) {
        *o = a * s + b * c;
    }
    out
}
