use issnet_nn::{Real, Tensor};

use super::adain::FeatureMap;
use super::perceptual::PerceptualEncoder;
use crate::datasets::ImageTensor;
use crate::error::{IssError, Result};

/// `X X^T / (h w)` for one `[c, hw]` block, exactly symmetric.
pub(crate) fn gram_block<T: Real>(x: &[T], c: usize, hw: usize) -> Vec<T> {
    let mut g = vec![T::zero(); c * c];
    T::gemm(c, hw, c, T::one() / T::lit(hw as f64), x, hw, 1, x, 1, hw, T::zero(), &mut g, c, 1);
    for i in 0..c {
        for j in 0..i {
            g[i * c + j] = g[j * c + i];
        }
    }
    g
}

/// Gram matrix `[C_f, C_f]` (row-major) of a feature map.
pub fn gram<T: Real>(fm: &FeatureMap<T>) -> Vec<T> {
    gram_block(&fm.data, fm.channels, fm.height * fm.width)
}

/// Perceptual term and its gradient with respect to `generated`.
///
/// Per item: mean over layers of `|a - g|_1 / N_i`; then the batch mean.
pub(crate) fn perceptual_terms<T: Real>(
    reference: &[&Tensor<T>],
    generated: &[&Tensor<T>],
) -> Result<(f64, Vec<Tensor<T>>)> {
    let layers = reference.len();
    if layers == 0 || layers != generated.len() {
        return Err(IssError::Validation("perceptual loss needs matching, non-empty layer lists".into()));
    }
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(layers);
    for (a, g) in reference.iter().zip(generated) {
        if a.shape() != g.shape() {
            return Err(IssError::Shape(format!("perceptual: {:?} vs {:?}", a.shape(), g.shape())));
        }
        let b = a.batch();
        let n = a.item_len();
        let scale = 1.0 / (b * layers * n) as f64;
        let mut grad = Tensor::zeros(g.shape().to_vec());
        let mut sum = 0.0;
        for ((d, &x), &y) in grad.data_mut().iter_mut().zip(a.data()).zip(g.data()) {
            let diff = y.to_f64_lossy() - x.to_f64_lossy();
            sum += diff.abs();
            *d = T::lit(if diff > 0.0 {
                scale
            } else if diff < 0.0 {
                -scale
            } else {
                0.0
            });
        }
        total += sum * scale;
        grads.push(grad);
    }
    Ok((total, grads))
}

/// Style term and its gradient with respect to `generated`.
///
/// Per item: mean over layers of `|G(s) - G(g)|_1`; then the batch mean.
pub(crate) fn style_terms<T: Real>(style: &[&Tensor<T>], generated: &[&Tensor<T>]) -> Result<(f64, Vec<Tensor<T>>)> {
    let layers = style.len();
    if layers == 0 || layers != generated.len() {
        return Err(IssError::Validation("style loss needs matching, non-empty layer lists".into()));
    }
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(layers);
    for (s, g) in style.iter().zip(generated) {
        let (b, c, h, w) = g.dims4()?;
        let (bs, cs, _, _) = s.dims4()?;
        if bs != b || cs != c {
            return Err(IssError::Shape(format!("style: {:?} vs {:?}", s.shape(), g.shape())));
        }
        let hw = h * w;
        let shw = s.item_len() / c;
        let scale = 1.0 / (b * layers) as f64;
        let mut grad = Tensor::zeros(g.shape().to_vec());
        for i in 0..b {
            let gs = gram_block(s.item(i), c, shw);
            let gg = gram_block(g.item(i), c, hw);
            let mut dsym = vec![T::zero(); c * c];
            let mut sum = 0.0;
            for p in 0..c {
                for q in 0..c {
                    let diff = gg[p * c + q].to_f64_lossy() - gs[p * c + q].to_f64_lossy();
                    sum += diff.abs();
                    let sgn = if diff > 0.0 {
                        scale
                    } else if diff < 0.0 {
                        -scale
                    } else {
                        0.0
                    };
                    dsym[p * c + q] += T::lit(sgn);
                    dsym[q * c + p] += T::lit(sgn);
                }
            }
            total += sum * scale;
            // dX = (D + D^T) X / hw
            T::gemm(
                c,
                c,
                hw,
                T::one() / T::lit(hw as f64),
                &dsym,
                c,
                1,
                g.item(i),
                hw,
                1,
                T::zero(),
                grad.item_mut(i),
                hw,
                1,
            );
        }
        grads.push(grad);
    }
    Ok((total, grads))
}

fn max_layer(layers: &[usize]) -> Result<usize> {
    layers
        .iter()
        .copied()
        .max()
        .filter(|&m| m > 0 && !layers.contains(&0))
        .ok_or_else(|| IssError::Validation("layer ids are 1-based and non-empty".into()))
}

fn layer_features<T: Real>(enc: &PerceptualEncoder<T>, img: &ImageTensor, layers: &[usize]) -> Result<Vec<Tensor<T>>> {
    let all = enc.features(&ImageTensor::batch(&[img])?, max_layer(layers)?)?;
    Ok(layers.iter().map(|&l| all[l - 1].clone()).collect())
}

/// Mean over `layers` of `|phi_i(content) - phi_i(generated)|_1 / N_i`.
pub fn perceptual_loss<T: Real>(
    content: &ImageTensor,
    generated: &ImageTensor,
    enc: &PerceptualEncoder<T>,
    layers: &[usize],
) -> Result<f64> {
    if content.shape() != generated.shape() {
        return Err(IssError::Shape(format!("{:?} vs {:?}", content.shape(), generated.shape())));
    }
    let a = layer_features(enc, content, layers)?;
    let g = layer_features(enc, generated, layers)?;
    Ok(perceptual_terms(&a.iter().collect::<Vec<_>>(), &g.iter().collect::<Vec<_>>())?.0)
}

/// Mean over `layers` of `|G_j(style) - G_j(generated)|_1`.
pub fn style_loss<T: Real>(
    style: &ImageTensor,
    generated: &ImageTensor,
    enc: &PerceptualEncoder<T>,
    layers: &[usize],
) -> Result<f64> {
    let s = layer_features(enc, style, layers)?;
    let g = layer_features(enc, generated, layers)?;
    Ok(style_terms(&s.iter().collect::<Vec<_>>(), &g.iter().collect::<Vec<_>>())?.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_gram() {
        let fm = FeatureMap::new(2, 1, 2, vec![1.0f64, 0.0, 0.0, 1.0], 1).unwrap();
        assert_eq!(gram(&fm), vec![0.5, 0.0, 0.0, 0.5]);
    }

    #[test]
    fn duplicated_channels_give_constant_gram() {
        let fm = FeatureMap::new(2, 2, 2, vec![1.0f64, 2.0, 3.0, 4.0, 1.0, 2.0, 3.0, 4.0], 1).unwrap();
        let g = gram(&fm);
        assert!(g.iter().all(|&v| v == g[0]));
    }

    #[test]
    fn style_gradient_matches_finite_differences() {
        let s = Tensor::new(vec![1, 2, 2, 2], vec![0.3, -0.2, 0.5, 0.9, 1.1, 0.0, -0.4, 0.2]).unwrap();
        let g = Tensor::new(vec![1, 2, 2, 2], vec![0.1, 0.7, -0.3, 0.4, 0.2, 0.6, 0.8, -0.5f64]).unwrap();
        let (_, grads) = style_terms(&[&s], &[&g]).unwrap();
        let h = 1e-6;
        for k in 0..8 {
            let bump = |d: f64| {
                let mut g2 = g.clone();
                g2.data_mut()[k] += d;
                style_terms(&[&s], &[&g2]).unwrap().0
            };
            let fd = (bump(h) - bump(-h)) / (2.0 * h);
            assert!((fd - grads[0].data()[k]).abs() < 1e-6, "{k}: {fd} vs {}", grads[0].data()[k]);
        }
    }
}
