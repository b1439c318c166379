//! Pretraining losses with analytic gradients.
//!
//! Values are accumulated in `f64` whatever the tensor precision.

use issnet_nn::{Real, Tensor};
use nalgebra::DMatrix;

use crate::error::{IssError, Result};

fn check_finite<T: Real>(t: &Tensor<T>, what: &str) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(IssError::Validation(format!("{what} contains non-finite values")))
    }
}

/// Mean cross-entropy of `logits` (`[B, C]`) against `labels`.
pub fn ce_loss<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> Result<f64> {
    ce_loss_grad(logits, labels).map(|(l, _)| l)
}

/// [`ce_loss`] and its gradient with respect to the logits.
pub fn ce_loss_grad<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> Result<(f64, Tensor<T>)> {
    let (b, c) = logits.dims2()?;
    if labels.len() != b {
        return Err(IssError::Shape(format!("{b} logit rows but {} labels", labels.len())));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= c) {
        return Err(IssError::Validation(format!("label {y} outside 0..{c}")));
    }
    check_finite(logits, "logits")?;
    let mut grad = Tensor::zeros(vec![b, c]);
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row: Vec<f64> = logits.item(i).iter().map(|v| v.to_f64_lossy()).collect();
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
        let lse = m + z.ln();
        total += lse - row[y];
        let g = grad.item_mut(i);
        for (j, v) in row.iter().enumerate() {
            let p = (v - lse).exp();
            g[j] = T::lit((p - if j == y { 1.0 } else { 0.0 }) / b as f64);
        }
    }
    Ok((total / b as f64, grad))
}

fn to_matrix<T: Real>(f: &Tensor<T>) -> Result<DMatrix<f64>> {
    let (b, d) = f.dims2()?;
    Ok(DMatrix::from_row_iterator(b, d, f.data().iter().map(|v| v.to_f64_lossy())))
}

/// Sum of squared singular values of the `[B, d]` feature matrix.
pub fn bsr_penalty<T: Real>(features: &Tensor<T>) -> Result<f64> {
    let (b, _) = features.dims2()?;
    if b == 0 {
        return Err(IssError::Validation("bsr penalty needs at least one row".into()));
    }
    check_finite(features, "features")?;
    let sv = to_matrix(features)?.singular_values();
    Ok(sv.iter().map(|g| g * g).sum())
}

/// [`bsr_penalty`] and its gradient `2 U diag(g) V^T`, i.e. twice the
/// reconstructed feature matrix.
pub fn bsr_penalty_grad<T: Real>(features: &Tensor<T>) -> Result<(f64, Tensor<T>)> {
    let (b, d) = features.dims2()?;
    if b == 0 {
        return Err(IssError::Validation("bsr penalty needs at least one row".into()));
    }
    check_finite(features, "features")?;
    let svd = to_matrix(features)?.svd(true, true);
    let penalty = svd.singular_values.iter().map(|g| g * g).sum();
    let recon = svd.recompose().map_err(|e| IssError::Validation(format!("svd: {e}")))?;
    let data = (0..b).flat_map(|i| (0..d).map(move |j| (i, j))).map(|(i, j)| T::lit(2.0 * recon[(i, j)])).collect();
    Ok((penalty, Tensor::new(vec![b, d], data)?))
}

/// Symmetric NT-Xent over the `2B` L2-normalised rows of `emb_a` and `emb_b`;
/// row `i` of `emb_a` and row `i` of `emb_b` are positives.
pub fn ntxent_loss<T: Real>(emb_a: &Tensor<T>, emb_b: &Tensor<T>, tau: f64) -> Result<f64> {
    ntxent_loss_grad(emb_a, emb_b, tau).map(|(l, _, _)| l)
}

/// [`ntxent_loss`] and its gradients with respect to both embedding batches.
pub fn ntxent_loss_grad<T: Real>(
    emb_a: &Tensor<T>,
    emb_b: &Tensor<T>,
    tau: f64,
) -> Result<(f64, Tensor<T>, Tensor<T>)> {
    let (b, d) = emb_a.dims2()?;
    if emb_b.shape() != emb_a.shape() {
        return Err(IssError::Shape(format!("nt-xent: {:?} vs {:?}", emb_a.shape(), emb_b.shape())));
    }
    if b < 2 {
        return Err(IssError::Validation("nt-xent needs a batch of at least 2 (no negatives)".into()));
    }
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(IssError::Validation(format!("nt-xent temperature must be positive, got {tau}")));
    }
    check_finite(emb_a, "embeddings")?;
    check_finite(emb_b, "embeddings")?;

    let n = 2 * b;
    let rows: Vec<Vec<f64>> = (0..b)
        .map(|i| emb_a.item(i))
        .chain((0..b).map(|i| emb_b.item(i)))
        .map(|r| r.iter().map(|v| v.to_f64_lossy()).collect())
        .collect();
    let norms: Vec<f64> = rows.iter().map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12)).collect();
    let unit: Vec<Vec<f64>> = rows.iter().zip(&norms).map(|(r, &s)| r.iter().map(|v| v / s).collect()).collect();
    let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(a, b)| a * b).sum::<f64>();
    let mut sim = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let s = dot(&unit[i], &unit[j]) / tau;
            sim[i * n + j] = s;
            sim[j * n + i] = s;
        }
    }

    // d loss / d sim, row-wise softmax over j != i minus the positive indicator.
    let mut dsim = vec![0.0; n * n];
    let mut total = 0.0;
    for i in 0..n {
        let pos = (i + b) % n;
        let row = &sim[i * n..(i + 1) * n];
        let m = (0..n).filter(|&j| j != i).map(|j| row[j]).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = (0..n).filter(|&j| j != i).map(|j| (row[j] - m).exp()).sum();
        let lse = m + z.ln();
        total += lse - row[pos];
        for j in (0..n).filter(|&j| j != i) {
            let p = (row[j] - lse).exp();
            dsim[i * n + j] = (p - if j == pos { 1.0 } else { 0.0 }) / n as f64;
        }
    }

    let mut grads = Vec::with_capacity(n);
    for i in 0..n {
        let mut du = vec![0.0; d];
        for j in 0..n {
            let w = (dsim[i * n + j] + dsim[j * n + i]) / tau;
            if w != 0.0 {
                for (g, u) in du.iter_mut().zip(&unit[j]) {
                    *g += w * u;
                }
            }
        }
        let proj = dot(&unit[i], &du);
        grads.push(du.iter().zip(&unit[i]).map(|(g, u)| T::lit((g - u * proj) / norms[i])).collect::<Vec<T>>());
    }
    let ga = Tensor::new(vec![b, d], grads[..b].concat())?;
    let gb = Tensor::new(vec![b, d], grads[b..].concat())?;
    Ok((total / n as f64, ga, gb))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Vec<usize>, v: Vec<f64>) -> Tensor<f64> {
        Tensor::new(shape, v).unwrap()
    }

    #[test]
    fn uniform_logits_give_log_of_class_count() {
        let l = ce_loss(&t(vec![2, 5], vec![0.3; 10]), &[0, 4]).unwrap();
        assert!((l - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_logits_give_zero() {
        let l = ce_loss(&t(vec![1, 3], vec![0.0, 1e6, 0.0]), &[1]).unwrap();
        assert!(l.abs() < 1e-12);
    }

    #[test]
    fn out_of_range_label_is_rejected() {
        assert!(matches!(ce_loss(&t(vec![1, 3], vec![0.0; 3]), &[3]), Err(IssError::Validation(_))));
    }

    #[test]
    fn identity_has_penalty_two() {
        let p = bsr_penalty(&t(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0])).unwrap();
        assert!((p - 2.0).abs() < 1e-12);
        assert_eq!(bsr_penalty(&t(vec![3, 4], vec![0.0; 12])).unwrap(), 0.0);
    }

    #[test]
    fn bsr_gradient_is_twice_the_features() {
        let f = t(vec![3, 2], vec![1.0, -2.0, 0.5, 3.0, 0.0, 1.5]);
        let (_, g) = bsr_penalty_grad(&f).unwrap();
        for (a, b) in g.data().iter().zip(f.data()) {
            assert!((a - 2.0 * b).abs() < 1e-10);
        }
    }

    #[test]
    fn ntxent_rejects_single_pair_and_bad_tau() {
        let a = t(vec![1, 2], vec![1.0, 0.0]);
        assert!(ntxent_loss(&a, &a, 0.5).is_err());
        let a = t(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        assert!(ntxent_loss(&a, &a, 0.0).is_err());
    }

    #[test]
    fn ntxent_gradient_matches_finite_differences() {
        let a = t(vec![3, 2], vec![0.3, -1.2, 0.8, 0.1, -0.5, 0.9]);
        let b = t(vec![3, 2], vec![0.2, -1.0, 1.1, 0.4, 0.3, 0.7]);
        let (_, ga, gb) = ntxent_loss_grad(&a, &b, 0.5).unwrap();
        let h = 1e-6;
        for (which, g) in [(0, &ga), (1, &gb)] {
            for k in 0..6 {
                let bump = |s: f64| {
                    let (mut a2, mut b2) = (a.clone(), b.clone());
                    let target = if which == 0 { &mut a2 } else { &mut b2 };
                    target.data_mut()[k] += s;
                    ntxent_loss(&a2, &b2, 0.5).unwrap()
                };
                let fd = (bump(h) - bump(-h)) / (2.0 * h);
                assert!((fd - g.data()[k]).abs() < 1e-6, "{which}/{k}: {fd} vs {}", g.data()[k]);
            }
        }
    }
}
