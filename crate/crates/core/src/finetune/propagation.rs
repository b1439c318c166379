use nalgebra::DMatrix;

use crate::error::{IssError, Result};

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Median of the pairwise Euclidean distances (1.0 when undefined or zero).
pub fn median_pairwise_distance(emb: &[Vec<f64>]) -> f64 {
    let mut d: Vec<f64> = (0..emb.len())
        .flat_map(|i| (i + 1..emb.len()).map(move |j| (i, j)))
        .map(|(i, j)| sq_dist(&emb[i], &emb[j]).sqrt())
        .collect();
    if d.is_empty() {
        return 1.0;
    }
    d.sort_by(f64::total_cmp);
    let m = d.len();
    let med = if m % 2 == 1 { d[m / 2] } else { 0.5 * (d[m / 2 - 1] + d[m / 2]) };
    if med > 0.0 && med.is_finite() {
        med
    } else {
        1.0
    }
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Closed-form propagation `F = (I - alpha S)^-1 softmax(logits)` over the
/// normalised Gaussian affinity graph of the query embeddings. Rows of the
/// result are renormalised to distributions.
pub fn label_propagation(
    logits: &[Vec<f64>],
    embeddings: &[Vec<f64>],
    lp_alpha: f64,
    lp_sigma: Option<f64>,
) -> Result<Vec<Vec<f64>>> {
    let m = logits.len();
    if m == 0 || embeddings.len() != m {
        return Err(IssError::Validation(format!(
            "label propagation needs matching non-empty logits ({m}) and embeddings ({})",
            embeddings.len()
        )));
    }
    if !(0.0..1.0).contains(&lp_alpha) {
        return Err(IssError::Validation(format!("lp_alpha must lie in [0, 1), got {lp_alpha}")));
    }
    let c = logits[0].len();
    if c == 0 || logits.iter().any(|r| r.len() != c || r.iter().any(|v| !v.is_finite())) {
        return Err(IssError::Validation("logit rows must be finite and of equal length".into()));
    }
    let sigma = match lp_sigma {
        Some(s) if s > 0.0 && s.is_finite() => s,
        Some(s) => return Err(IssError::Validation(format!("lp_sigma must be positive, got {s}"))),
        None => median_pairwise_distance(embeddings),
    };

    let mut w = DMatrix::<f64>::zeros(m, m);
    for i in 0..m {
        for j in i + 1..m {
            let v = (-sq_dist(&embeddings[i], &embeddings[j]) / (2.0 * sigma * sigma)).exp();
            w[(i, j)] = v;
            w[(j, i)] = v;
        }
    }
    let inv_sqrt: Vec<f64> = (0..m)
        .map(|i| {
            let d: f64 = w.row(i).sum();
            if d > 0.0 {
                1.0 / d.sqrt()
            } else {
                0.0
            }
        })
        .collect();
    let mut a = DMatrix::<f64>::identity(m, m);
    for i in 0..m {
        for j in 0..m {
            a[(i, j)] -= lp_alpha * inv_sqrt[i] * w[(i, j)] * inv_sqrt[j];
        }
    }
    let y = DMatrix::from_row_iterator(m, c, logits.iter().flat_map(|r| softmax(r)));
    let f = a.lu().solve(&y).ok_or_else(|| IssError::Validation("label propagation system is singular".into()))?;
    Ok((0..m)
        .map(|i| {
            let row: Vec<f64> = (0..c).map(|j| f[(i, j)].max(0.0)).collect();
            let z: f64 = row.iter().sum();
            if z > 0.0 {
                row.iter().map(|v| v / z).collect()
            } else {
                vec![1.0 / c as f64; c]
            }
        })
        .collect())
}
