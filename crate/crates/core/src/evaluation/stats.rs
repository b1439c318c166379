use serde::{Deserialize, Serialize};

use crate::error::{IssError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    /// Sample standard deviation (`n - 1` denominator); exactly 0 when all
    /// values agree, including the single-value case.
    pub std: f64,
    /// `1.96 * std / sqrt(n)`.
    pub ci95: f64,
}

pub fn summarize(values: &[f64]) -> Result<Summary> {
    if values.is_empty() {
        return Err(IssError::Validation("cannot summarise zero episodes".into()));
    }
    if values.iter().all(|v| *v == values[0]) {
        return Ok(Summary { mean: values[0], std: 0.0, ci95: 0.0 });
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    Ok(Summary { mean, std, ci95: 1.96 * std / n.sqrt() })
}
