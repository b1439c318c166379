#![allow(dead_code)]

pub struct GradCheck {
    pub rel_err: f64,
    pub kinks: usize,
}

/// Central differences with `h = 1e-6`. A coordinate whose one-sided slopes
/// disagree sits on a ReLU or L1 kink; there the analytic value only has to
/// lie between the two slopes and is left out of the error norm.
pub fn gradcheck(analytic: &[f64], n: usize, mut f: impl FnMut(usize, f64) -> f64) -> GradCheck {
    let h = 1e-6;
    let (mut diff, mut norm_a, mut norm_n, mut kinks) = (0.0, 0.0, 0.0, 0);
    for i in 0..n {
        let (fp, f0, fm) = (f(i, h), f(i, 0.0), f(i, -h));
        let (right, left) = ((fp - f0) / h, (f0 - fm) / h);
        if (right - left).abs() > 1e-3 * right.abs().max(left.abs()).max(1e-2) {
            kinks += 1;
            let (lo, hi) = (right.min(left), right.max(left));
            assert!(analytic[i] >= lo - 1e-4 && analytic[i] <= hi + 1e-4, "coordinate {i} outside its subgradient");
            continue;
        }
        let numeric = (fp - fm) / (2.0 * h);
        diff += (analytic[i] - numeric).powi(2);
        norm_a += analytic[i].powi(2);
        norm_n += numeric.powi(2);
    }
    GradCheck { rel_err: diff.sqrt() / norm_a.sqrt().max(norm_n.sqrt()).max(1e-12), kinks }
}
