//! Small statistics helpers shared by the covariance and gauss modules.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
    /// Classical standard error of the slope (0 for fewer than 3 points).
    pub slope_stderr: f64,
}

/// Ordinary least squares `y ≈ intercept + slope·x`.
pub fn ols(x: &[f64], y: &[f64]) -> LineFit {
    assert_eq!(x.len(), y.len());
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|v| (v - my).powi(2)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let intercept = my - slope * mx;
    let sse: f64 = x
        .iter()
        .zip(y)
        .map(|(a, b)| (b - intercept - slope * a).powi(2))
        .sum();
    let r2 = if syy > 0.0 { 1.0 - sse / syy } else { 1.0 };
    let slope_stderr = if x.len() > 2 && sxx > 0.0 {
        (sse / (n - 2.0) / sxx).sqrt()
    } else {
        0.0
    };
    LineFit {
        slope,
        intercept,
        r2,
        slope_stderr,
    }
}

/// Log-log fit of `values` against `n`.
pub fn loglog_fit(n: &[f64], values: &[f64]) -> LineFit {
    let x: Vec<f64> = n.iter().map(|v| v.ln()).collect();
    let y: Vec<f64> = values.iter().map(|v| v.ln()).collect();
    ols(&x, &y)
}

/// Compensated summation.
pub fn kahan_sum<I: IntoIterator<Item = f64>>(it: I) -> f64 {
    let mut s = 0.0;
    let mut c = 0.0;
    for v in it {
        let y = v - c;
        let t = s + y;
        c = (t - s) - y;
        s = t;
    }
    s
}

/// Sum by a balanced binary tree; the result depends only on the order of
/// `v`, never on how the work was scheduled.
pub fn pairwise_sum(v: &[f64]) -> f64 {
    match v.len() {
        0 => 0.0,
        1 => v[0],
        n => pairwise_sum(&v[..n / 2]) + pairwise_sum(&v[n / 2..]),
    }
}

pub fn mean(v: &[f64]) -> f64 {
    pairwise_sum(v) / v.len() as f64
}

/// Unbiased sample variance.
pub fn variance(v: &[f64]) -> f64 {
    let m = mean(v);
    let sq: Vec<f64> = v.iter().map(|x| (x - m).powi(2)).collect();
    pairwise_sum(&sq) / (v.len() as f64 - 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_line() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let y: Vec<f64> = x.iter().map(|v| 2.0 - 0.5 * v).collect();
        let f = ols(&x, &y);
        assert!((f.slope + 0.5).abs() < 1e-14);
        assert!((f.intercept - 2.0).abs() < 1e-14);
        assert!((f.r2 - 1.0).abs() < 1e-14);
        assert!(f.slope_stderr < 1e-12);
    }

    #[test]
    fn power_law() {
        let n: Vec<f64> = (10..=18).map(|k| 2f64.powi(k)).collect();
        let d: Vec<f64> = n.iter().map(|v| 3.0 * v.powf(-0.25)).collect();
        assert!((loglog_fit(&n, &d).slope + 0.25).abs() < 1e-12);
    }

    #[test]
    fn sums() {
        let v: Vec<f64> = (0..1000).map(|i| 0.1 * i as f64).collect();
        assert!((pairwise_sum(&v) - 49950.0).abs() < 1e-9);
        assert!((kahan_sum(v.iter().copied()) - 49950.0).abs() < 1e-9);
        assert!((variance(&[1.0, 2.0, 3.0]) - 1.0).abs() < 1e-15);
    }
}
