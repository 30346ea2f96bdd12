//! Small statistics helpers: stable log-mean-exp, batch-means errors, Wilson
//! intervals and least-squares slopes.

use crate::{Error, Result};

/// `ln( (1/n) Σ e^{a_i} )` without overflow.
pub fn log_mean_exp(a: &[f64]) -> f64 {
    if a.is_empty() {
        return f64::NEG_INFINITY;
    }
    let m = a.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    let s: f64 = a.iter().map(|v| (v - m).exp()).sum();
    m + (s / a.len() as f64).ln()
}

pub fn mean(a: &[f64]) -> f64 {
    a.iter().sum::<f64>() / a.len() as f64
}

/// Unbiased sample variance.
pub fn variance(a: &[f64]) -> f64 {
    let m = mean(a);
    a.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (a.len() as f64 - 1.0)
}

pub fn std_error(a: &[f64]) -> f64 {
    (variance(a) / a.len() as f64).sqrt()
}

/// Log-mean-exp with a batch-means standard error on the log scale.
///
/// The sample is cut into `min(16, n)` contiguous batches; the error is the
/// standard error of the per-batch log-mean-exp values, rescaled to the full
/// sample size.
pub fn log_mean_exp_with_error(a: &[f64]) -> Result<(f64, f64)> {
    if a.len() < 2 {
        return Err(Error::Estimation(format!(
            "need at least 2 samples for an error bar, got {}",
            a.len()
        )));
    }
    let lme = log_mean_exp(a);
    let batches = a.len().min(16);
    let per = a.len() / batches;
    let vals: Vec<f64> = (0..batches)
        .map(|b| {
            let end = if b + 1 == batches { a.len() } else { (b + 1) * per };
            log_mean_exp(&a[b * per..end])
        })
        .collect();
    // Each batch estimate has roughly batches/n of the full-sample variance.
    let se = (variance(&vals) / batches as f64).sqrt();
    Ok((lme, if se.is_finite() { se } else { f64::INFINITY }))
}

/// Wilson score interval for a binomial proportion at `z` standard deviations.
pub fn wilson_interval(successes: usize, n: usize, z: f64) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let n = n as f64;
    let p = successes as f64 / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let center = (p + z2 / (2.0 * n)) / denom;
    let half = z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    ((center - half).max(0.0), (center + half).min(1.0))
}

/// Ordinary least-squares slope of `y` on `x` and its standard error.
/// The error is the HC1 sandwich estimate, so residual variance may depend on `x`.
/// Returns `None` when `x` has no spread.
pub fn ols_slope(x: &[f64], y: &[f64]) -> Option<(f64, f64)> {
    let n = x.len();
    if n < 3 {
        return None;
    }
    let mx = mean(x);
    let my = mean(y);
    let sxx: f64 = x.iter().map(|v| (v - mx) * (v - mx)).sum();
    if sxx <= 1e-300 {
        return None;
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let meat: f64 = x
        .iter()
        .zip(y)
        .map(|(a, b)| {
            let e = b - intercept - slope * a;
            (a - mx) * (a - mx) * e * e
        })
        .sum();
    let se = (meat * n as f64 / (n as f64 - 2.0)).sqrt() / sxx;
    Some((slope, se))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_mean_exp_matches_direct_sum() {
        let a = [0.1, -2.0, 3.5, 0.0];
        let direct = (a.iter().map(|v: &f64| v.exp()).sum::<f64>() / 4.0).ln();
        assert!((log_mean_exp(&a) - direct).abs() < 1e-14);
    }

    #[test]
    fn log_mean_exp_survives_large_exponents() {
        let a = [700.0, 701.0, 699.0];
        let v = log_mean_exp(&a);
        assert!(v.is_finite());
        let expect = 700.0 + ((1.0 + 1f64.exp() + (-1f64).exp()) / 3.0).ln();
        assert!((v - expect).abs() < 1e-12);
    }

    #[test]
    fn constant_samples_have_zero_error() {
        let (m, se) = log_mean_exp_with_error(&[2.0; 100]).unwrap();
        assert!((m - 2.0).abs() < 1e-15);
        assert_eq!(se, 0.0);
        assert!(log_mean_exp_with_error(&[1.0]).is_err());
    }

    #[test]
    fn wilson_brackets_the_proportion() {
        let (lo, hi) = wilson_interval(50, 100, 1.96);
        assert!(lo < 0.5 && hi > 0.5);
        let (lo, hi) = wilson_interval(100, 100, 1.96);
        assert!(lo > 0.95 && hi > 1.0 - 1e-12);
    }

    #[test]
    fn slope_of_exact_line() {
        let x = [0.0, 1.0, 2.0, 3.0];
        let y = [1.0, 3.0, 5.0, 7.0];
        let (s, se) = ols_slope(&x, &y).unwrap();
        assert!((s - 2.0).abs() < 1e-14 && se < 1e-12);
        assert!(ols_slope(&[1.0; 5], &[1.0, 2.0, 3.0, 4.0, 5.0]).is_none());
    }

    #[test]
    fn slope_error_tracks_heteroscedastic_noise() {
        // Noise only where x is large: the robust error must exceed the pooled one.
        let x: Vec<f64> = (0..200).map(|i| i as f64 / 199.0).collect();
        let y: Vec<f64> = x
            .iter()
            .enumerate()
            .map(|(i, &v)| if v > 0.9 { if i % 2 == 0 { 1.0 } else { -1.0 } } else { 0.0 })
            .collect();
        let (s, se) = ols_slope(&x, &y).unwrap();
        let mx = mean(&x);
        let sxx: f64 = x.iter().map(|v| (v - mx) * (v - mx)).sum();
        let my = mean(&y);
        let rss: f64 = x.iter().zip(&y).map(|(a, b)| (b - my - s * (a - mx)).powi(2)).sum();
        let pooled = (rss / 198.0 / sxx).sqrt();
        assert!(se > 1.5 * pooled, "robust {se} vs pooled {pooled}");
    }
}
