//! Small descriptive statistics helpers for Monte Carlo estimates.

/// Sample mean and unbiased sample variance (two-pass, compensated).
pub fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let (mut ss, mut s) = (0.0, 0.0);
    for x in xs {
        let d = x - mean;
        ss += d * d;
        s += d;
    }
    let var = (ss - s * s / n as f64) / (n - 1) as f64;
    (mean, var.max(0.0))
}

/// Mean and standard error of the mean.
pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    let (m, v) = mean_var(xs);
    (m, (v / xs.len() as f64).sqrt())
}

/// Standard error of the unbiased sample variance, using the fourth central moment.
pub fn variance_se(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let (m, v) = mean_var(xs);
    let m4 = xs.iter().map(|x| (x - m).powi(4)).sum::<f64>() / n;
    ((m4 - v * v * (n - 3.0) / (n - 1.0)) / n).max(0.0).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_sample_moments() {
        let (m, v) = mean_var(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((v - 5.0 / 3.0).abs() < 1e-15);
        assert_eq!(mean_var(&[7.0]), (7.0, 0.0));
        assert!(mean_var(&[]).0.is_nan());
    }

    #[test]
    fn mean_se_scales_with_sample_size() {
        let xs: Vec<f64> = (0..100).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let (m, se) = mean_se(&xs);
        assert_eq!(m, 0.0);
        assert!((se - (100.0f64 / 99.0 / 100.0).sqrt()).abs() < 1e-15);
    }
}
