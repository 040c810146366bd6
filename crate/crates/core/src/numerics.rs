//! Scalar kernels shared across the crate, written to stay finite for
//! fields of several hundred.

/// `1 / (1 + exp(-x))` without overflow.
#[inline]
pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + exp(x))`.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// `ln(2 cosh h)` as `|h| + ln(1 + exp(-2|h|))`.
#[inline]
pub fn ln_2cosh(h: f64) -> f64 {
    let a = h.abs();
    a + (-2.0 * a).exp().ln_1p()
}

/// `n` points spaced evenly in log scale from `lo` to `hi` inclusive.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => {
            let (a, b) = (lo.ln(), hi.ln());
            (0..n).map(|k| (a + (b - a) * k as f64 / (n - 1) as f64).exp()).collect()
        }
    }
}

/// Log-sum-exp of a slice; `-inf` for an empty slice.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ln_2cosh_matches_naive_in_range() {
        for &h in &[-5.0, -0.3, 0.0, 1e-8, 2.0, 10.0] {
            let naive = (2.0 * f64::cosh(h)).ln();
            assert!((ln_2cosh(h) - naive).abs() < 1e-14, "h={h}");
        }
        assert!((ln_2cosh(700.0) - 700.0).abs() < 1e-12);
    }

    #[test]
    fn logistic_and_softplus_are_finite_at_extremes() {
        assert_eq!(logistic(-800.0), 0.0);
        assert_eq!(logistic(800.0), 1.0);
        assert!((softplus(800.0) - 800.0).abs() < 1e-12);
        assert!(softplus(-800.0) >= 0.0);
        assert!((logistic(0.3) + logistic(-0.3) - 1.0).abs() < 1e-16);
    }

    #[test]
    fn log_sum_exp_basic() {
        let v = [0.0_f64, 0.0];
        assert!((log_sum_exp(&v) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(log_sum_exp(&[]), f64::NEG_INFINITY);
    }
}
