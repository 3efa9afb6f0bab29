//! Overflow-safe scalar functions.
//!
//! The aggregators divide similarities by temperatures as small as `1e-4`,
//! so arguments routinely reach the thousands. Everything here is written so
//! that no intermediate `exp` receives a large positive argument.

use std::f64::consts::LN_2;

/// `log(1 + exp(x))`, evaluated as `max(x, 0) + log1p(exp(-|x|))`.
#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Logistic sigmoid, the derivative of [`softplus`].
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(cosh(x))` as `|x| + log1p(exp(-2|x|)) - log 2`.
///
/// `cosh` itself overflows near `|x| = 710`.
#[inline]
pub fn log_cosh(x: f64) -> f64 {
    let a = x.abs();
    a + (-2.0 * a).exp().ln_1p() - LN_2
}

#[inline]
pub fn relu(x: f64) -> f64 {
    x.max(0.0)
}

/// Standard normal CDF via `erfc`.
pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Exact GELU, `x * Phi(x)`.
#[inline]
pub fn gelu(x: f64) -> f64 {
    x * std_normal_cdf(x)
}

/// Swish / SiLU, `x * sigmoid(x)`.
#[inline]
pub fn swish(x: f64) -> f64 {
    x * sigmoid(x)
}

/// Complementary error function, Chebyshev-fitted rational form with
/// fractional error below 1.2e-7.
///
/// Only used by the GELU ablation baseline.
pub fn erfc(x: f64) -> f64 {
    let z = x.abs();
    let t = 1.0 / (1.0 + 0.5 * z);
    let r = t
        * (-z * z - 1.265_512_23
            + t * (1.000_023_68
                + t * (0.374_091_96
                    + t * (0.096_784_18
                        + t * (-0.186_288_06
                            + t * (0.278_868_07
                                + t * (-1.135_203_98
                                    + t * (1.488_515_87
                                        + t * (-0.822_152_23 + t * 0.170_872_77)))))))))
            .exp();
    if x >= 0.0 {
        r
    } else {
        2.0 - r
    }
}

/// Numerically stable `log(sum(exp(xs)))`. Returns `-inf` for an empty slice.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let sum: f64 = xs.iter().map(|&x| (x - max).exp()).sum();
    max + sum.ln()
}

/// Softmax weights matching [`log_sum_exp`].
pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(xs);
    xs.iter().map(|&x| (x - lse).exp()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn softplus_matches_naive_in_safe_range() {
        for &x in &[-20.0, -1.0, 0.0, 0.5, 3.0, 30.0] {
            assert_abs_diff_eq!(softplus(x), (1.0 + f64::exp(x)).ln(), epsilon = 1e-12);
        }
        assert_eq!(softplus(1e4), 1e4);
        assert_eq!(softplus(-1e4), 0.0);
    }

    #[test]
    fn log_cosh_is_even_and_finite_past_cosh_overflow() {
        assert_eq!(log_cosh(0.0), 0.0);
        assert_abs_diff_eq!(log_cosh(2.0), f64::cosh(2.0).ln(), epsilon = 1e-14);
        assert_eq!(log_cosh(3.7), log_cosh(-3.7));
        let big = log_cosh(5000.0);
        assert!(big.is_finite());
        assert_abs_diff_eq!(big, 5000.0 - LN_2, epsilon = 1e-9);
    }

    #[test]
    fn lse_shifts_by_max() {
        assert_abs_diff_eq!(log_sum_exp(&[1000.0, 1000.0]), 1000.0 + LN_2, epsilon = 1e-12);
        assert_eq!(log_sum_exp(&[]), f64::NEG_INFINITY);
        let w = softmax(&[0.0, 0.0, 0.0, 0.0]);
        assert!(w.iter().all(|&p| (p - 0.25).abs() < 1e-15));
    }

    #[test]
    fn gelu_reference_points() {
        assert_eq!(gelu(0.0), 0.0);
        // Phi(1) = 0.841344746...
        assert_abs_diff_eq!(gelu(1.0), 0.841_344_746, epsilon = 1e-6);
        assert_abs_diff_eq!(swish(0.0), 0.0);
    }
}
