//! Scalar special functions used by the likelihood code.
//!
//! Only what the negative binomial family and the normal reference
//! distribution actually need: log-gamma (via `libm`), digamma and trigamma
//! (asymptotic series plus upward recurrence), and the standard normal
//! CDF/survival function (via `erfc`). All functions are plain `f64 -> f64`
//! and silently return NaN outside their domain; callers are expected to
//! keep arguments positive.

/// Natural log of the gamma function for `x > 0`.
#[inline]
pub fn ln_gamma(x: f64) -> f64 {
    libm::lgamma(x)
}

/// `ln(k!)` for a count, going through `ln_gamma(k + 1)`.
#[inline]
pub fn ln_factorial(k: u64) -> f64 {
    ln_gamma(k as f64 + 1.0)
}

/// Digamma function (derivative of `ln_gamma`) for `x > 0`.
///
/// Uses the recurrence `psi(x) = psi(x + 1) - 1/x` to push the argument
/// above 10, then the Bernoulli asymptotic series. Absolute error is below
/// 1e-12 over the positive axis.
pub fn digamma(mut x: f64) -> f64 {
    if !(x > 0.0) {
        return f64::NAN;
    }
    let mut acc = 0.0;
    while x < 10.0 {
        acc -= 1.0 / x;
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    // psi(x) ~ ln x - 1/(2x) - sum B_{2n} / (2n x^{2n})
    let series = inv2
        * (1.0 / 12.0
            - inv2 * (1.0 / 120.0 - inv2 * (1.0 / 252.0 - inv2 * (1.0 / 240.0 - inv2 / 132.0))));
    acc + libm::log(x) - 0.5 * inv - series
}

/// Trigamma function (second derivative of `ln_gamma`) for `x > 0`.
pub fn trigamma(mut x: f64) -> f64 {
    if !(x > 0.0) {
        return f64::NAN;
    }
    let mut acc = 0.0;
    while x < 10.0 {
        acc += 1.0 / (x * x);
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    // psi'(x) ~ 1/x + 1/(2x^2) + sum B_{2n} / x^{2n+1}
    let series =
        inv * (1.0 + inv * (0.5 + inv * (1.0 / 6.0 - inv2 * (1.0 / 30.0 - inv2 * (1.0 / 42.0 - inv2 / 30.0)))));
    acc + series
}

/// Standard normal cumulative distribution function.
#[inline]
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z * core::f64::consts::FRAC_1_SQRT_2)
}

/// Standard normal survival function `P(Z > z)`, accurate in the upper tail.
#[inline]
pub fn normal_sf(z: f64) -> f64 {
    0.5 * libm::erfc(z * core::f64::consts::FRAC_1_SQRT_2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

    #[test]
    fn digamma_known_values() {
        assert_abs_diff_eq!(digamma(1.0), -EULER_GAMMA, epsilon = 1e-12);
        // psi(1/2) = -gamma - 2 ln 2
        assert_abs_diff_eq!(
            digamma(0.5),
            -EULER_GAMMA - 2.0 * core::f64::consts::LN_2,
            epsilon = 1e-12
        );
        // psi(n) = H_{n-1} - gamma
        let h9: f64 = (1..=9).map(|k| 1.0 / k as f64).sum();
        assert_abs_diff_eq!(digamma(10.0), h9 - EULER_GAMMA, epsilon = 1e-12);
        assert_abs_diff_eq!(digamma(123.4), libm::log(123.4) - 0.5 / 123.4, epsilon = 1e-4);
    }

    #[test]
    fn digamma_matches_lgamma_slope() {
        // Central finite differences of ln_gamma should agree with digamma.
        for &x in &[0.3f64, 0.9, 2.5, 7.7, 42.0] {
            let h = 1e-5 * x.max(1.0);
            let fd = (ln_gamma(x + h) - ln_gamma(x - h)) / (2.0 * h);
            assert_abs_diff_eq!(digamma(x), fd, epsilon = 1e-6);
        }
    }

    #[test]
    fn trigamma_known_values() {
        let pi2_6 = core::f64::consts::PI * core::f64::consts::PI / 6.0;
        assert_abs_diff_eq!(trigamma(1.0), pi2_6, epsilon = 1e-12);
        assert_abs_diff_eq!(trigamma(0.5), 3.0 * pi2_6, epsilon = 1e-11);
        let tail: f64 = (1..=9).map(|k| 1.0 / (k as f64 * k as f64)).sum();
        assert_abs_diff_eq!(trigamma(10.0), pi2_6 - tail, epsilon = 1e-12);
    }

    #[test]
    fn trigamma_matches_digamma_slope() {
        for &x in &[0.4f64, 1.1, 3.0, 15.0] {
            let h = 1e-5 * x.max(1.0);
            let fd = (digamma(x + h) - digamma(x - h)) / (2.0 * h);
            assert_abs_diff_eq!(trigamma(x), fd, epsilon = 1e-6);
        }
    }

    #[test]
    fn normal_tails() {
        assert_abs_diff_eq!(normal_cdf(0.0), 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(normal_sf(0.0), 0.5, epsilon = 1e-15);
        // Phi(1.959964) ~ 0.975
        assert_abs_diff_eq!(normal_cdf(1.959963984540054), 0.975, epsilon = 1e-9);
        assert_abs_diff_eq!(normal_sf(1.959963984540054), 0.025, epsilon = 1e-9);
        // Deep upper tail stays positive and accurate.
        assert_abs_diff_eq!(normal_sf(8.0), 6.22096057427178e-16, epsilon = 1e-22);
        assert!(normal_sf(f64::INFINITY) == 0.0);
    }

    #[test]
    fn domain_guards() {
        assert!(digamma(0.0).is_nan());
        assert!(digamma(-1.5).is_nan());
        assert!(trigamma(-0.1).is_nan());
    }
}
