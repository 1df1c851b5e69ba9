//! Special functions used by the test statistics.
//!
//! Tail probabilities are evaluated in log space so that p-values far below
//! `f64::MIN_POSITIVE` are still representable as logarithms.

use std::f64::consts::{LN_10, PI};

const LANCZOS_G: f64 = 7.0;
#[allow(clippy::excessive_precision)]
const LANCZOS_COEF: [f64; 9] = [
    0.999_999_999_999_809_93,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_13,
    -176.615_029_162_140_59,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_571_6e-6,
    1.505_632_735_149_311_6e-7,
];

/// Natural log of the gamma function for `x > 0`.
pub fn ln_gamma(x: f64) -> f64 {
    if x < 0.5 {
        // reflection
        return (PI / (PI * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = LANCZOS_COEF[0];
    for (i, c) in LANCZOS_COEF.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + LANCZOS_G + 0.5;
    0.5 * (2.0 * PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

const MAX_ITER: usize = 10_000;
const EPS: f64 = 1e-16;
const TINY: f64 = 1e-300;

/// Log of the regularized upper incomplete gamma function `Q(a, x)`.
pub fn ln_gamma_q(a: f64, x: f64) -> f64 {
    assert!(a > 0.0, "shape must be positive");
    if x <= 0.0 {
        return 0.0;
    }
    let log_prefactor = -x + a * x.ln() - ln_gamma(a);
    if x < a + 1.0 {
        // series for P, then Q = 1 - P
        let mut ap = a;
        let mut term = 1.0 / a;
        let mut sum = term;
        for _ in 0..MAX_ITER {
            ap += 1.0;
            term *= x / ap;
            sum += term;
            if term.abs() < sum.abs() * EPS {
                break;
            }
        }
        let p = (log_prefactor + sum.ln()).exp();
        (-p).ln_1p()
    } else {
        // modified Lentz continued fraction for Q
        let mut b = x + 1.0 - a;
        let mut c = 1.0 / TINY;
        let mut d = 1.0 / b;
        let mut h = d;
        for i in 1..MAX_ITER {
            let an = -(i as f64) * (i as f64 - a);
            b += 2.0;
            d = an * d + b;
            if d.abs() < TINY {
                d = TINY;
            }
            c = b + an / c;
            if c.abs() < TINY {
                c = TINY;
            }
            d = 1.0 / d;
            let delta = d * c;
            h *= delta;
            if (delta - 1.0).abs() < EPS {
                break;
            }
        }
        log_prefactor + h.ln()
    }
}

/// Natural log of the chi-square upper tail probability.
pub fn chi2_ln_sf(x: f64, df: u32) -> f64 {
    ln_gamma_q(f64::from(df) / 2.0, x / 2.0)
}

/// Natural log of the two-sided standard normal tail `P(|Z| > |z|)`.
pub fn normal_two_sided_ln_p(z: f64) -> f64 {
    // P(|Z| > z) = P(chi2_1 > z^2)
    chi2_ln_sf(z * z, 1)
}

pub fn ln_to_log10(ln_value: f64) -> f64 {
    ln_value / LN_10
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + exp(x))` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ln_gamma_known_values() {
        assert!((ln_gamma(1.0)).abs() < 1e-14);
        assert!((ln_gamma(0.5) - PI.sqrt().ln()).abs() < 1e-14);
        assert!((ln_gamma(10.0) - 362_880f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn chi2_tail_df1_matches_normal() {
        // P(chi2_1 > 3.841458820694124) = 0.05
        let p = chi2_ln_sf(3.841_458_820_694_124, 1).exp();
        assert!((p - 0.05).abs() < 1e-12);
        assert_eq!(chi2_ln_sf(0.0, 1), 0.0);
    }

    #[test]
    fn far_tail_stays_finite_in_log_space() {
        let lp = chi2_ln_sf(2000.0, 1);
        assert!(lp.is_finite());
        assert!(lp < -900.0);
    }

    #[test]
    fn sigmoid_and_softplus_are_stable() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!((sigmoid(3f64.ln()) - 0.75).abs() < 1e-15);
        assert!(softplus(800.0).is_finite());
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert!(softplus(-800.0) >= 0.0);
    }
}
