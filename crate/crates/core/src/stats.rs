//! Paired comparisons: Student-t distribution, paired t-test with Cohen's d,
//! and the exact McNemar test for paired binary outcomes.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StatsError {
    #[error("degrees of freedom must be a finite value >= 1, got {0}")]
    InvalidDf(f64),
    #[error("samples differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("need at least 2 pairs, got {0}")]
    TooFewPairs(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairedTestResult {
    pub n: usize,
    pub t_stat: f64,
    pub df: f64,
    pub p_two_sided: f64,
    /// Mean of `b - a`.
    pub mean_diff: f64,
    pub sd_diff: f64,
    pub cohens_d: f64,
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation (n - 1 denominator).
pub fn sample_sd(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return f64::NAN;
    }
    let m = mean(xs);
    let ss: f64 = xs.iter().map(|x| (x - m) * (x - m)).sum();
    (ss / (xs.len() - 1) as f64).sqrt()
}

const LANCZOS_G: f64 = 7.0;
const LANCZOS: [f64; 9] = [
    0.999_999_999_999_809_9,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_1,
    -176.615_029_162_140_6,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_572e-6,
    1.505_632_735_149_311_6e-7,
];

/// Natural log of the gamma function for x > 0 (Lanczos approximation).
pub fn ln_gamma(x: f64) -> f64 {
    if x < 0.5 {
        // reflection
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = LANCZOS[0];
    for (i, c) in LANCZOS.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + LANCZOS_G + 0.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

/// Continued fraction for the incomplete beta (modified Lentz).
fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-16;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=10_000 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Regularized incomplete beta `I_x(a, b)`. `one_minus_x` is passed
/// separately so callers can supply it without cancellation.
pub fn reg_inc_beta(a: f64, b: f64, x: f64, one_minus_x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if one_minus_x <= 0.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * one_minus_x.ln();
    let front = ln_front.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_cf(a, b, x) / a
    } else {
        1.0 - front * beta_cf(b, a, one_minus_x) / b
    }
}

/// Student-t cumulative distribution function.
pub fn t_cdf(x: f64, df: f64) -> Result<f64, StatsError> {
    if !(df.is_finite() && df >= 1.0) {
        return Err(StatsError::InvalidDf(df));
    }
    if x.is_nan() {
        return Ok(f64::NAN);
    }
    if x == 0.0 {
        return Ok(0.5);
    }
    if x.is_infinite() {
        return Ok(if x > 0.0 { 1.0 } else { 0.0 });
    }
    let x2 = x * x;
    let z = df / (df + x2);
    let one_minus_z = x2 / (df + x2);
    // lower tail mass beyond |x|
    let tail = 0.5 * reg_inc_beta(df / 2.0, 0.5, z, one_minus_z);
    Ok(if x > 0.0 { 1.0 - tail } else { tail })
}

/// Two-sided p-value for a t statistic.
pub fn t_two_sided_p(t: f64, df: f64) -> Result<f64, StatsError> {
    if !(df.is_finite() && df >= 1.0) {
        return Err(StatsError::InvalidDf(df));
    }
    if t.is_infinite() {
        return Ok(0.0);
    }
    let t2 = t * t;
    let p = reg_inc_beta(df / 2.0, 0.5, df / (df + t2), t2 / (df + t2));
    Ok(p.clamp(0.0, 1.0))
}

/// Paired t-test on `d_i = b_i - a_i`. Zero-variance differences yield an
/// infinite statistic (p = 0) or, when all differences are zero, t = 0 and
/// p = 1.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<PairedTestResult, StatsError> {
    if a.len() != b.len() {
        return Err(StatsError::LengthMismatch(a.len(), b.len()));
    }
    let n = a.len();
    if n < 2 {
        return Err(StatsError::TooFewPairs(n));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| y - x).collect();
    let mean_diff = mean(&diffs);
    let sd_diff = sample_sd(&diffs);
    let df = (n - 1) as f64;

    let (t_stat, cohens_d) = if sd_diff == 0.0 {
        if mean_diff == 0.0 {
            (0.0, 0.0)
        } else {
            let inf = f64::INFINITY.copysign(mean_diff);
            (inf, inf)
        }
    } else {
        (mean_diff / (sd_diff / (n as f64).sqrt()), mean_diff / sd_diff)
    };
    let p_two_sided = t_two_sided_p(t_stat, df)?;
    Ok(PairedTestResult {
        n,
        t_stat,
        df,
        p_two_sided,
        mean_diff,
        sd_diff,
        cohens_d,
    })
}

/// Two-sided exact binomial test of `k` successes out of `n` at p = 0.5.
pub fn binomial_two_sided_half(k: u64, n: u64) -> f64 {
    if n == 0 {
        return 1.0;
    }
    let lo = k.min(n - k);
    let ln_half_n = n as f64 * 0.5f64.ln();
    let ln_n_fact = ln_gamma(n as f64 + 1.0);
    let tail: f64 = (0..=lo)
        .map(|i| (ln_n_fact - ln_gamma(i as f64 + 1.0) - ln_gamma((n - i) as f64 + 1.0) + ln_half_n).exp())
        .sum();
    (2.0 * tail).min(1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McNemarResult {
    /// Pairs with `a` true and `b` false.
    pub only_a: u64,
    /// Pairs with `a` false and `b` true.
    pub only_b: u64,
    pub p_two_sided: f64,
}

/// Exact McNemar test on paired binary outcomes.
pub fn success_rate_test(a: &[bool], b: &[bool]) -> Result<McNemarResult, StatsError> {
    if a.len() != b.len() {
        return Err(StatsError::LengthMismatch(a.len(), b.len()));
    }
    let only_a = a.iter().zip(b).filter(|(x, y)| **x && !**y).count() as u64;
    let only_b = a.iter().zip(b).filter(|(x, y)| !**x && **y).count() as u64;
    Ok(McNemarResult {
        only_a,
        only_b,
        p_two_sided: binomial_two_sided_half(only_a, only_a + only_b),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn t_cdf_closed_forms() {
        for df in [1.0, 2.0, 7.5, 29.0, 1e4] {
            assert_eq!(t_cdf(0.0, df).unwrap(), 0.5);
        }
        assert!((t_cdf(1.0, 1.0).unwrap() - 0.75).abs() < 1e-14);
        // df = 2 has the closed form 1/2 + x / (2 sqrt(2 + x^2))
        for x in [-3.0, -0.5, 0.3, 2.0, 10.0] {
            let exact = 0.5 + x / (2.0 * (2.0f64 + x * x).sqrt());
            assert!((t_cdf(x, 2.0).unwrap() - exact).abs() < 1e-13);
        }
    }

    #[test]
    fn t_cdf_reference_value() {
        assert!((t_cdf(2.0, 10.0).unwrap() - 0.963_305_982_614_629_7).abs() < 1e-12);
    }

    #[test]
    fn t_cdf_rejects_bad_df() {
        assert_eq!(t_cdf(1.0, 0.5), Err(StatsError::InvalidDf(0.5)));
        assert!(t_cdf(1.0, f64::NAN).is_err());
    }

    #[test]
    fn t_cdf_symmetry_and_monotonicity() {
        for df in [1.0, 3.0, 29.0] {
            let mut prev = 0.0;
            for i in -400..=400 {
                let x = i as f64 * 0.05;
                let c = t_cdf(x, df).unwrap();
                assert!(c >= prev);
                prev = c;
                assert!((c + t_cdf(-x, df).unwrap() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn paired_identical_samples() {
        let a = [3.0, 1.5, 8.0, 2.25];
        let r = paired_t_test(&a, &a).unwrap();
        assert_eq!((r.t_stat, r.p_two_sided, r.cohens_d), (0.0, 1.0, 0.0));
    }

    #[test]
    fn paired_differences_one_two_three() {
        let r = paired_t_test(&[0.0, 0.0, 0.0], &[1.0, 2.0, 3.0]).unwrap();
        assert!((r.t_stat - 3.464_101_615_137_754).abs() < 1e-12);
        assert_eq!(r.df, 2.0);
        assert!((r.p_two_sided - 0.074_179_900_227_448_55).abs() < 1e-10);
        assert!((r.cohens_d - 2.0).abs() < 1e-12);
    }

    #[test]
    fn paired_constant_shift_is_infinite() {
        let r = paired_t_test(&[1.0, 2.0, 3.0], &[2.0, 3.0, 4.0]).unwrap();
        assert!(r.t_stat.is_infinite() && r.t_stat > 0.0);
        assert_eq!(r.p_two_sided, 0.0);
    }

    #[test]
    fn paired_errors() {
        assert_eq!(
            paired_t_test(&[1.0], &[1.0, 2.0]),
            Err(StatsError::LengthMismatch(1, 2))
        );
        assert_eq!(paired_t_test(&[1.0], &[2.0]), Err(StatsError::TooFewPairs(1)));
    }

    #[test]
    fn swapping_negates_t() {
        let a = [1.0, 4.0, 2.0, 8.0, 5.0];
        let b = [2.0, 3.5, 4.0, 9.0, 7.5];
        let ab = paired_t_test(&a, &b).unwrap();
        let ba = paired_t_test(&b, &a).unwrap();
        assert!((ab.t_stat + ba.t_stat).abs() < 1e-12);
        assert!((ab.p_two_sided - ba.p_two_sided).abs() < 1e-15);
    }

    #[test]
    fn cohens_d_shift_invariant() {
        let a = [1.0, 4.0, 2.0, 8.0, 5.0];
        let b = [2.0, 3.5, 4.0, 9.0, 7.5];
        let shifted_a: Vec<f64> = a.iter().map(|x| x + 100.0).collect();
        let shifted_b: Vec<f64> = b.iter().map(|x| x + 100.0).collect();
        let d0 = paired_t_test(&a, &b).unwrap().cohens_d;
        let d1 = paired_t_test(&shifted_a, &shifted_b).unwrap().cohens_d;
        assert!((d0 - d1).abs() < 1e-9);
    }

    #[test]
    fn mcnemar_cases() {
        let r = success_rate_test(&[true, false], &[true, false]).unwrap();
        assert_eq!(r.p_two_sided, 1.0);
        let r = success_rate_test(&[true], &[false]).unwrap();
        assert_eq!((r.only_a, r.only_b), (1, 0));
        assert!((r.p_two_sided - 1.0).abs() < 1e-12);
        let mut a = vec![true; 8];
        a.push(false);
        let mut b = vec![false; 8];
        b.push(true);
        let r = success_rate_test(&a, &b).unwrap();
        assert!((r.p_two_sided - 0.039_062_5).abs() < 1e-12);
        assert!(success_rate_test(&[true], &[]).is_err());
    }

    #[test]
    fn ln_gamma_factorials() {
        let mut fact = 1.0f64;
        for n in 1..20 {
            fact *= n as f64;
            assert!((ln_gamma(n as f64 + 1.0) - fact.ln()).abs() < 1e-12);
        }
        assert!((ln_gamma(0.5) - std::f64::consts::PI.sqrt().ln()).abs() < 1e-13);
    }
}
