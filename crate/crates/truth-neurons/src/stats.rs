//! One-sided hypothesis tests for attribution differences and accuracy
//! comparisons: one-sample Student's t against zero, two-sample Welch,
//! and Bonferroni-adjusted decisions.

use crate::model::NeuronId;
use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum StatsError {
    #[error("sample too small: need at least {need}, got {got}")]
    SampleTooSmall { need: usize, got: usize },
    #[error("both samples have zero variance")]
    BothDegenerate,
    #[error("no test results supplied")]
    Empty,
}

/// CDF of Student's t distribution with `df` degrees of freedom, computed
/// through the regularized incomplete beta function.
pub fn t_cdf(t: f64, df: f64) -> f64 {
    if t == 0.0 {
        return 0.5;
    }
    let x = df / (df + t * t);
    let tail = 0.5 * beta_reg(df / 2.0, 0.5, x);
    if t > 0.0 {
        1.0 - tail
    } else {
        tail
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TTestResult {
    pub neuron: NeuronId,
    pub sample_size: usize,
    pub mean: f64,
    pub t_statistic: f64,
    pub degrees_of_freedom: f64,
    /// One-sided p for H_a: mean > mu0.
    pub p_value: f64,
    /// Zero sample variance; p forced to 0 or 1 by the sign of the mean.
    pub degenerate: bool,
    /// Filled by [`bonferroni`].
    pub rejected: bool,
}

pub fn sample_mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Unbiased sample variance (n − 1 denominator).
pub fn sample_variance(values: &[f64]) -> f64 {
    let m = sample_mean(values);
    values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (values.len() - 1) as f64
}

/// One-sample t-test, alternative mean > `mu0`.
pub fn t_test_one_sample(
    neuron: NeuronId,
    values: &[f64],
    mu0: f64,
) -> Result<TTestResult, StatsError> {
    let n = values.len();
    if n < 2 {
        return Err(StatsError::SampleTooSmall { need: 2, got: n });
    }
    let mean = sample_mean(values);
    let var = sample_variance(values);
    let df = (n - 1) as f64;
    if var == 0.0 {
        return Ok(TTestResult {
            neuron,
            sample_size: n,
            mean,
            t_statistic: if mean > mu0 {
                f64::INFINITY
            } else if mean < mu0 {
                f64::NEG_INFINITY
            } else {
                0.0
            },
            degrees_of_freedom: df,
            p_value: if mean > mu0 { 0.0 } else { 1.0 },
            degenerate: true,
            rejected: false,
        });
    }
    let t = (mean - mu0) / (var / n as f64).sqrt();
    Ok(TTestResult {
        neuron,
        sample_size: n,
        mean,
        t_statistic: t,
        degrees_of_freedom: df,
        p_value: 1.0 - t_cdf(t, df),
        degenerate: false,
        rejected: false,
    })
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct WelchResult {
    pub t_statistic: f64,
    pub degrees_of_freedom: f64,
    /// One-sided p for H_a: mean(second sample) < mean(first sample).
    pub p_value: f64,
    pub degenerate: bool,
}

/// One-sided Welch's t-test with the alternative that the suppressed mean is
/// below the baseline mean.
pub fn welch_one_sided(baseline: &[f64], suppressed: &[f64]) -> Result<WelchResult, StatsError> {
    if baseline.len() < 2 {
        return Err(StatsError::SampleTooSmall {
            need: 2,
            got: baseline.len(),
        });
    }
    if suppressed.len() < 2 {
        return Err(StatsError::SampleTooSmall {
            need: 2,
            got: suppressed.len(),
        });
    }
    let (m1, m2) = (sample_mean(baseline), sample_mean(suppressed));
    let (v1, v2) = (sample_variance(baseline), sample_variance(suppressed));
    let (n1, n2) = (baseline.len() as f64, suppressed.len() as f64);
    if v1 == 0.0 && v2 == 0.0 {
        if m1 == m2 {
            return Err(StatsError::BothDegenerate);
        }
        return Ok(WelchResult {
            t_statistic: if m2 < m1 {
                f64::NEG_INFINITY
            } else {
                f64::INFINITY
            },
            degrees_of_freedom: n1 + n2 - 2.0,
            p_value: if m2 < m1 { 0.0 } else { 1.0 },
            degenerate: true,
        });
    }
    let se2 = v1 / n1 + v2 / n2;
    let t = (m2 - m1) / se2.sqrt();
    let df = se2 * se2
        / (v1 * v1 / (n1 * n1 * (n1 - 1.0)) + v2 * v2 / (n2 * n2 * (n2 - 1.0)));
    Ok(WelchResult {
        t_statistic: t,
        degrees_of_freedom: df,
        p_value: t_cdf(t, df),
        degenerate: false,
    })
}

/// Marks each result rejected iff p ≤ α / N_tests (inclusive), where the
/// family is exactly the supplied results.
pub fn bonferroni(results: &mut [TTestResult], alpha: f64) -> Result<f64, StatsError> {
    if results.is_empty() {
        return Err(StatsError::Empty);
    }
    let threshold = alpha / results.len() as f64;
    for r in results.iter_mut() {
        r.rejected = r.p_value <= threshold;
    }
    Ok(threshold)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{NeuronId, Site};

    fn nid() -> NeuronId {
        NeuronId {
            layer: 0,
            site: Site::Mlp,
            index: 0,
        }
    }

    /// Independent oracle: adaptive Simpson quadrature of the t density.
    /// Normalization constant via the log-gamma function.
    pub(crate) fn t_cdf_oracle(t: f64, df: f64) -> f64 {
        fn ln_gamma(x: f64) -> f64 {
            // Lanczos approximation, g = 7.
            const COEF: [f64; 9] = [
                0.99999999999980993,
                676.5203681218851,
                -1259.1392167224028,
                771.32342877765313,
                -176.61502916214059,
                12.507343278686905,
                -0.13857109526572012,
                9.9843695780195716e-6,
                1.5056327351493116e-7,
            ];
            if x < 0.5 {
                let pi = std::f64::consts::PI;
                return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
            }
            let x = x - 1.0;
            let mut a = COEF[0];
            let t = x + 7.5;
            for (i, &c) in COEF.iter().enumerate().skip(1) {
                a += c / (x + i as f64);
            }
            0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
        }
        let log_norm = ln_gamma((df + 1.0) / 2.0)
            - ln_gamma(df / 2.0)
            - 0.5 * (df * std::f64::consts::PI).ln();
        let pdf = |x: f64| (log_norm - (df + 1.0) / 2.0 * (1.0 + x * x / df).ln()).exp();

        fn simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64) -> f64 {
            (b - a) / 6.0 * (f(a) + 4.0 * f(0.5 * (a + b)) + f(b))
        }
        fn adaptive(
            f: &dyn Fn(f64) -> f64,
            a: f64,
            b: f64,
            whole: f64,
            eps: f64,
            depth: u32,
        ) -> f64 {
            let m = 0.5 * (a + b);
            let left = simpson(f, a, m);
            let right = simpson(f, m, b);
            if depth == 0 || (left + right - whole).abs() <= 15.0 * eps {
                return left + right + (left + right - whole) / 15.0;
            }
            adaptive(f, a, m, left, eps / 2.0, depth - 1)
                + adaptive(f, m, b, right, eps / 2.0, depth - 1)
        }

        // Integrate the symmetric-half tail: CDF(t) = 0.5 + ∫_0^t pdf.
        let (lo, hi, sign) = if t >= 0.0 { (0.0, t, 1.0) } else { (t, 0.0, -1.0) };
        let whole = simpson(&pdf, lo, hi);
        0.5 + sign * adaptive(&pdf, lo, hi, whole, 1e-12, 40)
    }

    #[test]
    fn t_cdf_matches_quadrature_oracle() {
        for &df in &[1.0, 2.0, 3.0, 5.0, 10.0, 30.0, 120.0, 200.0] {
            for i in -20..=20 {
                let t = i as f64 / 2.0;
                let got = t_cdf(t, df);
                let want = t_cdf_oracle(t, df);
                assert!(
                    (got - want).abs() <= 1e-8,
                    "t={t} df={df}: {got} vs {want}"
                );
            }
        }
    }

    #[test]
    fn t_cdf_published_quantiles() {
        // Standard t-table entries: P(T ≤ q) = 0.95.
        for &(df, q) in &[(1.0, 6.3138), (5.0, 2.0150), (10.0, 1.8125), (30.0, 1.6973)] {
            assert!((t_cdf(q, df) - 0.95).abs() < 5e-5, "df={df}");
        }
    }

    #[test]
    fn one_sample_textbook_example() {
        // values [1..5]: t = 4.2426, df = 4; p frozen from the quadrature oracle
        let r = t_test_one_sample(nid(), &[1.0, 2.0, 3.0, 4.0, 5.0], 0.0).unwrap();
        assert!((r.t_statistic - 4.242640687119285).abs() < 1e-12);
        assert_eq!(r.degrees_of_freedom, 4.0);
        let oracle_p = 1.0 - t_cdf_oracle(r.t_statistic, 4.0);
        assert!((r.p_value - oracle_p).abs() < 1e-10);
        assert!((r.p_value - 0.0066).abs() < 2e-4, "p = {}", r.p_value);
    }

    #[test]
    fn one_sample_degenerate_and_zero_mean() {
        let r = t_test_one_sample(nid(), &[2.0, 2.0, 2.0], 0.0).unwrap();
        assert!(r.degenerate);
        assert_eq!(r.p_value, 0.0);

        let r = t_test_one_sample(nid(), &[-1.0, 1.0], 0.0).unwrap();
        assert_eq!(r.t_statistic, 0.0);
        assert_eq!(r.p_value, 0.5);
    }

    #[test]
    fn welch_textbook_examples() {
        let a = [0.62, 0.63, 0.61];
        let b = [0.43, 0.44, 0.42];
        let r = welch_one_sided(&a, &b).unwrap();
        assert!(r.p_value < 0.001, "p = {}", r.p_value);
        let oracle_p = t_cdf_oracle(r.t_statistic, r.degrees_of_freedom);
        assert!((r.p_value - oracle_p).abs() < 1e-8);

        let r = welch_one_sided(&[0.5, 0.6, 0.7], &[0.5, 0.6, 0.7]).unwrap();
        assert_eq!(r.t_statistic, 0.0);
        assert_eq!(r.p_value, 0.5);

        // second sample shifted above the first → p > 0.5
        let r = welch_one_sided(&[0.4, 0.5, 0.45], &[0.8, 0.85, 0.9]).unwrap();
        assert!(r.p_value > 0.5);
    }

    #[test]
    fn bonferroni_thresholds() {
        let mk = |p: f64| TTestResult {
            neuron: nid(),
            sample_size: 10,
            mean: 0.1,
            t_statistic: 1.0,
            degrees_of_freedom: 9.0,
            p_value: p,
            degenerate: false,
            rejected: false,
        };
        let mut one = vec![mk(0.05)];
        let thr = bonferroni(&mut one, 0.05).unwrap();
        assert_eq!(thr, 0.05);
        assert!(one[0].rejected, "boundary p == α/N rejects");

        let mut many: Vec<_> = (0..5000).map(|_| mk(2e-5)).collect();
        let thr = bonferroni(&mut many, 0.05).unwrap();
        assert!((thr - 1e-5).abs() < 1e-18);
        assert!(many.iter().all(|r| !r.rejected));
    }
}
