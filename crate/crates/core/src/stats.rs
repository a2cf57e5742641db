//! Logistic transforms, binomial tails and the Clopper-Pearson machinery that
//! turns audit counts into privacy statements.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::num::{ExtendedReal, Real};

/// Correct guesses `v` out of taken guesses `r`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AuditCounts {
    pub v: u64,
    pub r: u64,
}

impl AuditCounts {
    /// Requires `0 <= v <= r` and `r >= 1`.
    pub fn new(v: u64, r: u64) -> Result<Self> {
        if r == 0 {
            return Err(Error::AllAbstain);
        }
        if v > r {
            return Err(Error::Domain(format!("v = {v} exceeds r = {r}")));
        }
        Ok(Self { v, r })
    }

    /// Empirical accuracy `v / r`.
    pub fn accuracy(&self) -> f64 {
        self.v as f64 / self.r as f64
    }
}

/// Standard logistic function `e^x / (e^x + 1)` with `p(-∞) = 0` and `p(∞) = 1`.
pub fn logistic<T: Real>(x: ExtendedReal<T>) -> T {
    let x = x.value();
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Inverse of [`logistic`] on `[0, 1]`.
pub fn logistic_inv<T: Real>(q: T) -> Result<ExtendedReal<T>> {
    if q.is_nan() || q < T::zero() || q > T::one() {
        return Err(Error::Domain(format!("logistic_inv needs q in [0, 1], got {q}")));
    }
    if q == T::zero() {
        return Ok(ExtendedReal::neg_inf());
    }
    if q == T::one() {
        return Ok(ExtendedReal::pos_inf());
    }
    Ok(ExtendedReal::new(q.ln() - (-q).ln_1p()).expect("finite log-odds"))
}

fn check_probability<T: Real>(name: &str, q: T) -> Result<()> {
    if q.is_nan() || q < T::zero() || q > T::one() {
        Err(Error::Domain(format!("{name} must lie in [0, 1], got {q}")))
    } else {
        Ok(())
    }
}

/// `Pr[Binomial(r, q) >= v]`, summed in log space.
pub fn binom_tail_geq<T: Real>(r: u64, q: T, v: u64) -> Result<T> {
    if v > r {
        return Err(Error::Domain(format!("success count {v} exceeds trials {r}")));
    }
    check_probability("q", q)?;
    if v == 0 || q == T::one() {
        return Ok(T::one());
    }
    if q == T::zero() {
        return Ok(T::zero());
    }
    let ln_q = q.ln();
    let ln_1mq = (-q).ln_1p();
    let log_odds = ln_q - ln_1mq;
    // Terms past the mode decay monotonically; stop once they are negligible.
    let mode = (T::count(r + 1) * q).floor();
    let cutoff = T::lit(60.0);

    let mut term = T::ln_choose(r, v) + T::count(v) * ln_q + T::count(r - v) * ln_1mq;
    let mut max = term;
    let mut acc = T::one();
    let mut k = v;
    loop {
        if k == r {
            break;
        }
        term = term + (T::count(r - k) / T::count(k + 1)).ln() + log_odds;
        k += 1;
        if term > max {
            acc = acc * (max - term).exp() + T::one();
            max = term;
        } else {
            acc = acc + (term - max).exp();
            if T::count(k) > mode && term < max - cutoff {
                break;
            }
        }
    }
    Ok((max + acc.ln()).exp().min(T::one()))
}

/// Clopper-Pearson lower bound: `sup { q in [0, 1] : Pr[Bin(r, q) >= v] <= beta }`.
///
/// Computed by bisection on [`binom_tail_geq`]; returns 0 when `v = 0` (empty set).
pub fn cpl<T: Real>(r: u64, v: u64, beta: T) -> Result<T> {
    if r == 0 {
        return Err(Error::Domain("Clopper-Pearson bound needs r >= 1".into()));
    }
    if v > r {
        return Err(Error::Domain(format!("success count {v} exceeds trials {r}")));
    }
    if beta.is_nan() || beta <= T::zero() || beta >= T::one() {
        return Err(Error::Domain(format!("beta must lie in (0, 1), got {beta}")));
    }
    if v == 0 {
        return Ok(T::zero());
    }
    let tol = T::lit(1e-10).max(T::resolution());
    let (mut lo, mut hi) = (T::zero(), T::one());
    for _ in 0..200 {
        if hi - lo <= tol {
            break;
        }
        let mid = (lo + hi) / T::lit(2.0);
        if binom_tail_geq(r, mid, v)? <= beta {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo)
}

/// Lower bound on ε with confidence `1 - beta`; negative values are clamped to 0.
pub fn eps_lower_bound<T: Real>(counts: AuditCounts, beta: T) -> Result<ExtendedReal<T>> {
    let lower = cpl(counts.r, counts.v, beta)?;
    if lower <= T::lit(0.5) {
        Ok(ExtendedReal::zero())
    } else {
        logistic_inv(lower)
    }
}

/// Uncorrected privacy level estimation `logistic_inv(v / r)`.
pub fn eps_estimation<T: Real>(counts: AuditCounts) -> ExtendedReal<T> {
    logistic_inv(T::count(counts.v) / T::count(counts.r)).expect("v/r is a probability")
}

/// Arithmetic mean and standard error of the mean (sample standard deviation over √n).
pub fn mean_sem<T: Real>(samples: &[T]) -> Result<(T, T)> {
    if samples.is_empty() {
        return Err(Error::Domain("mean of an empty sample".into()));
    }
    let n = T::count(samples.len() as u64);
    let mean = samples.iter().copied().sum::<T>() / n;
    if samples.len() == 1 {
        return Ok((mean, T::zero()));
    }
    let ss: T = samples.iter().map(|&x| (x - mean) * (x - mean)).sum();
    let sd = (ss / (n - T::one())).sqrt();
    Ok((mean, sd / n.sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    type E = ExtendedReal<f64>;

    /// Direct PMF summation with products, independent of the log-space path.
    fn naive_tail(r: u64, q: f64, v: u64) -> f64 {
        (v..=r)
            .map(|k| {
                let mut c = 1.0;
                for j in 0..k {
                    c *= (r - j) as f64 / (j + 1) as f64;
                }
                c * q.powi(k as i32) * (1.0 - q).powi((r - k) as i32)
            })
            .sum()
    }

    #[test]
    fn logistic_examples() {
        assert_eq!(logistic(E::zero()), 0.5);
        assert_eq!(logistic(E::pos_inf()), 1.0);
        assert_eq!(logistic(E::neg_inf()), 0.0);
        let e2 = 2f64.exp();
        assert_abs_diff_eq!(logistic(E::lit(2.0)), e2 / (e2 + 1.0), epsilon = 1e-15);
        assert_abs_diff_eq!(logistic(E::lit(2.0)), 0.8807970779778823, epsilon = 1e-15);
        assert_eq!(logistic(E::lit(-800.0)), 0.0);
        assert_eq!(logistic(E::lit(800.0)), 1.0);
    }

    #[test]
    fn logistic_inv_examples() {
        assert_eq!(logistic_inv(0.5f64).unwrap().value(), 0.0);
        assert!(logistic_inv(1.0f64).unwrap().is_pos_inf());
        assert!(logistic_inv(0.0f64).unwrap().is_neg_inf());
        assert_abs_diff_eq!(logistic_inv(0.880797f64).unwrap().value(), 2.0, epsilon = 1e-5);
        assert!(matches!(logistic_inv(1.5f64), Err(Error::Domain(_))));
        assert!(matches!(logistic_inv(-0.1f64), Err(Error::Domain(_))));
    }

    #[test]
    fn binomial_tail_examples() {
        assert_eq!(binom_tail_geq(10, 0.5f64, 0).unwrap(), 1.0);
        assert_abs_diff_eq!(binom_tail_geq(1, 0.3f64, 1).unwrap(), 0.3, epsilon = 1e-15);
        let oracle = naive_tail(10, 0.7, 8);
        assert_abs_diff_eq!(oracle, 0.3827827864, epsilon = 1e-9);
        assert_abs_diff_eq!(binom_tail_geq(10, 0.7f64, 8).unwrap(), oracle, epsilon = 1e-12);
        assert!(matches!(binom_tail_geq(3, 0.5f64, 4), Err(Error::Domain(_))));
    }

    #[test]
    fn binomial_tail_agrees_with_naive_sum() {
        for r in [1u64, 2, 7, 20, 60] {
            for v in 0..=r {
                for q in [0.01, 0.2, 0.5, 0.77, 0.99] {
                    let got = binom_tail_geq(r, q, v).unwrap();
                    assert_abs_diff_eq!(got, naive_tail(r, q, v), epsilon = 1e-11);
                }
            }
        }
    }

    #[test]
    fn binomial_tail_large_r_does_not_underflow() {
        // Bin(10^4, 0.5) >= 5000 is just over one half.
        let t = binom_tail_geq(10_000, 0.5f64, 5_000).unwrap();
        assert!(t > 0.5 && t < 0.51, "{t}");
        let tiny = binom_tail_geq(10_000, 0.5f64, 9_000).unwrap();
        assert!((0.0..1e-300).contains(&tiny));
        let t = binom_tail_geq(1_000_000, 0.3f64, 300_000).unwrap();
        assert!(t > 0.49 && t < 0.51, "{t}");
    }

    #[test]
    fn cpl_examples() {
        assert_abs_diff_eq!(cpl(10, 10, 0.05f64).unwrap(), 0.05f64.powf(0.1), epsilon = 1e-9);
        assert_abs_diff_eq!(cpl(10, 10, 0.05f64).unwrap(), 0.741134, epsilon = 1e-6);
        assert_abs_diff_eq!(cpl(1, 1, 0.05f64).unwrap(), 0.05, epsilon = 1e-9);
        assert_eq!(cpl(10, 0, 0.05f64).unwrap(), 0.0);
        assert!(matches!(cpl(10, 3, 0.0f64), Err(Error::Domain(_))));
        assert!(matches!(cpl(10, 3, 1.0f64), Err(Error::Domain(_))));
        assert!(matches!(cpl(0, 0, 0.05f64), Err(Error::Domain(_))));
    }

    #[test]
    fn cpl_matches_beta_quantile() {
        // Clopper-Pearson lower limit is the beta-quantile of Beta(v, r - v + 1).
        use statrs::distribution::{Beta, ContinuousCDF};
        for (r, v) in [(10u64, 3u64), (50, 40), (200, 131), (1000, 700)] {
            let oracle = Beta::new(v as f64, (r - v + 1) as f64).unwrap().inverse_cdf(0.05);
            assert_abs_diff_eq!(cpl(r, v, 0.05f64).unwrap(), oracle, epsilon = 1e-8);
        }
    }

    #[test]
    fn eps_bound_examples() {
        let b = eps_lower_bound(AuditCounts::new(10, 10).unwrap(), 0.05f64).unwrap();
        let c = 0.05f64.powf(0.1);
        assert_abs_diff_eq!(b.value(), (c / (1.0 - c)).ln(), epsilon = 1e-8);
        assert_abs_diff_eq!(b.value(), 1.05187, epsilon = 1e-4);
        assert_eq!(eps_lower_bound(AuditCounts::new(5, 10).unwrap(), 0.05f64).unwrap().value(), 0.0);
        assert_eq!(eps_lower_bound(AuditCounts::new(1, 1).unwrap(), 0.05f64).unwrap().value(), 0.0);
    }

    #[test]
    fn eps_bound_matches_grid_search() {
        // Direct search over ε of the defining supremum.
        for (v, r) in [(10u64, 10u64), (45, 50), (160, 200)] {
            let mut best = 0.0f64;
            let mut eps = 0.0f64;
            while eps < 4.0 {
                if naive_tail(r, logistic(E::lit(eps)), v) <= 0.05 {
                    best = eps;
                }
                eps += 1e-4;
            }
            let got = eps_lower_bound(AuditCounts::new(v, r).unwrap(), 0.05f64).unwrap();
            assert_abs_diff_eq!(got.value(), best, epsilon = 2e-4);
        }
    }

    #[test]
    fn counts_validation() {
        assert_eq!(AuditCounts::new(0, 0), Err(Error::AllAbstain));
        assert!(AuditCounts::new(4, 3).is_err());
        assert_eq!(AuditCounts::new(3, 4).unwrap().accuracy(), 0.75);
    }

    #[test]
    fn mean_sem_examples() {
        assert_eq!(mean_sem(&[1.0f64, 1.0, 1.0]).unwrap(), (1.0, 0.0));
        assert_eq!(mean_sem(&[0.0f64, 2.0]).unwrap(), (1.0, 1.0));
        let (m, s) = mean_sem(&[0.4f64, 0.5, 0.6]).unwrap();
        assert_abs_diff_eq!(m, 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(s, 0.1 / 3f64.sqrt(), epsilon = 1e-12);
        assert_eq!(mean_sem(&[7.0f64]).unwrap(), (7.0, 0.0));
        assert!(mean_sem::<f64>(&[]).is_err());
    }

    #[test]
    fn single_precision_kernels() {
        assert!((cpl(10, 10, 0.05f32).unwrap() - 0.741134).abs() < 1e-5);
        let b = eps_lower_bound(AuditCounts::new(10, 10).unwrap(), 0.05f32).unwrap();
        assert!((b.value() - 1.05187).abs() < 1e-3);
    }
}
