//! Order-statistic machinery for redundant sampling.
//!
//! If branch lengths are i.i.d. with base CDF `F`, the M-th smallest of N
//! draws has CDF `sum_{i=M}^{N} C(N,i) F^i (1-F)^(N-i)` (the binomial tail:
//! the M-th order statistic is below `x` exactly when at least M of the N
//! draws are). Because the tail is non-decreasing in N, sampling more
//! branches stochastically shortens the wait for the first M completions;
//! [`expected_stopping_length`] quantifies that under a concrete length
//! distribution.

use rand::RngCore;

use crate::scalar::Scalar;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum OrderStatError {
    #[error("rank m={m} out of range 1..={n}")]
    RankOutOfRange { m: u32, n: u32 },
    #[error("base CDF value outside [0, 1]")]
    CdfOutOfRange,
    #[error("trials must be >= 1")]
    NoTrials,
}

/// CDF query for the M-th smallest of N i.i.d. draws, evaluated at a point
/// where the base distribution has CDF value `f`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrderStatQuery<S> {
    pub m: u32,
    pub n: u32,
    pub f: S,
}

impl<S: Scalar> OrderStatQuery<S> {
    pub fn new(m: u32, n: u32, f: S) -> Self {
        Self { m, n, f }
    }

    fn validate(&self) -> Result<(), OrderStatError> {
        validate_rank(self.m, self.n)?;
        if self.f < S::zero() || self.f > S::one() || self.f.is_nan() {
            return Err(OrderStatError::CdfOutOfRange);
        }
        Ok(())
    }
}

fn validate_rank(m: u32, n: u32) -> Result<(), OrderStatError> {
    if m < 1 || m > n {
        return Err(OrderStatError::RankOutOfRange { m, n });
    }
    Ok(())
}

/// Direct summation stays accurate while binomial coefficients fit a float
/// mantissa comfortably; beyond this the terms are assembled in log space.
const LOG_SPACE_ABOVE_N: u32 = 60;

/// CDF of the M-th order statistic: `sum_{i=M}^{N} C(N,i) f^i (1-f)^(N-i)`.
pub fn cdf_order_stat<S: Scalar>(query: &OrderStatQuery<S>) -> Result<S, OrderStatError> {
    query.validate()?;
    let (m, n, f) = (query.m, query.n, query.f);
    // m >= 1, so f = 0 kills every term; f = 1 leaves only the i = N term.
    if f == S::zero() {
        return Ok(S::zero());
    }
    if f == S::one() {
        return Ok(S::one());
    }
    let sum = if n <= LOG_SPACE_ABOVE_N {
        direct_tail_sum(m, n, f)
    } else {
        log_space_tail_sum(m, n, f)
    };
    Ok(clamp01(sum))
}

fn direct_tail_sum<S: Scalar>(m: u32, n: u32, f: S) -> S {
    let q = S::one() - f;
    // C(n, m) by multiplicative recurrence, then step i -> i+1.
    let mut coeff = S::one();
    for k in 1..=m {
        coeff = coeff * S::from_u32(n - m + k).unwrap() / S::from_u32(k).unwrap();
    }
    let mut sum = S::zero();
    for i in m..=n {
        sum = sum + coeff * f.powi(i as i32) * q.powi((n - i) as i32);
        if i < n {
            coeff = coeff * S::from_u32(n - i).unwrap() / S::from_u32(i + 1).unwrap();
        }
    }
    sum
}

fn log_space_tail_sum<S: Scalar>(m: u32, n: u32, f: S) -> S {
    let ln_f = f.ln();
    let ln_q = (S::one() - f).ln();
    let mut ln_coeff = S::zero();
    for k in 1..=m {
        ln_coeff = ln_coeff + (S::from_u32(n - m + k).unwrap() / S::from_u32(k).unwrap()).ln();
    }
    let mut sum = S::zero();
    for i in m..=n {
        let ln_term =
            ln_coeff + S::from_u32(i).unwrap() * ln_f + S::from_u32(n - i).unwrap() * ln_q;
        sum = sum + ln_term.exp();
        if i < n {
            ln_coeff =
                ln_coeff + (S::from_u32(n - i).unwrap() / S::from_u32(i + 1).unwrap()).ln();
        }
    }
    sum
}

fn clamp01<S: Scalar>(x: S) -> S {
    x.max(S::zero()).min(S::one())
}

/// Gap `cdf_order_stat(m, n+1, f) - cdf_order_stat(m, n, f)`.
///
/// Coupling the N+1 draws as N draws plus one Bernoulli(f) extra collapses
/// the difference of tail sums to the single term
/// `C(n, m-1) f^m (1-f)^(n-m+1)`, which is non-negative by construction:
/// the CDF never decreases in N, for any rank and any base CDF value.
pub fn monotonicity_gap<S: Scalar>(m: u32, n: u32, f: S) -> Result<S, OrderStatError> {
    OrderStatQuery { m, n, f }.validate()?;
    if f == S::zero() || f == S::one() {
        return Ok(S::zero());
    }
    let exp_q = n - m + 1;
    if n <= LOG_SPACE_ABOVE_N {
        let q = S::one() - f;
        let mut coeff = S::one();
        for k in 1..=(m - 1) {
            coeff = coeff * S::from_u32(n - (m - 1) + k).unwrap() / S::from_u32(k).unwrap();
        }
        Ok(coeff * f.powi(m as i32) * q.powi(exp_q as i32))
    } else {
        let mut ln_coeff = S::zero();
        for k in 1..=(m - 1) {
            ln_coeff =
                ln_coeff + (S::from_u32(n - (m - 1) + k).unwrap() / S::from_u32(k).unwrap()).ln();
        }
        let ln_term = ln_coeff
            + S::from_u32(m).unwrap() * f.ln()
            + S::from_u32(exp_q).unwrap() * (S::one() - f).ln();
        Ok(ln_term.exp())
    }
}

/// Empirical probability that the M-th smallest of N draws is `<= x`,
/// estimated over `trials` independent trials.
///
/// The event holds exactly when at least M of the N draws are `<= x`, so
/// each trial counts draws instead of sorting.
pub fn monte_carlo_order_stat<R: RngCore>(
    m: u32,
    n: u32,
    mut sampler: impl FnMut(&mut R) -> f64,
    x: f64,
    trials: u64,
    rng: &mut R,
) -> Result<f64, OrderStatError> {
    validate_rank(m, n)?;
    if trials == 0 {
        return Err(OrderStatError::NoTrials);
    }
    let mut hits = 0u64;
    for _ in 0..trials {
        let mut below = 0u32;
        for _ in 0..n {
            if sampler(rng) <= x {
                below += 1;
            }
        }
        if below >= m {
            hits += 1;
        }
    }
    Ok(hits as f64 / trials as f64)
}

/// Expected value of the M-th smallest of N draws from a distribution
/// supported on `[lo, hi]` with CDF `base_cdf`, via trapezoidal integration
/// of `E[X_(M)] = lo + integral of (1 - F_(M)(x)) dx` on a uniform grid.
pub fn expected_stopping_length(
    m: u32,
    n: u32,
    base_cdf: impl Fn(f64) -> f64,
    lo: f64,
    hi: f64,
    grid_points: usize,
) -> Result<f64, OrderStatError> {
    validate_rank(m, n)?;
    let steps = grid_points.max(2) - 1;
    let h = (hi - lo) / steps as f64;
    let survival = |x: f64| -> Result<f64, OrderStatError> {
        let f = base_cdf(x).clamp(0.0, 1.0);
        Ok(1.0 - cdf_order_stat(&OrderStatQuery { m, n, f })?)
    };
    let mut integral = 0.5 * (survival(lo)? + survival(hi)?);
    for step in 1..steps {
        integral += survival(lo + h * step as f64)?;
    }
    Ok(lo + integral * h)
}
