//! Shared numeric primitives: validated probability/logit vectors, entropy,
//! a single-pass mean/variance estimator, and the standard normal CDF with
//! its inverse. Everything downstream (thresholding, losses, theory sims)
//! builds on these.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MathError {
    #[error("invalid logits: every entry must be finite")]
    InvalidLogits,
    #[error("invalid probability vector: {0}")]
    InvalidProbabilities(String),
    #[error("observation must be finite, got {0}")]
    NonFiniteObservation(f64),
    #[error("quantile must lie strictly inside (0, 1), got {0}")]
    QuantileOutOfRange(f64),
}

/// Non-negative entries summing to 1 within `SUM_TOLERANCE`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityVector(Vec<f64>);

/// Maximum allowed deviation of a probability vector's sum from 1.
pub const SUM_TOLERANCE: f64 = 1e-9;

impl ProbabilityVector {
    pub fn new(probs: Vec<f64>) -> Result<Self, MathError> {
        if probs.is_empty() {
            return Err(MathError::InvalidProbabilities("empty vector".into()));
        }
        for (i, &p) in probs.iter().enumerate() {
            if !p.is_finite() || p < 0.0 {
                return Err(MathError::InvalidProbabilities(format!(
                    "entry {i} is {p}, want finite and non-negative"
                )));
            }
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > SUM_TOLERANCE {
            return Err(MathError::InvalidProbabilities(format!(
                "entries sum to {sum}, want 1 within {SUM_TOLERANCE:e}"
            )));
        }
        Ok(Self(probs))
    }

    pub fn uniform(k: usize) -> Self {
        assert!(k > 0, "uniform distribution needs at least one class");
        Self(vec![1.0 / k as f64; k])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Index of the largest entry; ties resolve to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.0.iter().enumerate().skip(1) {
            if p > self.0[best] {
                best = i;
            }
        }
        best
    }
}

/// Finite raw scores, one per class.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitVector(Vec<f64>);

impl LogitVector {
    pub fn new(logits: Vec<f64>) -> Result<Self, MathError> {
        if logits.is_empty() || logits.iter().any(|x| !x.is_finite()) {
            return Err(MathError::InvalidLogits);
        }
        Ok(Self(logits))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Numerically stable softmax: the maximum logit is subtracted before
/// exponentiation, so arbitrarily large magnitudes cannot overflow.
pub fn softmax(logits: &LogitVector) -> ProbabilityVector {
    let xs = logits.as_slice();
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    ProbabilityVector(exps.into_iter().map(|e| e / sum).collect())
}

/// Shannon entropy in nats, with the 0 * ln 0 = 0 convention.
pub fn entropy(probs: &ProbabilityVector) -> f64 {
    let mut h = 0.0;
    for &p in probs.as_slice() {
        if p > 0.0 {
            h -= p * p.ln();
        }
    }
    h.max(0.0)
}

/// Streaming mean/variance accumulator (Welford's recurrence). The running
/// sum of squared deviations is updated incrementally, so shifted data does
/// not suffer catastrophic cancellation.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OnlineEstimator {
    count: u64,
    mean: f64,
    m2: f64,
}

impl OnlineEstimator {
    pub fn new() -> Self {
        Self::default()
    }

    /// Test fixture: forge an estimator in a given state.
    #[cfg(test)]
    pub(crate) fn from_parts(count: u64, mean: f64, m2: f64) -> Self {
        Self { count, mean, m2 }
    }

    pub fn update(&mut self, x: f64) -> Result<(), MathError> {
        if !x.is_finite() {
            return Err(MathError::NonFiniteObservation(x));
        }
        self.count += 1;
        let delta = x - self.mean;
        self.mean += delta / self.count as f64;
        let delta2 = x - self.mean;
        self.m2 += delta * delta2;
        Ok(())
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    /// Running mean; 0 before the first observation.
    pub fn mean(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.mean
        }
    }

    /// Unbiased sample variance; 0 with fewer than two observations.
    pub fn variance(&self) -> f64 {
        if self.count < 2 {
            0.0
        } else {
            self.m2 / (self.count - 1) as f64
        }
    }

    pub fn stddev(&self) -> f64 {
        self.variance().sqrt()
    }
}

/// Empirical quantiles of a growing sample, kept exactly in a sorted
/// vector. Insertion is linear in the sample size, which is fine at the
/// stream lengths this crate targets.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunningQuantile {
    sorted: Vec<f64>,
}

impl RunningQuantile {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, x: f64) -> Result<(), MathError> {
        if !x.is_finite() {
            return Err(MathError::NonFiniteObservation(x));
        }
        let at = self.sorted.partition_point(|&v| v < x);
        self.sorted.insert(at, x);
        Ok(())
    }

    pub fn count(&self) -> u64 {
        self.sorted.len() as u64
    }

    /// Smallest observation with empirical CDF at least `q`; with few
    /// observations the upper quantiles degenerate to the maximum. None
    /// before the first observation.
    pub fn quantile(&self, q: f64) -> Result<Option<f64>, MathError> {
        if !(q > 0.0 && q < 1.0) {
            return Err(MathError::QuantileOutOfRange(q));
        }
        if self.sorted.is_empty() {
            return Ok(None);
        }
        let rank = (q * self.sorted.len() as f64).ceil() as usize;
        Ok(Some(self.sorted[rank.clamp(1, self.sorted.len()) - 1]))
    }
}

const FRAC_1_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;

/// Error function. Taylor series near the origin, Legendre continued
/// fraction for the complement in the tails; both converge to double
/// precision on their branch.
pub fn erf(x: f64) -> f64 {
    if x < 0.0 {
        return -erf(-x);
    }
    if x <= 3.0 {
        erf_series(x)
    } else {
        1.0 - erfc_tail(x)
    }
}

/// Complementary error function, accurate for tiny tail masses.
pub fn erfc(x: f64) -> f64 {
    if x > 3.0 {
        erfc_tail(x)
    } else if x >= -3.0 {
        1.0 - erf_series(x)
    } else {
        2.0 - erfc_tail(-x)
    }
}

/// erf(x) = 2/sqrt(pi) * sum_n (-1)^n x^(2n+1) / (n! (2n+1)), |x| <= 3.
fn erf_series(x: f64) -> f64 {
    if x == 0.0 {
        return 0.0;
    }
    let x2 = x * x;
    let mut power = x;
    let mut sum = x;
    for n in 1..200u32 {
        power *= -x2 / n as f64;
        let term = power / (2 * n + 1) as f64;
        sum += term;
        if term.abs() <= sum.abs() * 1e-17 {
            break;
        }
    }
    sum * std::f64::consts::FRAC_2_SQRT_PI
}

/// erfc(x) = exp(-x^2)/sqrt(pi) / (x + (1/2)/(x + 1/(x + (3/2)/(x + ...)))),
/// evaluated bottom-up at fixed depth; converges fast for x >= 3.
fn erfc_tail(x: f64) -> f64 {
    let mut frac = 0.0;
    for k in (1..=100u32).rev() {
        frac = (k as f64 / 2.0) / (x + frac);
    }
    (-x * x).exp() / (std::f64::consts::PI.sqrt() * (x + frac))
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x * FRAC_1_SQRT_2)
}

/// Standard normal quantile, found by bisection against `normal_cdf`.
/// Accurate to well below 1e-6 over any quantile representable in (0, 1).
pub fn inverse_normal_cdf(q: f64) -> Result<f64, MathError> {
    if !q.is_finite() || q <= 0.0 || q >= 1.0 {
        return Err(MathError::QuantileOutOfRange(q));
    }
    let mut lo = -40.0;
    let mut hi = 40.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if normal_cdf(mid) < q {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-13 {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const LN_2: f64 = std::f64::consts::LN_2;

    fn assert_close(actual: f64, expected: f64, tol: f64) {
        assert!(
            (actual - expected).abs() <= tol,
            "got {actual}, want {expected} within {tol:e}"
        );
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let l = LogitVector::new(vec![7.3, 7.3, 7.3]).unwrap();
        for &p in softmax(&l).as_slice() {
            assert_close(p, 1.0 / 3.0, 1e-15);
        }
    }

    #[test]
    fn softmax_of_log_odds_recovers_the_odds() {
        let l = LogitVector::new(vec![1.0_f64.ln(), 3.0_f64.ln()]).unwrap();
        let p = softmax(&l);
        assert_close(p.as_slice()[0], 0.25, 1e-12);
        assert_close(p.as_slice()[1], 0.75, 1e-12);
    }

    #[test]
    fn softmax_survives_huge_logits() {
        let l = LogitVector::new(vec![1000.0, 999.0, -1000.0]).unwrap();
        let p = softmax(&l);
        assert!(p.as_slice().iter().all(|x| x.is_finite()));
        assert_close(p.as_slice().iter().sum::<f64>(), 1.0, 1e-12);
        assert_eq!(p.argmax(), 0);
    }

    #[test]
    fn non_finite_logits_are_rejected() {
        assert_eq!(
            LogitVector::new(vec![1.0, f64::NAN]).unwrap_err(),
            MathError::InvalidLogits
        );
        assert_eq!(
            LogitVector::new(vec![f64::INFINITY]).unwrap_err(),
            MathError::InvalidLogits
        );
        assert_eq!(LogitVector::new(vec![]).unwrap_err(), MathError::InvalidLogits);
    }

    #[test]
    fn probability_vector_validation() {
        assert!(ProbabilityVector::new(vec![0.5, 0.5]).is_ok());
        assert!(ProbabilityVector::new(vec![0.6, 0.6]).is_err());
        assert!(ProbabilityVector::new(vec![-0.1, 1.1]).is_err());
        assert!(ProbabilityVector::new(vec![]).is_err());
        assert!(ProbabilityVector::new(vec![f64::NAN, 1.0]).is_err());
    }

    #[test]
    fn entropy_of_point_mass_is_zero() {
        let p = ProbabilityVector::new(vec![1.0, 0.0, 0.0]).unwrap();
        assert_eq!(entropy(&p), 0.0);
    }

    #[test]
    fn entropy_of_fair_coin_is_ln_two() {
        let p = ProbabilityVector::new(vec![0.5, 0.5]).unwrap();
        assert_close(entropy(&p), LN_2, 1e-12);
    }

    #[test]
    fn entropy_of_uniform_four_is_ln_four() {
        assert_close(entropy(&ProbabilityVector::uniform(4)), 1.3862943611198906, 1e-12);
    }

    #[test]
    fn argmax_breaks_ties_low() {
        let p = ProbabilityVector::new(vec![0.25, 0.25, 0.25, 0.25]).unwrap();
        assert_eq!(p.argmax(), 0);
    }

    #[test]
    fn estimator_on_one_two_three() {
        let mut e = OnlineEstimator::new();
        for x in [1.0, 2.0, 3.0] {
            e.update(x).unwrap();
        }
        assert_close(e.mean(), 2.0, 1e-15);
        assert_close(e.variance(), 1.0, 1e-15);
        assert_close(e.stddev(), 1.0, 1e-15);
    }

    #[test]
    fn estimator_small_counts() {
        let e = OnlineEstimator::new();
        assert_eq!(e.count(), 0);
        assert_eq!(e.mean(), 0.0);
        assert_eq!(e.stddev(), 0.0);

        let mut e = OnlineEstimator::new();
        e.update(5.0).unwrap();
        assert_eq!(e.mean(), 5.0);
        assert_eq!(e.stddev(), 0.0);
    }

    #[test]
    fn estimator_of_constant_sequence_has_zero_variance() {
        let mut e = OnlineEstimator::new();
        for _ in 0..50 {
            e.update(4.25).unwrap();
        }
        assert_eq!(e.variance(), 0.0);
    }

    #[test]
    fn estimator_rejects_non_finite() {
        let mut e = OnlineEstimator::new();
        assert!(matches!(
            e.update(f64::NAN),
            Err(MathError::NonFiniteObservation(_))
        ));
        assert_eq!(e.count(), 0);
    }

    #[test]
    fn estimator_is_stable_under_large_shift() {
        // Same spread around two very different centers must give the
        // same variance.
        let mut near = OnlineEstimator::new();
        let mut far = OnlineEstimator::new();
        for x in [1.0, 2.0, 3.0] {
            near.update(x).unwrap();
            far.update(1e9 + x).unwrap();
        }
        assert_close(far.variance(), near.variance(), 1e-6);
        assert_close(far.mean(), 1e9 + 2.0, 1e-6);
    }

    #[test]
    fn quantile_of_small_samples_is_the_maximum() {
        let mut q = RunningQuantile::new();
        assert_eq!(q.quantile(0.99).unwrap(), None);
        for x in [0.4, 2.0, 1.1] {
            q.insert(x).unwrap();
        }
        // With fewer than 100 observations the 99th percentile has no
        // interior rank to land on.
        assert_eq!(q.quantile(0.99).unwrap(), Some(2.0));
        assert_eq!(q.quantile(0.5).unwrap(), Some(1.1));
    }

    #[test]
    fn quantile_ranks_match_a_sorted_scan() {
        let mut q = RunningQuantile::new();
        for i in (0..200).rev() {
            q.insert(i as f64).unwrap();
        }
        assert_eq!(q.count(), 200);
        // ceil(0.99 * 200) = 198th smallest, i.e. value 197.
        assert_eq!(q.quantile(0.99).unwrap(), Some(197.0));
        assert_eq!(q.quantile(0.005).unwrap(), Some(0.0));
    }

    #[test]
    fn quantile_rejects_bad_inputs() {
        let mut q = RunningQuantile::new();
        assert!(matches!(
            q.insert(f64::INFINITY),
            Err(MathError::NonFiniteObservation(_))
        ));
        q.insert(1.0).unwrap();
        assert!(matches!(q.quantile(0.0), Err(MathError::QuantileOutOfRange(_))));
        assert!(matches!(q.quantile(1.0), Err(MathError::QuantileOutOfRange(_))));
    }

    fn two_pass_mean_var(xs: &[f64]) -> (f64, f64) {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = if xs.len() < 2 {
            0.0
        } else {
            xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)
        };
        (mean, var)
    }

    #[test]
    fn erf_matches_reference_points() {
        // Reference values from standard tables.
        assert_close(erf(1.0), 0.8427007929497149, 1e-14);
        assert_close(erf(2.0), 0.9953222650189527, 1e-14);
        assert_close(erf(-1.0), -0.8427007929497149, 1e-14);
        assert_eq!(erf(0.0), 0.0);
        assert_close(erfc(4.0), 1.541725790028002e-8, 1e-20);
    }

    #[test]
    fn normal_cdf_reference_points() {
        assert_close(normal_cdf(0.0), 0.5, 1e-15);
        assert_close(normal_cdf(1.959963984540054), 0.975, 1e-12);
        assert_close(normal_cdf(-1.959963984540054), 0.025, 1e-12);
    }

    #[test]
    fn inverse_normal_cdf_reference_quantiles() {
        assert_close(inverse_normal_cdf(0.5).unwrap(), 0.0, 1e-9);
        assert_close(inverse_normal_cdf(0.95).unwrap(), 1.6448536269514722, 1e-6);
        assert_close(inverse_normal_cdf(0.975).unwrap(), 1.959963984540054, 1e-6);
        assert_close(inverse_normal_cdf(0.99).unwrap(), 2.3263478740408408, 1e-6);
    }

    #[test]
    fn inverse_normal_cdf_rejects_bad_quantiles() {
        for q in [0.0, 1.0, -0.5, 2.0, f64::NAN] {
            assert!(matches!(
                inverse_normal_cdf(q),
                Err(MathError::QuantileOutOfRange(_))
            ));
        }
    }

    proptest! {
        #[test]
        fn prop_softmax_is_a_probability_vector(xs in proptest::collection::vec(-50.0..50.0f64, 1..20)) {
            let p = softmax(&LogitVector::new(xs).unwrap());
            prop_assert!((p.as_slice().iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            prop_assert!(p.as_slice().iter().all(|&x| x >= 0.0));
        }

        #[test]
        fn prop_softmax_preserves_order(xs in proptest::collection::vec(-50.0..50.0f64, 2..12)) {
            let l = LogitVector::new(xs.clone()).unwrap();
            let p = softmax(&l);
            for i in 0..xs.len() {
                for j in 0..xs.len() {
                    if xs[i] > xs[j] {
                        prop_assert!(p.as_slice()[i] > p.as_slice()[j]);
                    }
                }
            }
        }

        #[test]
        fn prop_softmax_is_shift_invariant(
            xs in proptest::collection::vec(-30.0..30.0f64, 1..10),
            c in -100.0..100.0f64,
        ) {
            let a = softmax(&LogitVector::new(xs.clone()).unwrap());
            let shifted: Vec<f64> = xs.iter().map(|x| x + c).collect();
            let b = softmax(&LogitVector::new(shifted).unwrap());
            for (pa, pb) in a.as_slice().iter().zip(b.as_slice()) {
                prop_assert!((pa - pb).abs() <= 1e-12);
            }
        }

        #[test]
        fn prop_estimator_matches_two_pass(xs in proptest::collection::vec(-1e3..1e3f64, 1..200)) {
            let mut e = OnlineEstimator::new();
            for &x in &xs {
                e.update(x).unwrap();
            }
            let (mean, var) = two_pass_mean_var(&xs);
            prop_assert!((e.mean() - mean).abs() <= 1e-10 * mean.abs().max(1.0));
            prop_assert!((e.variance() - var).abs() <= 1e-10 * var.abs().max(1.0));
        }

        #[test]
        fn prop_entropy_is_maximized_by_uniform(
            k in 1usize..32,
            raw in proptest::collection::vec(1e-3..1.0f64, 32),
        ) {
            let total: f64 = raw[..k].iter().sum();
            let p = ProbabilityVector::new(raw[..k].iter().map(|x| x / total).collect()).unwrap();
            let h = entropy(&p);
            let h_max = entropy(&ProbabilityVector::uniform(k));
            prop_assert!(h <= h_max + 1e-9);
            prop_assert!((h_max - (k as f64).ln()).abs() <= 1e-12);
        }

        #[test]
        fn prop_inverse_cdf_roundtrip(z in -4.0..4.0f64) {
            let q = normal_cdf(z);
            let back = inverse_normal_cdf(q).unwrap();
            prop_assert!((back - z).abs() <= 1e-5, "z={z} back={back}");
        }

        #[test]
        fn prop_normal_cdf_is_monotone(a in -8.0..8.0f64, b in -8.0..8.0f64) {
            if a < b {
                prop_assert!(normal_cdf(a) <= normal_cdf(b));
            }
        }
    }
}
