//! Budget-aware query policy. Each incoming prediction entropy is compared
//! against a threshold that is static during a short warm-up and afterwards
//! tracks the running entropy distribution: tau = mean + z * stddev. The
//! z-score tightens from `z_selection` to `z_high` whenever the realized
//! query ratio reaches `switch_ratio`, which pulls the long-run ratio back
//! toward the budget.

use crate::math::{inverse_normal_cdf, OnlineEstimator};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolicyError {
    #[error("invalid policy config: {0}")]
    InvalidConfig(String),
    #[error("entropy observation must be finite, got {0}")]
    NonFiniteEntropy(f64),
    #[error("query ratio is undefined before the first sample")]
    NoSamples,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyConfig {
    /// Threshold used while fewer than `t_min` samples have been seen.
    pub tau0: f64,
    /// Warm-up length in samples.
    pub t_min: u64,
    /// Target query budget as a fraction of the stream.
    pub alpha: f64,
    /// z-score while the realized ratio sits below `switch_ratio`.
    pub z_selection: f64,
    /// Stricter z-score once the realized ratio reaches `switch_ratio`.
    pub z_high: f64,
    /// Ratio at which the policy switches to `z_high`.
    pub switch_ratio: f64,
    /// Absolute cap on total queries, on top of the soft budget control.
    pub hard_cap: Option<u64>,
}

impl PolicyConfig {
    /// Standard configuration for a given budget: selection at the 95th
    /// percentile, switching to the 97.5th once the ratio hits the budget.
    pub fn with_budget(alpha: f64) -> Self {
        Self {
            tau0: 2.0,
            t_min: 30,
            alpha,
            z_selection: inverse_normal_cdf(0.95).expect("0.95 is a valid quantile"),
            z_high: inverse_normal_cdf(0.975).expect("0.975 is a valid quantile"),
            switch_ratio: alpha,
            hard_cap: None,
        }
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        let fail = |msg: String| Err(PolicyError::InvalidConfig(msg));
        if !self.tau0.is_finite() {
            return fail(format!("tau0 must be finite, got {}", self.tau0));
        }
        if self.t_min == 0 {
            return fail("t_min must be at least 1".into());
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return fail(format!("alpha must lie in (0, 1), got {}", self.alpha));
        }
        if !(self.switch_ratio >= self.alpha && self.switch_ratio < 1.0) {
            return fail(format!(
                "switch_ratio must lie in [alpha, 1), got {} with alpha {}",
                self.switch_ratio, self.alpha
            ));
        }
        if !self.z_selection.is_finite() || !self.z_high.is_finite() {
            return fail("z-scores must be finite".into());
        }
        if self.z_high <= self.z_selection {
            return fail(format!(
                "z_high ({}) must exceed z_selection ({})",
                self.z_high, self.z_selection
            ));
        }
        Ok(())
    }
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self::with_budget(0.05)
    }
}

/// Mutable side of the policy: sample counter, query counter, and the
/// running entropy statistics all observed entropies feed into (queried or
/// not).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PolicyState {
    pub t: u64,
    pub n_queried: u64,
    pub entropy_stats: OnlineEstimator,
    pub last_tau: f64,
}

impl PolicyState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// Outcome of one observation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Decision {
    pub query: bool,
    /// Threshold the observation was compared against.
    pub tau: f64,
    /// Whether the strict z-score was in effect.
    pub strict: bool,
}

fn threshold_and_regime(cfg: &PolicyConfig, st: &PolicyState) -> (f64, bool) {
    if st.t < cfg.t_min {
        return (cfg.tau0, false);
    }
    let strict = st.n_queried as f64 / st.t as f64 >= cfg.switch_ratio;
    let z = if strict { cfg.z_high } else { cfg.z_selection };
    (st.entropy_stats.mean() + z * st.entropy_stats.stddev(), strict)
}

/// Threshold the next observation will face.
pub fn current_threshold(cfg: &PolicyConfig, st: &PolicyState) -> f64 {
    threshold_and_regime(cfg, st).0
}

/// Record an entropy observation without making a query decision: advances
/// the sample counter and the running statistics, and returns the threshold
/// that was in effect for this sample.
pub fn observe(cfg: &PolicyConfig, st: &mut PolicyState, h: f64) -> Result<Decision, PolicyError> {
    if !h.is_finite() {
        return Err(PolicyError::NonFiniteEntropy(h));
    }
    let (tau, strict) = threshold_and_regime(cfg, st);
    st.entropy_stats
        .update(h)
        .map_err(|_| PolicyError::NonFiniteEntropy(h))?;
    st.t += 1;
    st.last_tau = tau;
    Ok(Decision {
        query: false,
        tau,
        strict,
    })
}

/// Full policy step: the threshold is taken from the state as it was before
/// this observation, the decision requires strictly exceeding it, and the
/// hard cap (when set) can veto regardless of entropy.
pub fn observe_and_decide(
    cfg: &PolicyConfig,
    st: &mut PolicyState,
    h: f64,
) -> Result<Decision, PolicyError> {
    let under_cap = cfg.hard_cap.map_or(true, |cap| st.n_queried < cap);
    let mut decision = observe(cfg, st, h)?;
    decision.query = h > decision.tau && under_cap;
    if decision.query {
        st.n_queried += 1;
    }
    Ok(decision)
}

/// Fraction of samples queried so far.
pub fn query_ratio(st: &PolicyState) -> Result<f64, PolicyError> {
    if st.t == 0 {
        return Err(PolicyError::NoSamples);
    }
    Ok(st.n_queried as f64 / st.t as f64)
}
