//! Empirical checks of the two analysis claims, run against synthetic
//! inputs rather than the learning pipeline. The query-ratio check feeds
//! i.i.d. Gaussian surrogate uncertainties to the policy, taking the
//! Gaussian assumption literally; pipeline entropies are neither i.i.d.
//! nor Gaussian, and the pipeline-level rate is only checked loosely
//! elsewhere. The balance check drives the buffer with random labeled
//! insertions.
//!
//! Defaults here switch to the strict regime at 1.5x the budget, the
//! level the analysis studies; the adaptation pipeline switches at the
//! budget itself.

use crate::buffer::{BufferEntry, BufferError, LabelBuffer};
use crate::policy::{observe_and_decide, PolicyConfig, PolicyError, PolicyState};
use crate::rng::{mix_seed, stream_rng, tags};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TheoryError {
    #[error("invalid simulation setup: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Buffer(#[from] BufferError),
}

/// Policy configuration for theory runs: budget alpha with the switch
/// level at 1.5x alpha.
pub fn theory_policy_config(alpha: f64) -> Result<PolicyConfig, TheoryError> {
    let mut cfg = PolicyConfig::with_budget(alpha);
    cfg.switch_ratio = 1.5 * alpha;
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryRatioRecord {
    pub t: u64,
    pub n_queried: u64,
    /// Running query ratio n_queried / t.
    pub ratio: f64,
    /// Regime the decision at this step was made under.
    pub strict: bool,
    /// Threshold the decision compared against.
    pub tau: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryRatioTrace {
    pub records: Vec<QueryRatioRecord>,
}

impl QueryRatioTrace {
    pub fn final_ratio(&self) -> f64 {
        self.records.last().map_or(0.0, |r| r.ratio)
    }

    pub fn final_queried(&self) -> u64 {
        self.records.last().map_or(0, |r| r.n_queried)
    }

    /// Fraction of steps decided under the strict threshold.
    pub fn strict_fraction(&self) -> f64 {
        self.strict_fraction_at(self.records.len())
    }

    /// Strict-regime occupancy over the first `n` steps.
    pub fn strict_fraction_at(&self, n: usize) -> f64 {
        let n = n.min(self.records.len());
        if n == 0 {
            return 0.0;
        }
        self.records[..n].iter().filter(|r| r.strict).count() as f64 / n as f64
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,n_queried,ratio,regime,tau\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.t,
                r.n_queried,
                r.ratio,
                if r.strict { "strict" } else { "lenient" },
                r.tau
            ));
        }
        out
    }

    pub fn summary(&self) -> String {
        format!(
            "n_steps={}\nn_queried={}\nfinal_ratio={}\nstrict_fraction={}\n",
            self.records.len(),
            self.final_queried(),
            self.final_ratio(),
            self.strict_fraction()
        )
    }
}

/// Run the query policy over i.i.d. Gaussian surrogate uncertainties and
/// record the running ratio after every step.
pub fn simulate_query_ratio(
    mu: f64,
    sigma: f64,
    cfg: &PolicyConfig,
    n_steps: u64,
    seed: u64,
) -> Result<QueryRatioTrace, TheoryError> {
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(TheoryError::BadConfig(format!(
            "sigma must be positive and finite, got {sigma}"
        )));
    }
    if !mu.is_finite() {
        return Err(TheoryError::BadConfig(format!("mu must be finite, got {mu}")));
    }
    if n_steps < cfg.t_min {
        return Err(TheoryError::BadConfig(format!(
            "n_steps {n_steps} shorter than the warm-up {}",
            cfg.t_min
        )));
    }
    cfg.validate()?;
    let normal = Normal::new(mu, sigma).expect("parameters validated");
    let mut rng = stream_rng(seed, tags::EPISODE);
    let mut state = PolicyState::new();
    let mut records = Vec::with_capacity(n_steps as usize);
    for _ in 0..n_steps {
        let h = normal.sample(&mut rng);
        let decision = observe_and_decide(cfg, &mut state, h)?;
        records.push(QueryRatioRecord {
            t: state.t,
            n_queried: state.n_queried,
            ratio: state.n_queried as f64 / state.t as f64,
            strict: decision.strict,
            tau: decision.tau,
        });
    }
    Ok(QueryRatioTrace { records })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BalanceRecord {
    /// 1-based insertion index.
    pub step: u64,
    pub f_balance: f64,
    pub counts: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BalanceTrace {
    pub records: Vec<BalanceRecord>,
    /// Insertion step at which the buffer reached capacity.
    pub filled_at: u64,
    /// First step with f_balance exactly 0, if it ever balanced.
    pub first_equilibrium_step: Option<u64>,
}

impl BalanceTrace {
    pub fn final_f(&self) -> f64 {
        self.records.last().map_or(0.0, |r| r.f_balance)
    }

    pub fn to_csv(&self) -> String {
        let k = self.records.first().map_or(0, |r| r.counts.len());
        let headers: Vec<String> = (0..k).map(|c| format!("count_{c}")).collect();
        let mut out = format!("step,f_balance,{}\n", headers.join(","));
        for r in &self.records {
            let counts: Vec<String> = r.counts.iter().map(|c| c.to_string()).collect();
            out.push_str(&format!("{},{},{}\n", r.step, r.f_balance, counts.join(",")));
        }
        out
    }

    pub fn summary(&self) -> String {
        format!(
            "insertions={}\nfilled_at={}\nfinal_f_balance={}\nfirst_equilibrium_step={}\n",
            self.records.len(),
            self.filled_at,
            self.final_f(),
            self.first_equilibrium_step
                .map_or_else(|| "none".to_string(), |s| s.to_string())
        )
    }
}

fn run_balance_trial(
    k_classes: usize,
    capacity: usize,
    budget: u64,
    class_dist: &[f64],
    seed: u64,
) -> Result<BalanceTrace, TheoryError> {
    if class_dist.len() != k_classes {
        return Err(TheoryError::BadConfig(format!(
            "class_dist has {} entries for {k_classes} classes",
            class_dist.len()
        )));
    }
    let sum: f64 = class_dist.iter().sum();
    if class_dist.iter().any(|&w| !(w.is_finite() && w >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
        return Err(TheoryError::BadConfig("class_dist must be a distribution".into()));
    }
    let mut buffer = LabelBuffer::new(capacity, k_classes)?;
    let mut rng = stream_rng(seed, tags::EPISODE);
    let mut records = Vec::with_capacity(budget as usize);
    let mut filled_at = 0;
    let mut first_equilibrium_step = None;
    for step in 1..=budget {
        let label = sample_class(class_dist, &mut rng);
        let entry = BufferEntry {
            sample_id: step - 1,
            input: Vec::new(),
            label,
            inserted_at: step - 1,
            last_ce: rng.gen_range(0.0..5.0),
        };
        buffer.insert(entry)?;
        let f = buffer.balance_measure();
        if filled_at == 0 && buffer.is_full() {
            filled_at = step;
        }
        if first_equilibrium_step.is_none() && f == 0.0 {
            first_equilibrium_step = Some(step);
        }
        records.push(BalanceRecord {
            step,
            f_balance: f,
            counts: buffer.class_counts().to_vec(),
        });
    }
    Ok(BalanceTrace {
        records,
        filled_at,
        first_equilibrium_step,
    })
}

fn sample_class<R: Rng>(dist: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (c, &w) in dist.iter().enumerate() {
        acc += w;
        if u < acc {
            return c;
        }
    }
    dist.len() - 1
}

/// Drive the buffer with random-class insertions and record the balance
/// trajectory. The equilibrium claim needs a full buffer and a capacity
/// the classes divide evenly, so both are preconditions here.
pub fn simulate_buffer_balance(
    k_classes: usize,
    capacity: usize,
    budget: u64,
    class_dist: &[f64],
    seed: u64,
) -> Result<BalanceTrace, TheoryError> {
    if k_classes == 0 || capacity == 0 || capacity % k_classes != 0 {
        return Err(TheoryError::BadConfig(format!(
            "capacity {capacity} must be a positive multiple of k_classes {k_classes}"
        )));
    }
    if budget <= capacity as u64 {
        return Err(TheoryError::BadConfig(format!(
            "budget {budget} must exceed capacity {capacity}"
        )));
    }
    run_balance_trial(k_classes, capacity, budget, class_dist, seed)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FailureRateRow {
    pub budget: u64,
    /// Fraction of trials whose final f_balance exceeded 2.
    pub failure_rate: f64,
}

/// For each budget, the empirical probability (over seeded trials with a
/// uniform class stream) that the final balance stays above 2. Budgets at
/// or below capacity are allowed: they measure fill-time imbalance.
pub fn failure_rate_vs_budget(
    k_classes: usize,
    capacity: usize,
    budgets: &[u64],
    trials: u64,
    seed: u64,
) -> Result<Vec<FailureRateRow>, TheoryError> {
    if k_classes == 0 || capacity == 0 || capacity % k_classes != 0 {
        return Err(TheoryError::BadConfig(format!(
            "capacity {capacity} must be a positive multiple of k_classes {k_classes}"
        )));
    }
    if trials == 0 {
        return Err(TheoryError::BadConfig("need at least one trial".into()));
    }
    if budgets.is_empty() || budgets.iter().any(|&b| b == 0) {
        return Err(TheoryError::BadConfig("budgets must be non-empty and positive".into()));
    }
    let uniform = vec![1.0 / k_classes as f64; k_classes];
    let mut rows = Vec::with_capacity(budgets.len());
    for &budget in budgets {
        let mut failures = 0u64;
        for trial in 0..trials {
            let trial_seed = mix_seed(seed, budget.wrapping_mul(100_003).wrapping_add(trial));
            let trace = run_balance_trial(k_classes, capacity, budget, &uniform, trial_seed)?;
            if trace.final_f() > 2.0 {
                failures += 1;
            }
        }
        rows.push(FailureRateRow {
            budget,
            failure_rate: failures as f64 / trials as f64,
        });
    }
    Ok(rows)
}

pub fn failure_table_to_csv(rows: &[FailureRateRow]) -> String {
    let mut out = String::from("budget,failure_rate\n");
    for r in rows {
        out.push_str(&format!("{},{}\n", r.budget, r.failure_rate));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn theory_config_switches_at_one_and_a_half_alpha() {
        let cfg = theory_policy_config(0.05).unwrap();
        assert!((cfg.switch_ratio - 0.075).abs() < 1e-12);
        assert!((cfg.alpha - 0.05).abs() < 1e-12);
    }

    #[test]
    fn gaussian_surrogates_converge_to_the_budget() {
        let cfg = theory_policy_config(0.05).unwrap();
        let trace = simulate_query_ratio(0.0, 1.0, &cfg, 20_000, 11).unwrap();
        let r = trace.final_ratio();
        assert!((r - 0.05).abs() <= 0.01, "final ratio {r}");
    }

    #[test]
    fn budget_holds_across_seeds() {
        let cfg = theory_policy_config(0.05).unwrap();
        let mut within = 0;
        for seed in 0..50u64 {
            let trace = simulate_query_ratio(0.0, 1.0, &cfg, 20_000, seed).unwrap();
            if (trace.final_ratio() - 0.05).abs() <= 0.01 {
                within += 1;
            }
        }
        assert!(within >= 48, "only {within}/50 seeds within tolerance");
    }

    #[test]
    fn nothing_above_threshold_means_zero_ratio() {
        // All-warm-up run with draws far below the static threshold:
        // no step can query, so the final ratio is exactly zero.
        let cfg = theory_policy_config(0.05).unwrap();
        let trace = simulate_query_ratio(0.0, 1e-9, &cfg, cfg.t_min, 3).unwrap();
        assert_eq!(trace.final_queried(), 0);
        assert_eq!(trace.final_ratio(), 0.0);
    }

    #[test]
    fn strict_occupancy_shrinks_with_horizon() {
        let cfg = theory_policy_config(0.05).unwrap();
        let horizons = [1_000usize, 5_000, 20_000];
        let mut avg = [0.0f64; 3];
        for seed in 0..10u64 {
            let trace = simulate_query_ratio(0.0, 1.0, &cfg, 20_000, 1000 + seed).unwrap();
            for (a, &n) in avg.iter_mut().zip(&horizons) {
                *a += trace.strict_fraction_at(n) / 10.0;
            }
        }
        assert!(
            avg[0] >= avg[1] && avg[1] >= avg[2],
            "occupancy grew with horizon: {avg:?}"
        );
    }

    #[test]
    fn trace_records_are_consistent() {
        let cfg = theory_policy_config(0.1).unwrap();
        let trace = simulate_query_ratio(1.0, 0.5, &cfg, 500, 7).unwrap();
        assert_eq!(trace.records.len(), 500);
        let mut prev_t = 0;
        let mut prev_q = 0;
        for r in &trace.records {
            assert_eq!(r.t, prev_t + 1);
            assert!(r.n_queried == prev_q || r.n_queried == prev_q + 1);
            assert!((0.0..=1.0).contains(&r.ratio));
            assert!((r.ratio - r.n_queried as f64 / r.t as f64).abs() < 1e-15);
            prev_t = r.t;
            prev_q = r.n_queried;
        }
        // Warm-up decisions all use the static threshold.
        for r in &trace.records[..cfg.t_min as usize] {
            assert_eq!(r.tau, cfg.tau0);
            assert!(!r.strict);
        }
    }

    #[test]
    fn query_simulation_validates_inputs() {
        let cfg = theory_policy_config(0.05).unwrap();
        assert!(simulate_query_ratio(0.0, 0.0, &cfg, 100, 1).is_err());
        assert!(simulate_query_ratio(f64::NAN, 1.0, &cfg, 100, 1).is_err());
        assert!(simulate_query_ratio(0.0, 1.0, &cfg, cfg.t_min - 1, 1).is_err());
    }

    #[test]
    fn query_ratio_csv_and_summary_shape() {
        let cfg = theory_policy_config(0.05).unwrap();
        let trace = simulate_query_ratio(0.0, 1.0, &cfg, 40, 5).unwrap();
        let csv = trace.to_csv();
        assert!(csv.starts_with("t,n_queried,ratio,regime,tau\n"));
        assert_eq!(csv.lines().count(), 41);
        assert!(csv.lines().nth(1).unwrap().starts_with("1,"));
        let summary = trace.summary();
        assert!(summary.contains("n_steps=40\n"));
        assert!(summary.contains("final_ratio="));
    }

    #[test]
    fn uniform_stream_settles_into_the_two_level_cycle() {
        let trace = simulate_buffer_balance(3, 6, 500, &[1.0 / 3.0; 3], 21).unwrap();
        let eq = trace
            .first_equilibrium_step
            .expect("a 500-step uniform stream should balance");
        for r in &trace.records {
            if r.step >= eq {
                assert!(
                    r.f_balance == 0.0 || r.f_balance == 2.0,
                    "step {}: f {}",
                    r.step,
                    r.f_balance
                );
            }
        }
    }

    #[test]
    fn one_class_stream_never_balances() {
        let trace = simulate_buffer_balance(2, 4, 60, &[1.0, 0.0], 9).unwrap();
        assert_eq!(trace.filled_at, 4);
        assert!(trace.first_equilibrium_step.is_none());
        for r in &trace.records {
            if r.step >= trace.filled_at {
                // 2L(1 - 1/K) for L=4, K=2.
                assert_eq!(r.f_balance, 4.0);
            }
        }
    }

    #[test]
    fn balance_never_increases_after_fill_except_from_zero() {
        for (seed, dist) in [(1u64, [0.7, 0.2, 0.1]), (2, [1.0 / 3.0; 3]), (3, [0.5, 0.5, 0.0])] {
            let trace = simulate_buffer_balance(3, 9, 400, &dist, seed).unwrap();
            let post: Vec<&BalanceRecord> = trace
                .records
                .iter()
                .filter(|r| r.step >= trace.filled_at)
                .collect();
            for pair in post.windows(2) {
                let (a, b) = (pair[0], pair[1]);
                if a.f_balance == 0.0 {
                    assert!(b.f_balance == 0.0 || b.f_balance == 2.0);
                } else {
                    assert!(
                        b.f_balance <= a.f_balance,
                        "seed {seed} step {}: {} -> {}",
                        b.step,
                        a.f_balance,
                        b.f_balance
                    );
                }
            }
        }
    }

    #[test]
    fn balance_simulation_validates_inputs() {
        assert!(simulate_buffer_balance(3, 7, 100, &[1.0 / 3.0; 3], 1).is_err());
        assert!(simulate_buffer_balance(3, 6, 6, &[1.0 / 3.0; 3], 1).is_err());
        assert!(simulate_buffer_balance(3, 6, 100, &[0.5, 0.5], 1).is_err());
        assert!(simulate_buffer_balance(3, 6, 100, &[0.5, 0.4, 0.2], 1).is_err());
    }

    #[test]
    fn balance_csv_lists_counts_per_class() {
        let trace = simulate_buffer_balance(2, 4, 10, &[0.5, 0.5], 2).unwrap();
        let csv = trace.to_csv();
        assert!(csv.starts_with("step,f_balance,count_0,count_1\n"));
        assert_eq!(csv.lines().count(), 11);
        let summary = trace.summary();
        assert!(summary.contains("insertions=10\n"));
        assert!(summary.contains("filled_at=4\n"));
    }

    /// With budget = capacity the final balance is decided entirely by the
    /// fill; for K=2, L=4 a uniform stream lands outside {0, 2} exactly
    /// when all four draws share a class, which happens with probability
    /// 2 * (1/2)^4 = 0.125.
    #[test]
    fn fill_only_failure_rate_matches_enumeration() {
        let rows = failure_rate_vs_budget(2, 4, &[4], 4000, 17).unwrap();
        let rate = rows[0].failure_rate;
        assert!((rate - 0.125).abs() <= 0.02, "rate {rate}");
    }

    #[test]
    fn failure_rate_vanishes_for_generous_budgets() {
        let rows = failure_rate_vs_budget(3, 6, &[6, 30, 300], 200, 23).unwrap();
        assert_eq!(rows.len(), 3);
        assert!(rows[0].failure_rate > 0.0);
        assert_eq!(rows[2].failure_rate, 0.0);
        assert!(rows[2].failure_rate <= rows[0].failure_rate);
        let csv = failure_table_to_csv(&rows);
        assert!(csv.starts_with("budget,failure_rate\n"));
        assert_eq!(csv.lines().count(), 4);
    }

    #[test]
    fn single_trial_is_reproducible() {
        let a = failure_rate_vs_budget(2, 4, &[20], 1, 5).unwrap();
        let b = failure_rate_vs_budget(2, 4, &[20], 1, 5).unwrap();
        assert_eq!(a, b);
        assert!(a[0].failure_rate == 0.0 || a[0].failure_rate == 1.0);
    }

    #[test]
    fn failure_rate_validates_inputs() {
        assert!(failure_rate_vs_budget(2, 4, &[], 10, 1).is_err());
        assert!(failure_rate_vs_budget(2, 4, &[0], 10, 1).is_err());
        assert!(failure_rate_vs_budget(2, 4, &[10], 0, 1).is_err());
        assert!(failure_rate_vs_budget(2, 5, &[10], 10, 1).is_err());
    }
}
