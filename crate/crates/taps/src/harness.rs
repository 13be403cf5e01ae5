//! Episode runner: wires the world, the prompt model, the query policy,
//! and the label buffer into the streaming protocol, and runs the
//! comparison sweeps.
//!
//! The per-step order is fixed. The sample is augmented and filtered,
//! one gradient step is taken on the composite objective (the unlabeled
//! sample contributes entropy and coarse terms; cross entropy and fine
//! alignment come only from buffer entries), the prediction is then
//! recorded, and only afterwards may the policy query the oracle and
//! insert the labeled sample. Labels therefore never influence the
//! prediction they are scored against.

use crate::adapter::{
    augment, composite_loss, composite_loss_and_grad, cross_entropy_loss, filter_views,
    gradient_step, marginal_entropy_loss, prepare_buffer_item, AdapterError, AugmentConfig,
    BufferItemViews, LossBreakdown, PromptModel, StepBatch,
};
use crate::buffer::{BufferEntry, BufferError, LabelBuffer};
use crate::config::{ConfigError, Mode, RunConfig};
use crate::math::RunningQuantile;
use crate::policy::{observe, observe_and_decide, PolicyError, PolicyState};
use crate::rng::{stream_rng, tags};
use crate::sim::{compute_source_stats, oracle, SimError, World};
use rand::Rng;
use std::io;
use std::path::Path;
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Adapter(#[from] AdapterError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Buffer(#[from] BufferError),
    #[error(transparent)]
    Math(#[from] crate::math::MathError),
    #[error("invalid sweep: {0}")]
    BadSweep(String),
}

/// Everything observable about one stream step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    /// 1-based step index.
    pub t: u64,
    pub predicted_label: usize,
    /// Event-ordering flag: the oracle was consulted only after `correct`
    /// was recorded. The episode loop sets this by construction.
    pub true_label_revealed_after_eval: bool,
    pub correct: bool,
    /// False when the update-skipping mode vetoed this step's gradient.
    pub updated: bool,
    /// Marginal entropy (nats) under the post-update prompt; the value
    /// the query decision saw.
    pub entropy: f64,
    /// Threshold the decision compared against.
    pub tau: f64,
    pub queried: bool,
    /// Cumulative queries after this step.
    pub n_queried: u64,
    pub f_balance: f64,
    pub loss: LossBreakdown,
    /// Wall-clock time of the step. Kept out of the CSV so that fixed
    /// seeds produce byte-identical files.
    pub wall_time_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeSummary {
    pub steps: u64,
    pub accuracy: f64,
    pub query_ratio: f64,
    pub n_queried: u64,
    pub mean_f_balance: f64,
    pub mean_step_ms: f64,
}

impl EpisodeSummary {
    pub fn to_kv(&self) -> String {
        format!(
            "steps={}\naccuracy={}\nquery_ratio={}\nn_queried={}\nmean_f_balance={}\nmean_step_ms={}\n",
            self.steps,
            self.accuracy,
            self.query_ratio,
            self.n_queried,
            self.mean_f_balance,
            self.mean_step_ms
        )
    }
}

/// Unit-norm class prototypes from the zero-prompt source features.
fn calibrate_prototypes(model: &mut PromptModel, world: &World) -> Result<(), HarnessError> {
    let dim = model.dim();
    let k = model.k_classes();
    let zeros = vec![0.0; dim];
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for s in world.make_source() {
        let enc = model.encode_with(&s.input, &zeros)?;
        for (acc, f) in sums[s.label].iter_mut().zip(&enc.feature) {
            *acc += f;
        }
        counts[s.label] += 1;
    }
    for (sum, &n) in sums.iter_mut().zip(&counts) {
        for v in sum.iter_mut() {
            *v /= n as f64;
        }
    }
    model.set_prototypes(sums)?;
    Ok(())
}

/// Run one streaming episode. Deterministic: the full output is a pure
/// function of the configuration (step wall times aside).
pub fn run_episode(cfg: &RunConfig) -> Result<(Vec<StepReport>, EpisodeSummary), HarnessError> {
    cfg.validate()?;
    let world = World::new(cfg.world.clone())?;
    let k = cfg.world.k_classes;

    let mut model = PromptModel::random(
        cfg.world.dim,
        k,
        cfg.encoder_layers,
        cfg.temperature,
        &mut stream_rng(cfg.seed, tags::MODEL),
    )?;
    let stats = compute_source_stats(&model, &world.make_source())?;
    calibrate_prototypes(&mut model, &world)?;

    let aug = AugmentConfig {
        n_views: cfg.views,
        noise_scale: cfg.noise_scale,
        mask_frac: cfg.mask_frac,
    };
    let mut buffer = LabelBuffer::new(cfg.buffer_capacity, k)?;
    let mut policy_state = PolicyState::new();
    let mut episode_rng = stream_rng(cfg.seed, tags::EPISODE);

    // skip_high_entropy vetoes gradient steps on samples in the running
    // top 1% by pre-update entropy. With little history the cutoff is the
    // maximum seen, so nothing is vetoed until the estimate has support.
    let mut skip_quantile = RunningQuantile::new();

    let stream = world.make_stream();
    let mut reports = Vec::with_capacity(stream.len());
    let mut n_correct = 0u64;

    for sample in &stream {
        let started = Instant::now();

        // (1) Views of the current sample, confidence-filtered under the
        // current prompt.
        let mut views = augment(&sample.input, &aug, &mut episode_rng)?;
        filter_views(&model, &mut views, cfg.rho)?;

        let mut do_update = true;
        if cfg.mode == Mode::SkipHighEntropy {
            let h_pre = marginal_entropy_loss(&model, &views)?;
            if skip_quantile.count() >= cfg.policy.t_min {
                let cutoff = skip_quantile
                    .quantile(0.99)?
                    .expect("count >= t_min implies observations");
                if h_pre > cutoff {
                    do_update = false;
                }
            }
            skip_quantile.insert(h_pre)?;
        }

        // (2) One gradient step on the composite objective.
        let loss = if do_update {
            let minibatch = buffer.sample_minibatch(cfg.minibatch, &mut episode_rng);
            let items: Vec<BufferItemViews> = minibatch
                .iter()
                .map(|e| prepare_buffer_item(&e.input, e.label, &aug, &mut episode_rng))
                .collect::<Result<_, _>>()?;
            let batch = StepBatch {
                sample: &views,
                buffer_items: &items,
                class_aware: cfg.mode != Mode::CoarseOnly,
            };
            let (loss, grad) = composite_loss_and_grad(&model, &batch, &stats, &cfg.weights)?;
            gradient_step(&mut model, &grad, cfg.lr)?;
            loss
        } else {
            // Skipped update: report the unsupervised objective value.
            let batch = StepBatch {
                sample: &views,
                buffer_items: &[],
                class_aware: true,
            };
            composite_loss(&model, &batch, &stats, &cfg.weights)?
        };

        // (3) Evaluate under the updated prompt. The prediction is fixed
        // before the label is looked at.
        let predicted_label = model.predict(&sample.input)?.argmax();
        let truth = oracle(sample);
        let correct = predicted_label == truth;
        n_correct += correct as u64;

        // (4) Re-filter the same views under the updated prompt; their
        // marginal entropy is the uncertainty the policy sees.
        filter_views(&model, &mut views, cfg.rho)?;
        let entropy = marginal_entropy_loss(&model, &views)?;

        // (5) Query decision, then (possibly) labeling and insertion.
        let decision = match cfg.mode {
            Mode::Taps | Mode::RandomEvict | Mode::CoarseOnly => {
                observe_and_decide(&cfg.policy, &mut policy_state, entropy)?
            }
            Mode::EntropyOnly | Mode::SkipHighEntropy => {
                observe(&cfg.policy, &mut policy_state, entropy)?
            }
            Mode::RandomQuery => {
                let mut d = observe(&cfg.policy, &mut policy_state, entropy)?;
                let under_cap = cfg
                    .policy
                    .hard_cap
                    .map_or(true, |cap| policy_state.n_queried < cap);
                let coin = episode_rng.gen::<f64>() < cfg.policy.alpha;
                if coin && under_cap {
                    policy_state.n_queried += 1;
                    d.query = true;
                }
                d
            }
        };

        if decision.query {
            let label = oracle(sample);
            let ce = cross_entropy_loss(&model, &sample.input, label)?;
            if buffer.is_full() {
                buffer.refresh_ce(|input, lbl| {
                    cross_entropy_loss(&model, input, lbl)
                        .expect("buffer entries were validated at insertion")
                });
            }
            let entry = BufferEntry {
                sample_id: sample.sample_id,
                input: sample.input.clone(),
                label,
                inserted_at: policy_state.t,
                last_ce: ce,
            };
            if cfg.mode == Mode::RandomEvict {
                buffer.insert_random_evict(entry, &mut episode_rng)?;
            } else {
                buffer.insert(entry)?;
            }
        }

        reports.push(StepReport {
            t: policy_state.t,
            predicted_label,
            true_label_revealed_after_eval: true,
            correct,
            updated: do_update,
            entropy,
            tau: decision.tau,
            queried: decision.query,
            n_queried: policy_state.n_queried,
            f_balance: buffer.balance_measure(),
            loss,
            wall_time_ms: started.elapsed().as_secs_f64() * 1e3,
        });
    }

    let steps = reports.len() as u64;
    let summary = EpisodeSummary {
        steps,
        accuracy: n_correct as f64 / steps as f64,
        query_ratio: policy_state.n_queried as f64 / steps as f64,
        n_queried: policy_state.n_queried,
        mean_f_balance: reports.iter().map(|r| r.f_balance).sum::<f64>() / steps as f64,
        mean_step_ms: reports.iter().map(|r| r.wall_time_ms).sum::<f64>() / steps as f64,
    };
    Ok((reports, summary))
}

const STEP_CSV_HEADER: &str = "t,predicted_label,true_label_revealed_after_eval,correct,updated,\
                               entropy,tau,queried,n_queried,f_balance,loss_entropy,\
                               loss_cross_entropy,loss_coarse,loss_fine,loss_total";

pub fn reports_to_csv(reports: &[StepReport]) -> String {
    let mut out = String::from(STEP_CSV_HEADER);
    out.push('\n');
    for r in reports {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            r.t,
            r.predicted_label,
            r.true_label_revealed_after_eval,
            r.correct,
            r.updated,
            r.entropy,
            r.tau,
            r.queried,
            r.n_queried,
            r.f_balance,
            r.loss.entropy,
            r.loss.cross_entropy,
            r.loss.coarse,
            r.loss.fine,
            r.loss.total,
        ));
    }
    out
}

pub fn emit_csv(reports: &[StepReport], path: &Path) -> io::Result<()> {
    std::fs::write(path, reports_to_csv(reports))
}

pub fn emit_summary(summary: &EpisodeSummary, path: &Path) -> io::Result<()> {
    std::fs::write(path, summary.to_kv())
}

/// Comparison axes. Each value rewrites one knob of the base config; the
/// mode axes use task-level vocabulary rather than raw mode names.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    BudgetAlpha,
    BufferCapacity,
    AlphaCe,
    SelectionPolicy,
    EvictionPolicy,
    AlignmentGranularity,
}

impl SweepAxis {
    pub fn as_str(&self) -> &'static str {
        match self {
            SweepAxis::BudgetAlpha => "budget_alpha",
            SweepAxis::BufferCapacity => "buffer_capacity",
            SweepAxis::AlphaCe => "alpha_ce",
            SweepAxis::SelectionPolicy => "selection_policy",
            SweepAxis::EvictionPolicy => "eviction_policy",
            SweepAxis::AlignmentGranularity => "alignment_granularity",
        }
    }

    pub fn parse(s: &str) -> Option<SweepAxis> {
        match s {
            "budget_alpha" => Some(SweepAxis::BudgetAlpha),
            "buffer_capacity" => Some(SweepAxis::BufferCapacity),
            "alpha_ce" => Some(SweepAxis::AlphaCe),
            "selection_policy" => Some(SweepAxis::SelectionPolicy),
            "eviction_policy" => Some(SweepAxis::EvictionPolicy),
            "alignment_granularity" => Some(SweepAxis::AlignmentGranularity),
            _ => None,
        }
    }
}

fn apply_axis_value(cfg: &mut RunConfig, axis: SweepAxis, value: &str) -> Result<(), HarnessError> {
    let bad = |msg: String| Err(HarnessError::BadSweep(msg));
    match axis {
        SweepAxis::BudgetAlpha => {
            let v: f64 = match value.parse() {
                Ok(v) => v,
                Err(_) => return bad(format!("budget_alpha value {value:?} is not a number")),
            };
            cfg.policy.alpha = v;
            cfg.policy.switch_ratio = v;
        }
        SweepAxis::BufferCapacity => {
            cfg.buffer_capacity = match value.parse() {
                Ok(v) => v,
                Err(_) => return bad(format!("buffer_capacity value {value:?} is not an integer")),
            };
        }
        SweepAxis::AlphaCe => {
            cfg.weights.alpha_ce = match value.parse() {
                Ok(v) => v,
                Err(_) => return bad(format!("alpha_ce value {value:?} is not a number")),
            };
        }
        SweepAxis::SelectionPolicy => {
            cfg.mode = match value {
                "threshold" => Mode::Taps,
                "random" => Mode::RandomQuery,
                "never" => Mode::EntropyOnly,
                _ => return bad(format!(
                    "selection_policy value {value:?}; expected threshold, random, or never"
                )),
            };
        }
        SweepAxis::EvictionPolicy => {
            cfg.mode = match value {
                "balanced" => Mode::Taps,
                "random" => Mode::RandomEvict,
                _ => return bad(format!(
                    "eviction_policy value {value:?}; expected balanced or random"
                )),
            };
        }
        SweepAxis::AlignmentGranularity => {
            cfg.mode = match value {
                "fine" => Mode::Taps,
                "coarse" => Mode::CoarseOnly,
                _ => return bad(format!(
                    "alignment_granularity value {value:?}; expected fine or coarse"
                )),
            };
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub axis: &'static str,
    pub value: String,
    pub seed: u64,
    pub accuracy: f64,
    pub query_ratio: f64,
    pub mean_f_balance: f64,
    pub n_queried: u64,
    pub steps: u64,
}

/// Cross product of values and seeds; each cell reruns the base config
/// with the axis value applied and both seeds (run and world) set to the
/// row seed, so arms compare on identical data.
pub fn run_sweep(
    base: &RunConfig,
    axis: SweepAxis,
    values: &[String],
    seeds: &[u64],
) -> Result<Vec<SweepRow>, HarnessError> {
    if values.is_empty() {
        return Err(HarnessError::BadSweep("no values given".into()));
    }
    if seeds.is_empty() {
        return Err(HarnessError::BadSweep("no seeds given".into()));
    }
    let mut rows = Vec::with_capacity(values.len() * seeds.len());
    for value in values {
        for &seed in seeds {
            let mut cfg = base.clone();
            apply_axis_value(&mut cfg, axis, value)?;
            cfg.seed = seed;
            cfg.world.seed = seed;
            let (_, summary) = run_episode(&cfg)?;
            rows.push(SweepRow {
                axis: axis.as_str(),
                value: value.clone(),
                seed,
                accuracy: summary.accuracy,
                query_ratio: summary.query_ratio,
                mean_f_balance: summary.mean_f_balance,
                n_queried: summary.n_queried,
                steps: summary.steps,
            });
        }
    }
    Ok(rows)
}

pub fn sweep_to_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("axis,value,seed,accuracy,query_ratio,mean_f_balance,n_queried,steps\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.axis, r.value, r.seed, r.accuracy, r.query_ratio, r.mean_f_balance, r.n_queried, r.steps
        ));
    }
    out
}
