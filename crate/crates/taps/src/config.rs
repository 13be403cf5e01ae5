//! Run configuration: defaults, a flat key=value format for files and
//! flags, and validation. Every knob of an episode lives here so that a
//! dumped config reproduces the run exactly.

use crate::adapter::LossWeights;
use crate::policy::PolicyConfig;
use crate::sim::{ShiftKind, WorldConfig};
use std::collections::BTreeMap;
use std::fmt;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("unknown configuration key {0:?}")]
    UnknownKey(String),
    #[error("bad value for {key}: {reason}")]
    BadValue { key: String, reason: String },
    #[error("malformed line {0:?}: expected key=value")]
    BadLine(String),
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

/// Pipeline variant. The full method is `Taps`; the rest are the
/// baselines and ablations it is compared against.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Entropy selection, class-balanced eviction, class-aware alignment.
    Taps,
    /// Never queries; pure marginal entropy minimization.
    EntropyOnly,
    /// Never queries; additionally skips the update on samples whose
    /// pre-update entropy lands in the running top 1%.
    SkipHighEntropy,
    /// Queries by an alpha-weighted coin instead of the threshold.
    RandomQuery,
    /// Entropy selection but uniformly random eviction.
    RandomEvict,
    /// Buffer alignment against global statistics instead of per-class.
    CoarseOnly,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Taps => "taps",
            Mode::EntropyOnly => "entropy_only",
            Mode::SkipHighEntropy => "skip_high_entropy",
            Mode::RandomQuery => "random_query",
            Mode::RandomEvict => "random_evict",
            Mode::CoarseOnly => "coarse_only",
        }
    }

    pub fn parse(s: &str) -> Option<Mode> {
        match s {
            "taps" => Some(Mode::Taps),
            "entropy_only" => Some(Mode::EntropyOnly),
            "skip_high_entropy" => Some(Mode::SkipHighEntropy),
            "random_query" => Some(Mode::RandomQuery),
            "random_evict" => Some(Mode::RandomEvict),
            "coarse_only" => Some(Mode::CoarseOnly),
            _ => None,
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub world: WorldConfig,
    pub policy: PolicyConfig,
    pub weights: LossWeights,
    pub buffer_capacity: usize,
    pub minibatch: usize,
    /// Views per sample, original included.
    pub views: usize,
    /// Confidence filter keep fraction.
    pub rho: f64,
    pub lr: f64,
    /// Augmentation noise scale.
    pub noise_scale: f64,
    /// Fraction of coordinates zeroed per noisy view.
    pub mask_frac: f64,
    pub temperature: f64,
    pub encoder_layers: usize,
    pub mode: Mode,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let seed = 7;
        Self {
            world: WorldConfig {
                k_classes: 5,
                dim: 16,
                class_sep: 3.0,
                source_noise: 0.5,
                shift_kind: ShiftKind::None,
                shift_magnitude: 0.0,
                n_source: 40,
                stream_len: 2000,
                class_mix: WorldConfig::uniform_mix(5),
                seed,
            },
            policy: PolicyConfig::with_budget(0.05),
            weights: LossWeights::default(),
            buffer_capacity: 50,
            minibatch: 16,
            views: 16,
            rho: 0.25,
            lr: 0.05,
            noise_scale: 0.25,
            mask_frac: 0.125,
            temperature: 0.1,
            encoder_layers: 2,
            mode: Mode::Taps,
            seed,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |msg: String| Err(ConfigError::Invalid(msg));
        self.world
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.policy
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.weights
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.buffer_capacity == 0 {
            return invalid("buffer-capacity must be >= 1".into());
        }
        if self.minibatch == 0 {
            return invalid("minibatch must be >= 1".into());
        }
        if self.views == 0 {
            return invalid("views must be >= 1".into());
        }
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return invalid(format!("rho must lie in (0, 1], got {}", self.rho));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return invalid(format!("lr must be finite and >= 0, got {}", self.lr));
        }
        if !(self.noise_scale.is_finite() && self.noise_scale >= 0.0) {
            return invalid(format!("noise-scale must be finite and >= 0, got {}", self.noise_scale));
        }
        if !(self.mask_frac >= 0.0 && self.mask_frac <= 1.0) {
            return invalid(format!("mask-frac must lie in [0, 1], got {}", self.mask_frac));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return invalid(format!("temperature must be positive, got {}", self.temperature));
        }
        if self.encoder_layers == 0 {
            return invalid("encoder-layers must be >= 1".into());
        }
        Ok(())
    }

    /// Effective configuration as flat key=value text; feeding it back in
    /// reproduces the config exactly.
    pub fn to_kv(&self) -> String {
        let mix: Vec<String> = self.world.class_mix.iter().map(|w| w.to_string()).collect();
        let shift = match self.world.shift_kind {
            ShiftKind::None => "none",
            ShiftKind::MeanShift => "mean_shift",
            ShiftKind::ClassConditionalShift => "class_conditional_shift",
        };
        let hard_cap = self
            .policy
            .hard_cap
            .map_or_else(|| "none".to_string(), |c| c.to_string());
        format!(
            "mode={}\nseed={}\nbuffer-capacity={}\nminibatch={}\nviews={}\nrho={}\nlr={}\n\
             noise-scale={}\nmask-frac={}\ntemperature={}\nencoder-layers={}\n\
             world.k-classes={}\nworld.dim={}\nworld.class-sep={}\nworld.source-noise={}\n\
             world.shift-kind={}\nworld.shift-magnitude={}\nworld.n-source={}\n\
             world.stream-len={}\nworld.class-mix={}\nworld.seed={}\n\
             policy.alpha={}\npolicy.tau0={}\npolicy.t-min={}\npolicy.switch-ratio={}\n\
             policy.z-selection={}\npolicy.z-high={}\npolicy.hard-cap={}\n\
             weights.alpha-ce={}\nweights.beta-coarse={}\nweights.gamma-fine={}\n",
            self.mode,
            self.seed,
            self.buffer_capacity,
            self.minibatch,
            self.views,
            self.rho,
            self.lr,
            self.noise_scale,
            self.mask_frac,
            self.temperature,
            self.encoder_layers,
            self.world.k_classes,
            self.world.dim,
            self.world.class_sep,
            self.world.source_noise,
            shift,
            self.world.shift_magnitude,
            self.world.n_source,
            self.world.stream_len,
            mix.join(","),
            self.world.seed,
            self.policy.alpha,
            self.policy.tau0,
            self.policy.t_min,
            self.policy.switch_ratio,
            self.policy.z_selection,
            self.policy.z_high,
            hard_cap,
            self.weights.alpha_ce,
            self.weights.beta_coarse,
            self.weights.gamma_fine,
        )
    }
}

/// Parse flat key=value text (one pair per line, `#` comments allowed)
/// into an ordered map; later occurrences of a key win.
pub fn parse_kv_text(text: &str) -> Result<BTreeMap<String, String>, ConfigError> {
    let mut map = BTreeMap::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| ConfigError::BadLine(line.to_string()))?;
        map.insert(key.trim().to_string(), value.trim().to_string());
    }
    Ok(map)
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
    value.parse().map_err(|_| ConfigError::BadValue {
        key: key.to_string(),
        reason: format!("cannot parse {value:?}"),
    })
}

/// Build a run configuration from defaults plus overrides. Two keys get
/// contextual defaults: world.seed falls back to the top-level seed, and
/// policy.switch-ratio falls back to policy.alpha.
pub fn build_run_config(overrides: &BTreeMap<String, String>) -> Result<RunConfig, ConfigError> {
    let mut cfg = RunConfig::default();
    let mut world_seed_set = false;
    let mut switch_set = false;
    let mut mix_set = false;

    for (key, value) in overrides {
        let k = key.as_str();
        let v = value.as_str();
        match k {
            "mode" => {
                cfg.mode = Mode::parse(v).ok_or_else(|| ConfigError::BadValue {
                    key: k.into(),
                    reason: format!(
                        "unknown mode {v:?}; expected one of taps, entropy_only, \
                         skip_high_entropy, random_query, random_evict, coarse_only"
                    ),
                })?;
            }
            "seed" => cfg.seed = parse_num(k, v)?,
            "buffer-capacity" => cfg.buffer_capacity = parse_num(k, v)?,
            "minibatch" => cfg.minibatch = parse_num(k, v)?,
            "views" => cfg.views = parse_num(k, v)?,
            "rho" => cfg.rho = parse_num(k, v)?,
            "lr" => cfg.lr = parse_num(k, v)?,
            "noise-scale" => cfg.noise_scale = parse_num(k, v)?,
            "mask-frac" => cfg.mask_frac = parse_num(k, v)?,
            "temperature" => cfg.temperature = parse_num(k, v)?,
            "encoder-layers" => cfg.encoder_layers = parse_num(k, v)?,
            "world.k-classes" => cfg.world.k_classes = parse_num(k, v)?,
            "world.dim" => cfg.world.dim = parse_num(k, v)?,
            "world.class-sep" => cfg.world.class_sep = parse_num(k, v)?,
            "world.source-noise" => cfg.world.source_noise = parse_num(k, v)?,
            "world.shift-kind" => {
                cfg.world.shift_kind = match v {
                    "none" => ShiftKind::None,
                    "mean_shift" => ShiftKind::MeanShift,
                    "class_conditional_shift" => ShiftKind::ClassConditionalShift,
                    _ => {
                        return Err(ConfigError::BadValue {
                            key: k.into(),
                            reason: format!(
                                "unknown shift kind {v:?}; expected none, mean_shift, \
                                 or class_conditional_shift"
                            ),
                        })
                    }
                };
            }
            "world.shift-magnitude" => cfg.world.shift_magnitude = parse_num(k, v)?,
            "world.n-source" => cfg.world.n_source = parse_num(k, v)?,
            "world.stream-len" => cfg.world.stream_len = parse_num(k, v)?,
            "world.class-mix" => {
                cfg.world.class_mix = v
                    .split(',')
                    .map(|p| parse_num(k, p.trim()))
                    .collect::<Result<_, _>>()?;
                mix_set = true;
            }
            "world.seed" => {
                cfg.world.seed = parse_num(k, v)?;
                world_seed_set = true;
            }
            "policy.alpha" => cfg.policy.alpha = parse_num(k, v)?,
            "policy.tau0" => cfg.policy.tau0 = parse_num(k, v)?,
            "policy.t-min" => cfg.policy.t_min = parse_num(k, v)?,
            "policy.switch-ratio" => {
                cfg.policy.switch_ratio = parse_num(k, v)?;
                switch_set = true;
            }
            "policy.z-selection" => cfg.policy.z_selection = parse_num(k, v)?,
            "policy.z-high" => cfg.policy.z_high = parse_num(k, v)?,
            "policy.hard-cap" => {
                cfg.policy.hard_cap = if v == "none" {
                    None
                } else {
                    Some(parse_num(k, v)?)
                };
            }
            "weights.alpha-ce" => cfg.weights.alpha_ce = parse_num(k, v)?,
            "weights.beta-coarse" => cfg.weights.beta_coarse = parse_num(k, v)?,
            "weights.gamma-fine" => cfg.weights.gamma_fine = parse_num(k, v)?,
            _ => return Err(ConfigError::UnknownKey(key.clone())),
        }
    }

    if !world_seed_set {
        cfg.world.seed = cfg.seed;
    }
    if !switch_set {
        cfg.policy.switch_ratio = cfg.policy.alpha;
    }
    if !mix_set {
        cfg.world.class_mix = WorldConfig::uniform_mix(cfg.world.k_classes);
    }
    cfg.validate()?;
    Ok(cfg)
}
