//! Toy prompt-adaptation model. A small frozen random MLP stands in for a
//! pretrained encoder; the only trainable parameter is an input-space
//! prompt vector added to every input before encoding. Classification is
//! cosine similarity against fixed unit-norm class prototypes, scaled by a
//! temperature.
//!
//! Adaptation minimizes a composite objective: marginal entropy over
//! confidence-filtered augmented views of the current sample, plus cross
//! entropy and distribution-alignment terms computed from a labeled buffer.
//! The gradient with respect to the prompt is exact reverse-mode
//! differentiation and is held to a central-finite-difference oracle in the
//! tests.

use crate::math::{entropy, softmax, LogitVector, MathError, ProbabilityVector};
use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AdapterError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("invalid model or view configuration: {0}")]
    BadConfig(String),
    #[error("layer {layer} out of range, model has {n_layers}")]
    LayerOutOfRange { layer: usize, n_layers: usize },
    #[error("class {class} out of range, model has {k_classes}")]
    ClassOutOfRange { class: usize, k_classes: usize },
    #[error("malformed model snapshot: {0}")]
    BadSnapshot(String),
    #[error(transparent)]
    Math(#[from] MathError),
}

/// Smallest feature norm we divide by; anything below is treated as this.
const MIN_NORM: f64 = 1e-12;
/// Probabilities are clamped here before taking logarithms.
const PROB_FLOOR: f64 = 1e-300;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn l2_norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// y = W x with W stored row-major (dim x dim).
fn matvec(w: &[f64], x: &[f64], dim: usize) -> Vec<f64> {
    let mut y = vec![0.0; dim];
    for i in 0..dim {
        y[i] = dot(&w[i * dim..(i + 1) * dim], x);
    }
    y
}

/// y = W^T g, the adjoint of `matvec`.
fn matvec_t(w: &[f64], g: &[f64], dim: usize) -> Vec<f64> {
    let mut y = vec![0.0; dim];
    for i in 0..dim {
        let gi = g[i];
        if gi == 0.0 {
            continue;
        }
        let row = &w[i * dim..(i + 1) * dim];
        for j in 0..dim {
            y[j] += row[j] * gi;
        }
    }
    y
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptModel {
    dim: usize,
    /// Frozen: row-major dim x dim matrices, one per layer.
    layer_weights: Vec<Vec<f64>>,
    /// Frozen: unit-norm rows, one per class.
    class_prototypes: Vec<Vec<f64>>,
    /// The only trainable parameter.
    prompt: Vec<f64>,
    temperature: f64,
}

/// Per-layer activations of one input, plus the unit-normalized feature the
/// classifier head consumes.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoding {
    /// Raw tanh activations, one vector per layer.
    pub layer_features: Vec<Vec<f64>>,
    /// Last layer's activation scaled to unit norm.
    pub feature: Vec<f64>,
}

impl PromptModel {
    /// Fresh model with Gaussian weights scaled by 1/sqrt(dim), random
    /// unit prototypes, and a zero prompt.
    pub fn random<R: Rng>(
        dim: usize,
        k_classes: usize,
        n_layers: usize,
        temperature: f64,
        rng: &mut R,
    ) -> Result<Self, AdapterError> {
        if dim == 0 || k_classes == 0 || n_layers == 0 {
            return Err(AdapterError::BadConfig(format!(
                "need dim, k_classes, n_layers >= 1, got {dim}, {k_classes}, {n_layers}"
            )));
        }
        let scale = 1.0 / (dim as f64).sqrt();
        let layer_weights = (0..n_layers)
            .map(|_| {
                (0..dim * dim)
                    .map(|_| rng.sample::<f64, _>(StandardNormal) * scale)
                    .collect()
            })
            .collect();
        let class_prototypes = (0..k_classes)
            .map(|_| {
                let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
                let n = l2_norm(&v).max(MIN_NORM);
                v.into_iter().map(|x| x / n).collect()
            })
            .collect();
        Self::from_parts(layer_weights, class_prototypes, vec![0.0; dim], temperature)
    }

    /// Assemble a model from explicit parameters. Values are stored as
    /// given; prototypes must already be unit norm.
    pub fn from_parts(
        layer_weights: Vec<Vec<f64>>,
        class_prototypes: Vec<Vec<f64>>,
        prompt: Vec<f64>,
        temperature: f64,
    ) -> Result<Self, AdapterError> {
        let dim = prompt.len();
        if dim == 0 {
            return Err(AdapterError::BadConfig("prompt must be non-empty".into()));
        }
        if layer_weights.is_empty() {
            return Err(AdapterError::BadConfig("need at least one layer".into()));
        }
        if !(temperature.is_finite() && temperature > 0.0) {
            return Err(AdapterError::BadConfig(format!(
                "temperature must be positive and finite, got {temperature}"
            )));
        }
        for (l, w) in layer_weights.iter().enumerate() {
            if w.len() != dim * dim {
                return Err(AdapterError::BadConfig(format!(
                    "layer {l} has {} weights, want {}",
                    w.len(),
                    dim * dim
                )));
            }
            if w.iter().any(|x| !x.is_finite()) {
                return Err(AdapterError::BadConfig(format!("layer {l} has non-finite weights")));
            }
        }
        if class_prototypes.is_empty() {
            return Err(AdapterError::BadConfig("need at least one prototype".into()));
        }
        for (c, p) in class_prototypes.iter().enumerate() {
            if p.len() != dim {
                return Err(AdapterError::DimMismatch {
                    expected: dim,
                    got: p.len(),
                });
            }
            let n = l2_norm(p);
            if !n.is_finite() || (n - 1.0).abs() > 1e-6 {
                return Err(AdapterError::BadConfig(format!(
                    "prototype {c} has norm {n}, want 1"
                )));
            }
        }
        if prompt.iter().any(|x| !x.is_finite()) {
            return Err(AdapterError::BadConfig("prompt has non-finite entries".into()));
        }
        Ok(Self {
            dim,
            layer_weights,
            class_prototypes,
            prompt,
            temperature,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn k_classes(&self) -> usize {
        self.class_prototypes.len()
    }

    pub fn n_layers(&self) -> usize {
        self.layer_weights.len()
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn prompt(&self) -> &[f64] {
        &self.prompt
    }

    pub fn set_prompt(&mut self, prompt: Vec<f64>) -> Result<(), AdapterError> {
        if prompt.len() != self.dim {
            return Err(AdapterError::DimMismatch {
                expected: self.dim,
                got: prompt.len(),
            });
        }
        if prompt.iter().any(|x| !x.is_finite()) {
            return Err(AdapterError::BadConfig("prompt has non-finite entries".into()));
        }
        self.prompt = prompt;
        Ok(())
    }

    /// Replace the prototypes, normalizing each row exactly.
    pub fn set_prototypes(&mut self, prototypes: Vec<Vec<f64>>) -> Result<(), AdapterError> {
        if prototypes.is_empty() {
            return Err(AdapterError::BadConfig("need at least one prototype".into()));
        }
        let mut stored = Vec::with_capacity(prototypes.len());
        for p in prototypes {
            if p.len() != self.dim {
                return Err(AdapterError::DimMismatch {
                    expected: self.dim,
                    got: p.len(),
                });
            }
            let n = l2_norm(&p);
            if !n.is_finite() || n < MIN_NORM {
                return Err(AdapterError::BadConfig(format!(
                    "prototype norm {n} too small to normalize"
                )));
            }
            stored.push(p.into_iter().map(|x| x / n).collect());
        }
        self.class_prototypes = stored;
        Ok(())
    }

    /// Encode with the model's own prompt.
    pub fn encode(&self, x: &[f64]) -> Result<Encoding, AdapterError> {
        self.encode_with(x, &self.prompt)
    }

    /// Encode with an explicit prompt (the source-statistics path passes
    /// zeros). The prompt is added to the input, then each frozen layer
    /// applies its weights followed by tanh; the final feature is the last
    /// activation scaled to unit norm.
    pub fn encode_with(&self, x: &[f64], prompt: &[f64]) -> Result<Encoding, AdapterError> {
        if x.len() != self.dim {
            return Err(AdapterError::DimMismatch {
                expected: self.dim,
                got: x.len(),
            });
        }
        if prompt.len() != self.dim {
            return Err(AdapterError::DimMismatch {
                expected: self.dim,
                got: prompt.len(),
            });
        }
        let mut h: Vec<f64> = x.iter().zip(prompt).map(|(a, b)| a + b).collect();
        let mut layer_features = Vec::with_capacity(self.layer_weights.len());
        for w in &self.layer_weights {
            h = matvec(w, &h, self.dim);
            for v in &mut h {
                *v = v.tanh();
            }
            layer_features.push(h.clone());
        }
        let norm = l2_norm(&h).max(MIN_NORM);
        let feature = h.iter().map(|v| v / norm).collect();
        Ok(Encoding {
            layer_features,
            feature,
        })
    }

    /// Cosine similarity to each prototype over the temperature. The
    /// encoding's feature and the prototypes are unit norm, so the cosine
    /// is a plain dot product.
    pub fn logits(&self, enc: &Encoding) -> LogitVector {
        let scores: Vec<f64> = self
            .class_prototypes
            .iter()
            .map(|p| dot(&enc.feature, p) / self.temperature)
            .collect();
        LogitVector::new(scores).expect("bounded cosines over a positive temperature are finite")
    }

    /// Class distribution for a single raw input.
    pub fn predict(&self, x: &[f64]) -> Result<ProbabilityVector, AdapterError> {
        Ok(softmax(&self.logits(&self.encode(x)?)))
    }

    /// Class distribution per view.
    pub fn view_probabilities(&self, vs: &ViewSet) -> Result<Vec<ProbabilityVector>, AdapterError> {
        vs.views()
            .iter()
            .map(|v| Ok(softmax(&self.logits(&self.encode(v)?))))
            .collect()
    }

    /// Flat text serialization of every parameter. Floats are written in
    /// shortest-roundtrip form, so parsing recovers the exact bits.
    pub fn to_snapshot(&self) -> String {
        let join = |v: &[f64]| {
            v.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(" ")
        };
        let mut out = String::new();
        out.push_str(&format!("dim {}\n", self.dim));
        out.push_str(&format!("layers {}\n", self.layer_weights.len()));
        out.push_str(&format!("classes {}\n", self.class_prototypes.len()));
        out.push_str(&format!("temperature {}\n", self.temperature));
        for (l, w) in self.layer_weights.iter().enumerate() {
            out.push_str(&format!("layer {l} {}\n", join(w)));
        }
        for (c, p) in self.class_prototypes.iter().enumerate() {
            out.push_str(&format!("prototype {c} {}\n", join(p)));
        }
        out.push_str(&format!("prompt {}\n", join(&self.prompt)));
        out
    }

    pub fn from_snapshot(text: &str) -> Result<Self, AdapterError> {
        let bad = |msg: String| AdapterError::BadSnapshot(msg);
        let mut dim = None;
        let mut layers = None;
        let mut classes = None;
        let mut temperature = None;
        let mut layer_weights: Vec<(usize, Vec<f64>)> = Vec::new();
        let mut prototypes: Vec<(usize, Vec<f64>)> = Vec::new();
        let mut prompt = None;

        let parse_floats = |tokens: &[&str]| -> Result<Vec<f64>, AdapterError> {
            tokens
                .iter()
                .map(|t| {
                    t.parse::<f64>()
                        .map_err(|_| bad(format!("bad float token {t:?}")))
                })
                .collect()
        };

        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let tokens: Vec<&str> = line.split_whitespace().collect();
            match tokens[0] {
                "dim" | "layers" | "classes" => {
                    if tokens.len() != 2 {
                        return Err(bad(format!("malformed line {line:?}")));
                    }
                    let v: usize = tokens[1]
                        .parse()
                        .map_err(|_| bad(format!("bad integer in {line:?}")))?;
                    match tokens[0] {
                        "dim" => dim = Some(v),
                        "layers" => layers = Some(v),
                        _ => classes = Some(v),
                    }
                }
                "temperature" => {
                    if tokens.len() != 2 {
                        return Err(bad(format!("malformed line {line:?}")));
                    }
                    temperature = Some(parse_floats(&tokens[1..])?[0]);
                }
                "layer" | "prototype" => {
                    if tokens.len() < 3 {
                        return Err(bad(format!("malformed line {line:?}")));
                    }
                    let idx: usize = tokens[1]
                        .parse()
                        .map_err(|_| bad(format!("bad index in {line:?}")))?;
                    let values = parse_floats(&tokens[2..])?;
                    if tokens[0] == "layer" {
                        layer_weights.push((idx, values));
                    } else {
                        prototypes.push((idx, values));
                    }
                }
                "prompt" => {
                    if tokens.len() < 2 {
                        return Err(bad(format!("malformed line {line:?}")));
                    }
                    prompt = Some(parse_floats(&tokens[1..])?);
                }
                other => return Err(bad(format!("unknown record {other:?}"))),
            }
        }

        let dim = dim.ok_or_else(|| bad("missing dim".into()))?;
        let n_layers = layers.ok_or_else(|| bad("missing layers".into()))?;
        let k_classes = classes.ok_or_else(|| bad("missing classes".into()))?;
        let temperature = temperature.ok_or_else(|| bad("missing temperature".into()))?;
        let prompt = prompt.ok_or_else(|| bad("missing prompt".into()))?;
        if layer_weights.len() != n_layers || prototypes.len() != k_classes {
            return Err(bad(format!(
                "counts disagree with headers: {} layers, {} prototypes",
                layer_weights.len(),
                prototypes.len()
            )));
        }
        layer_weights.sort_by_key(|(i, _)| *i);
        prototypes.sort_by_key(|(i, _)| *i);
        if prompt.len() != dim {
            return Err(bad(format!("prompt has {} entries, want {dim}", prompt.len())));
        }
        Self::from_parts(
            layer_weights.into_iter().map(|(_, w)| w).collect(),
            prototypes.into_iter().map(|(_, p)| p).collect(),
            prompt,
            temperature,
        )
    }
}

/// Augmentation settings: number of views including the original, the
/// Gaussian perturbation scale, and the fraction of coordinates zeroed per
/// noisy view.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentConfig {
    pub n_views: usize,
    pub noise_scale: f64,
    pub mask_frac: f64,
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<(), AdapterError> {
        if self.n_views == 0 {
            return Err(AdapterError::BadConfig("n_views must be >= 1".into()));
        }
        if !(self.noise_scale.is_finite() && self.noise_scale >= 0.0) {
            return Err(AdapterError::BadConfig(format!(
                "noise_scale must be finite and >= 0, got {}",
                self.noise_scale
            )));
        }
        if !(self.mask_frac >= 0.0 && self.mask_frac <= 1.0) {
            return Err(AdapterError::BadConfig(format!(
                "mask_frac must lie in [0, 1], got {}",
                self.mask_frac
            )));
        }
        Ok(())
    }
}

/// Augmented copies of one input. View 0 is always the unmodified input.
/// The kept mask marks which views survive confidence filtering; it starts
/// all-true.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewSet {
    views: Vec<Vec<f64>>,
    kept: Vec<bool>,
}

impl ViewSet {
    pub fn from_views(views: Vec<Vec<f64>>) -> Result<Self, AdapterError> {
        if views.is_empty() {
            return Err(AdapterError::BadConfig("a view set needs at least one view".into()));
        }
        let dim = views[0].len();
        if dim == 0 || views.iter().any(|v| v.len() != dim) {
            return Err(AdapterError::BadConfig("views must share a non-zero dimension".into()));
        }
        let kept = vec![true; views.len()];
        Ok(Self { views, kept })
    }

    pub fn views(&self) -> &[Vec<f64>] {
        &self.views
    }

    pub fn n_views(&self) -> usize {
        self.views.len()
    }

    pub fn kept_mask(&self) -> &[bool] {
        &self.kept
    }

    pub fn kept_count(&self) -> usize {
        self.kept.iter().filter(|&&k| k).count()
    }

    pub fn set_kept_mask(&mut self, mask: Vec<bool>) -> Result<(), AdapterError> {
        if mask.len() != self.views.len() {
            return Err(AdapterError::DimMismatch {
                expected: self.views.len(),
                got: mask.len(),
            });
        }
        if !mask.iter().any(|&k| k) {
            return Err(AdapterError::BadConfig("kept mask must keep at least one view".into()));
        }
        self.kept = mask;
        Ok(())
    }
}

/// Build a view set: the original plus n_views-1 noisy copies, each with
/// Gaussian noise added and a fixed count of randomly chosen coordinates
/// zeroed.
pub fn augment<R: Rng>(x: &[f64], cfg: &AugmentConfig, rng: &mut R) -> Result<ViewSet, AdapterError> {
    cfg.validate()?;
    if x.is_empty() {
        return Err(AdapterError::BadConfig("input must be non-empty".into()));
    }
    let dim = x.len();
    let n_masked = ((cfg.mask_frac * dim as f64).round() as usize).min(dim);
    let mut views = Vec::with_capacity(cfg.n_views);
    views.push(x.to_vec());
    for _ in 1..cfg.n_views {
        let mut v: Vec<f64> = x
            .iter()
            .map(|&xi| xi + cfg.noise_scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        if n_masked > 0 {
            for idx in rand::seq::index::sample(rng, dim, n_masked) {
                v[idx] = 0.0;
            }
        }
        views.push(v);
    }
    ViewSet::from_views(views)
}

/// Keep the max(1, ceil(rho * N)) views with the lowest prediction entropy;
/// entropy ties keep the lower view index.
pub fn confidence_filter(
    view_probs: &[ProbabilityVector],
    rho: f64,
) -> Result<Vec<bool>, AdapterError> {
    if view_probs.is_empty() {
        return Err(AdapterError::BadConfig("no views to filter".into()));
    }
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(AdapterError::BadConfig(format!(
            "rho must lie in (0, 1], got {rho}"
        )));
    }
    let n = view_probs.len();
    let keep = ((rho * n as f64).ceil() as usize).clamp(1, n);
    let mut order: Vec<usize> = (0..n).collect();
    let entropies: Vec<f64> = view_probs.iter().map(entropy).collect();
    order.sort_by(|&a, &b| {
        (entropies[a], a)
            .partial_cmp(&(entropies[b], b))
            .expect("entropies are finite")
    });
    let mut mask = vec![false; n];
    for &i in &order[..keep] {
        mask[i] = true;
    }
    Ok(mask)
}

/// Compute view probabilities under the current prompt and store the
/// resulting kept mask on the view set.
pub fn filter_views(model: &PromptModel, vs: &mut ViewSet, rho: f64) -> Result<(), AdapterError> {
    let probs = model.view_probabilities(vs)?;
    let mask = confidence_filter(&probs, rho)?;
    vs.set_kept_mask(mask)
}

/// Entropy of the average class distribution over kept views.
pub fn marginal_entropy_from_probs(probs: &[ProbabilityVector], kept: &[bool]) -> f64 {
    let kept_idx: Vec<usize> = (0..probs.len()).filter(|&i| kept[i]).collect();
    let m = kept_idx.len() as f64;
    let k = probs[kept_idx[0]].len();
    let mut avg = vec![0.0; k];
    for &i in &kept_idx {
        for (a, p) in avg.iter_mut().zip(probs[i].as_slice()) {
            *a += p / m;
        }
    }
    let avg = ProbabilityVector::new(avg).expect("average of distributions is a distribution");
    entropy(&avg)
}

/// Marginal entropy of a filtered view set under the model.
pub fn marginal_entropy_loss(model: &PromptModel, vs: &ViewSet) -> Result<f64, AdapterError> {
    let probs = model.view_probabilities(vs)?;
    Ok(marginal_entropy_from_probs(&probs, vs.kept_mask()))
}

/// Mean and biased (1/N) variance of one layer's features over all views,
/// filtered or not.
pub fn view_statistics(
    model: &PromptModel,
    vs: &ViewSet,
    layer: usize,
) -> Result<(Vec<f64>, Vec<f64>), AdapterError> {
    if layer >= model.n_layers() {
        return Err(AdapterError::LayerOutOfRange {
            layer,
            n_layers: model.n_layers(),
        });
    }
    let n = vs.n_views() as f64;
    let dim = model.dim();
    let mut mean = vec![0.0; dim];
    let mut features = Vec::with_capacity(vs.n_views());
    for v in vs.views() {
        let enc = model.encode(v)?;
        let f = enc.layer_features.into_iter().nth(layer).expect("layer bound checked");
        for (m, x) in mean.iter_mut().zip(&f) {
            *m += x / n;
        }
        features.push(f);
    }
    let mut var = vec![0.0; dim];
    for f in &features {
        for ((v, x), m) in var.iter_mut().zip(f).zip(&mean) {
            let d = x - m;
            *v += d * d / n;
        }
    }
    Ok((mean, var))
}

/// Per-layer feature statistics of the source data: global and per class.
/// Layout is [layer][dim] for the global arrays and [layer][class][dim]
/// for the class-conditional ones.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceStats {
    pub global_mean: Vec<Vec<f64>>,
    pub global_var: Vec<Vec<f64>>,
    pub class_mean: Vec<Vec<Vec<f64>>>,
    pub class_var: Vec<Vec<Vec<f64>>>,
}

impl SourceStats {
    pub fn n_layers(&self) -> usize {
        self.global_mean.len()
    }

    pub fn k_classes(&self) -> usize {
        self.class_mean.first().map_or(0, |c| c.len())
    }

    fn check_against(&self, model: &PromptModel) -> Result<(), AdapterError> {
        if self.n_layers() != model.n_layers()
            || self.global_var.len() != self.n_layers()
            || self.class_mean.len() != self.n_layers()
            || self.class_var.len() != self.n_layers()
        {
            return Err(AdapterError::BadConfig(
                "source statistics do not cover every model layer".into(),
            ));
        }
        for l in 0..self.n_layers() {
            if self.global_mean[l].len() != model.dim() || self.global_var[l].len() != model.dim() {
                return Err(AdapterError::DimMismatch {
                    expected: model.dim(),
                    got: self.global_mean[l].len(),
                });
            }
        }
        Ok(())
    }
}

fn l1_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

/// Mean over layers of the L1 gaps between view statistics and the global
/// source statistics (means and variances both).
pub fn coarse_alignment_loss(
    model: &PromptModel,
    vs: &ViewSet,
    stats: &SourceStats,
) -> Result<f64, AdapterError> {
    stats.check_against(model)?;
    let n_layers = model.n_layers();
    let mut total = 0.0;
    for l in 0..n_layers {
        let (mean, var) = view_statistics(model, vs, l)?;
        total += l1_distance(&mean, &stats.global_mean[l]) + l1_distance(&var, &stats.global_var[l]);
    }
    Ok(total / n_layers as f64)
}

/// Like `coarse_alignment_loss` but against one class's source statistics.
pub fn fine_alignment_loss(
    model: &PromptModel,
    vs: &ViewSet,
    stats: &SourceStats,
    class: usize,
) -> Result<f64, AdapterError> {
    stats.check_against(model)?;
    if class >= stats.k_classes() {
        return Err(AdapterError::ClassOutOfRange {
            class,
            k_classes: stats.k_classes(),
        });
    }
    let n_layers = model.n_layers();
    let mut total = 0.0;
    for l in 0..n_layers {
        let (mean, var) = view_statistics(model, vs, l)?;
        total += l1_distance(&mean, &stats.class_mean[l][class])
            + l1_distance(&var, &stats.class_var[l][class]);
    }
    Ok(total / n_layers as f64)
}

/// Negative log-probability of the label for a single unaugmented input.
pub fn cross_entropy_loss(
    model: &PromptModel,
    input: &[f64],
    label: usize,
) -> Result<f64, AdapterError> {
    if label >= model.k_classes() {
        return Err(AdapterError::ClassOutOfRange {
            class: label,
            k_classes: model.k_classes(),
        });
    }
    let probs = model.predict(input)?;
    Ok(-probs.as_slice()[label].max(PROB_FLOOR).ln())
}

/// Coefficients of the composite objective. The marginal entropy term
/// always has coefficient 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub alpha_ce: f64,
    pub beta_coarse: f64,
    pub gamma_fine: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha_ce: 1.0,
            beta_coarse: 0.0,
            gamma_fine: 0.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), AdapterError> {
        for (name, v) in [
            ("alpha_ce", self.alpha_ce),
            ("beta_coarse", self.beta_coarse),
            ("gamma_fine", self.gamma_fine),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(AdapterError::BadConfig(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// A buffer entry prepared for one optimization step: its raw input and
/// label for the cross-entropy term, plus a fresh set of augmented views
/// for the alignment term.
#[derive(Debug, Clone)]
pub struct BufferItemViews {
    pub input: Vec<f64>,
    pub label: usize,
    pub views: ViewSet,
}

/// Re-augment a stored sample with the step's view pipeline.
pub fn prepare_buffer_item<R: Rng>(
    input: &[f64],
    label: usize,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Result<BufferItemViews, AdapterError> {
    Ok(BufferItemViews {
        input: input.to_vec(),
        label,
        views: augment(input, cfg, rng)?,
    })
}

/// Everything one optimization step differentiates through. Augmentations
/// and the kept mask are frozen here, so the loss is a deterministic
/// function of the prompt.
pub struct StepBatch<'a> {
    /// Current sample's views, already confidence-filtered.
    pub sample: &'a ViewSet,
    /// Labeled minibatch drawn from the buffer, re-augmented.
    pub buffer_items: &'a [BufferItemViews],
    /// Buffer alignment uses class-conditional statistics when true, the
    /// global statistics otherwise.
    pub class_aware: bool,
}

/// Weighted contributions of each objective term; they sum to `total`.
/// Terms whose weight is zero are skipped and reported as zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub entropy: f64,
    pub cross_entropy: f64,
    pub coarse: f64,
    pub fine: f64,
    pub total: f64,
}

struct ViewForward {
    /// h[0] is input + prompt; h[1..=L] are the tanh activations.
    h: Vec<Vec<f64>>,
    norm: f64,
    feature: Vec<f64>,
    probs: Vec<f64>,
}

fn forward_view(model: &PromptModel, input: &[f64]) -> Result<ViewForward, AdapterError> {
    if input.len() != model.dim {
        return Err(AdapterError::DimMismatch {
            expected: model.dim,
            got: input.len(),
        });
    }
    let mut h = Vec::with_capacity(model.layer_weights.len() + 1);
    h.push(
        input
            .iter()
            .zip(&model.prompt)
            .map(|(a, b)| a + b)
            .collect::<Vec<f64>>(),
    );
    for w in &model.layer_weights {
        let mut a = matvec(w, h.last().expect("seeded above"), model.dim);
        for v in &mut a {
            *v = v.tanh();
        }
        h.push(a);
    }
    let last = h.last().expect("at least one layer");
    let norm = l2_norm(last).max(MIN_NORM);
    let feature: Vec<f64> = last.iter().map(|v| v / norm).collect();
    let logits: Vec<f64> = model
        .class_prototypes
        .iter()
        .map(|p| dot(&feature, p) / model.temperature)
        .collect();
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let probs = exps.into_iter().map(|e| e / sum).collect();
    Ok(ViewForward {
        h,
        norm,
        feature,
        probs,
    })
}

/// Push a head gradient (w.r.t. logits) and accumulated per-activation
/// gradients down to the prompt.
fn backward_view(
    model: &PromptModel,
    fwd: &ViewForward,
    g_logits: Option<&[f64]>,
    mut g_h: Vec<Vec<f64>>,
    g_prompt: &mut [f64],
) {
    let n_layers = model.layer_weights.len();
    let dim = model.dim;
    if let Some(gl) = g_logits {
        // logits -> feature.
        let mut g_feat = vec![0.0; dim];
        for (c, proto) in model.class_prototypes.iter().enumerate() {
            let g = gl[c] / model.temperature;
            if g == 0.0 {
                continue;
            }
            for j in 0..dim {
                g_feat[j] += g * proto[j];
            }
        }
        // feature = z / norm  ->  z (the raw last activation).
        let z = &fwd.h[n_layers];
        let clamped = l2_norm(z) < MIN_NORM;
        let fg = dot(&fwd.feature, &g_feat);
        for j in 0..dim {
            let g = if clamped {
                g_feat[j] / fwd.norm
            } else {
                (g_feat[j] - fwd.feature[j] * fg) / fwd.norm
            };
            g_h[n_layers][j] += g;
        }
    }
    // tanh chains back to h[0] = input + prompt.
    for l in (1..=n_layers).rev() {
        let mut g_a = vec![0.0; dim];
        for j in 0..dim {
            let hj = fwd.h[l][j];
            g_a[j] = (1.0 - hj * hj) * g_h[l][j];
        }
        let g_prev = matvec_t(&model.layer_weights[l - 1], &g_a, dim);
        for j in 0..dim {
            g_h[l - 1][j] += g_prev[j];
        }
    }
    for j in 0..dim {
        g_prompt[j] += g_h[0][j];
    }
}

/// d(loss)/d(logits) for a loss given through d(loss)/d(probs).
fn softmax_backward(probs: &[f64], g_probs: &[f64]) -> Vec<f64> {
    let inner: f64 = probs.iter().zip(g_probs).map(|(p, g)| p * g).sum();
    probs
        .iter()
        .zip(g_probs)
        .map(|(p, g)| p * (g - inner))
        .collect()
}

/// Statistics alignment for one forwarded view set against explicit
/// targets. Returns the raw (unweighted) loss, and when `grads` is given
/// accumulates d(loss)/d(activation) scaled by `weight` into it.
fn stats_alignment(
    fwds: &[ViewForward],
    layer: usize,
    target_mean: &[f64],
    target_var: &[f64],
    weight: f64,
    grads: Option<&mut Vec<Vec<Vec<f64>>>>,
) -> f64 {
    let n = fwds.len() as f64;
    let dim = target_mean.len();
    let mut mean = vec![0.0; dim];
    for f in fwds {
        for j in 0..dim {
            mean[j] += f.h[layer + 1][j] / n;
        }
    }
    let mut var = vec![0.0; dim];
    for f in fwds {
        for j in 0..dim {
            let d = f.h[layer + 1][j] - mean[j];
            var[j] += d * d / n;
        }
    }
    let loss = l1_distance(&mean, target_mean) + l1_distance(&var, target_var);
    if let Some(g_h) = grads {
        for j in 0..dim {
            let s_mean = sign(mean[j] - target_mean[j]);
            let s_var = sign(var[j] - target_var[j]);
            for (v, f) in fwds.iter().enumerate() {
                let centered = f.h[layer + 1][j] - mean[j];
                g_h[v][layer + 1][j] += weight * (s_mean / n + s_var * 2.0 * centered / n);
            }
        }
    }
    loss
}

/// Subgradient convention for |x| at 0.
fn sign(x: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x.signum()
    }
}

fn composite_inner(
    model: &PromptModel,
    batch: &StepBatch,
    stats: &SourceStats,
    w: &LossWeights,
    want_grad: bool,
) -> Result<(LossBreakdown, Vec<f64>), AdapterError> {
    w.validate()?;
    stats.check_against(model)?;
    let dim = model.dim();
    let n_layers = model.n_layers();
    let k = model.k_classes();
    let mut g_prompt = vec![0.0; dim];
    let zero_gh = |n_views: usize| vec![vec![vec![0.0; dim]; n_layers + 1]; n_views];

    // Current sample: marginal entropy over kept views, coarse alignment
    // over all views.
    let sample_fwds: Vec<ViewForward> = batch
        .sample
        .views()
        .iter()
        .map(|v| forward_view(model, v))
        .collect::<Result<_, _>>()?;
    let kept: Vec<usize> = (0..sample_fwds.len())
        .filter(|&i| batch.sample.kept_mask()[i])
        .collect();
    if kept.is_empty() {
        return Err(AdapterError::BadConfig("kept mask keeps no views".into()));
    }
    let m = kept.len() as f64;
    let mut avg = vec![0.0; k];
    for &i in &kept {
        for j in 0..k {
            avg[j] += sample_fwds[i].probs[j] / m;
        }
    }
    let mut entropy_term = 0.0;
    for &p in &avg {
        if p > 0.0 {
            entropy_term -= p * p.ln();
        }
    }
    let entropy_term = entropy_term.max(0.0);

    // Per-view head gradients from the entropy term. d entropy / d p_bar
    // is -(ln p_bar + 1), and each kept view owns a 1/m share of p_bar.
    // The floor is safe: where p_bar underflows, the view probability
    // multiplying the clamped log is itself zero.
    let mut head_grads: Vec<Option<Vec<f64>>> = vec![None; sample_fwds.len()];
    if want_grad {
        let g_pbar: Vec<f64> = avg.iter().map(|&p| -(p.max(PROB_FLOOR).ln() + 1.0)).collect();
        for &i in &kept {
            let g_probs: Vec<f64> = g_pbar.iter().map(|g| g / m).collect();
            head_grads[i] = Some(softmax_backward(&sample_fwds[i].probs, &g_probs));
        }
    }

    let mut sample_gh = zero_gh(sample_fwds.len());
    let mut coarse_raw = 0.0;
    if w.beta_coarse > 0.0 {
        let per_layer = w.beta_coarse / n_layers as f64;
        for l in 0..n_layers {
            coarse_raw += stats_alignment(
                &sample_fwds,
                l,
                &stats.global_mean[l],
                &stats.global_var[l],
                per_layer,
                if want_grad { Some(&mut sample_gh) } else { None },
            ) / n_layers as f64;
        }
    }
    let coarse_term = w.beta_coarse * coarse_raw;

    if want_grad {
        for ((fwd, gh), head) in sample_fwds.iter().zip(sample_gh).zip(&head_grads) {
            backward_view(model, fwd, head.as_deref(), gh, &mut g_prompt);
        }
    }

    // Labeled minibatch: cross entropy on the raw inputs, alignment on
    // their fresh views. Both are means over the batch.
    let mut ce_raw = 0.0;
    let mut fine_raw = 0.0;
    let b = batch.buffer_items.len();
    if b > 0 {
        let bf = b as f64;
        for item in batch.buffer_items {
            if item.label >= k {
                return Err(AdapterError::ClassOutOfRange {
                    class: item.label,
                    k_classes: k,
                });
            }
            if w.alpha_ce > 0.0 {
                let fwd = forward_view(model, &item.input)?;
                ce_raw += -fwd.probs[item.label].max(PROB_FLOOR).ln() / bf;
                if want_grad {
                    let scale = w.alpha_ce / bf;
                    let g: Vec<f64> = fwd
                        .probs
                        .iter()
                        .enumerate()
                        .map(|(c, &p)| scale * (p - if c == item.label { 1.0 } else { 0.0 }))
                        .collect();
                    backward_view(model, &fwd, Some(&g), zero_gh(1).pop().expect("one"), &mut g_prompt);
                }
            }
            if w.gamma_fine > 0.0 {
                if batch.class_aware && item.label >= stats.k_classes() {
                    return Err(AdapterError::ClassOutOfRange {
                        class: item.label,
                        k_classes: stats.k_classes(),
                    });
                }
                let fwds: Vec<ViewForward> = item
                    .views
                    .views()
                    .iter()
                    .map(|v| forward_view(model, v))
                    .collect::<Result<_, _>>()?;
                let mut gh = if want_grad { Some(zero_gh(fwds.len())) } else { None };
                let per_layer = w.gamma_fine / (bf * n_layers as f64);
                let mut item_loss = 0.0;
                for l in 0..n_layers {
                    let (t_mean, t_var) = if batch.class_aware {
                        (
                            &stats.class_mean[l][item.label][..],
                            &stats.class_var[l][item.label][..],
                        )
                    } else {
                        (&stats.global_mean[l][..], &stats.global_var[l][..])
                    };
                    item_loss +=
                        stats_alignment(&fwds, l, t_mean, t_var, per_layer, gh.as_mut())
                            / n_layers as f64;
                }
                fine_raw += item_loss / bf;
                if let Some(gh) = gh {
                    for (fwd, gh_v) in fwds.iter().zip(gh) {
                        backward_view(model, fwd, None, gh_v, &mut g_prompt);
                    }
                }
            }
        }
    }
    let ce_term = w.alpha_ce * ce_raw;
    let fine_term = w.gamma_fine * fine_raw;

    Ok((
        LossBreakdown {
            entropy: entropy_term,
            cross_entropy: ce_term,
            coarse: coarse_term,
            fine: fine_term,
            total: entropy_term + ce_term + coarse_term + fine_term,
        },
        g_prompt,
    ))
}

/// Composite objective value at the current prompt. Augmentations and the
/// kept mask live in the batch, so this is deterministic in the prompt.
pub fn composite_loss(
    model: &PromptModel,
    batch: &StepBatch,
    stats: &SourceStats,
    w: &LossWeights,
) -> Result<LossBreakdown, AdapterError> {
    composite_inner(model, batch, stats, w, false).map(|(b, _)| b)
}

/// Composite objective and its exact gradient with respect to the prompt.
pub fn composite_loss_and_grad(
    model: &PromptModel,
    batch: &StepBatch,
    stats: &SourceStats,
    w: &LossWeights,
) -> Result<(LossBreakdown, Vec<f64>), AdapterError> {
    composite_inner(model, batch, stats, w, true)
}

/// One gradient descent step on the prompt: p <- p - lr * g. Everything
/// else in the model stays untouched.
pub fn gradient_step(model: &mut PromptModel, grad: &[f64], lr: f64) -> Result<(), AdapterError> {
    if grad.len() != model.dim() {
        return Err(AdapterError::DimMismatch {
            expected: model.dim(),
            got: grad.len(),
        });
    }
    if !lr.is_finite() {
        return Err(AdapterError::BadConfig(format!("learning rate must be finite, got {lr}")));
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(AdapterError::BadConfig("gradient has non-finite entries".into()));
    }
    let updated: Vec<f64> = model
        .prompt
        .iter()
        .zip(grad)
        .map(|(p, g)| p - lr * g)
        .collect();
    model.prompt = updated;
    Ok(())
}
