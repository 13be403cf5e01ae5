//! Synthetic world: Gaussian class clusters for the source data, a shifted
//! copy of them for the test stream, and an oracle that reveals labels.
//! Everything is a pure function of the world configuration, so a config
//! reproduces its data byte for byte.

use crate::adapter::{PromptModel, SourceStats};
use crate::rng::{stream_rng, tags};
use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid world configuration: {0}")]
    BadConfig(String),
    #[error("class {class} has no samples")]
    EmptyClass { class: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("label {label} out of range for {k_classes} classes")]
    BadLabel { label: usize, k_classes: usize },
}

/// How the test stream differs from the source distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShiftKind {
    None,
    /// One fixed offset added to every stream input.
    MeanShift,
    /// A distinct fixed offset per class; makes class-conditional
    /// alignment strictly more informative than global alignment.
    ClassConditionalShift,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorldConfig {
    pub k_classes: usize,
    pub dim: usize,
    /// Scale applied to the orthonormal centroid directions.
    pub class_sep: f64,
    /// Standard deviation of the isotropic noise around each centroid.
    pub source_noise: f64,
    pub shift_kind: ShiftKind,
    /// Euclidean norm of each shift offset.
    pub shift_magnitude: f64,
    /// Source points drawn per class.
    pub n_source: usize,
    pub stream_len: usize,
    /// Class frequencies in the stream; must sum to 1.
    pub class_mix: Vec<f64>,
    pub seed: u64,
}

impl WorldConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.k_classes == 0 || self.dim == 0 {
            return Err(SimError::BadConfig("k_classes and dim must be >= 1".into()));
        }
        if self.stream_len == 0 {
            return Err(SimError::BadConfig("stream_len must be >= 1".into()));
        }
        if self.n_source == 0 {
            return Err(SimError::BadConfig("n_source must be >= 1".into()));
        }
        for (name, v) in [
            ("class_sep", self.class_sep),
            ("source_noise", self.source_noise),
            ("shift_magnitude", self.shift_magnitude),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(SimError::BadConfig(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if self.class_mix.len() != self.k_classes {
            return Err(SimError::BadConfig(format!(
                "class_mix has {} entries for {} classes",
                self.class_mix.len(),
                self.k_classes
            )));
        }
        if self.class_mix.iter().any(|&w| !(w.is_finite() && w >= 0.0)) {
            return Err(SimError::BadConfig("class_mix entries must be finite and >= 0".into()));
        }
        let sum: f64 = self.class_mix.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(SimError::BadConfig(format!("class_mix sums to {sum}, want 1")));
        }
        Ok(())
    }

    /// Uniform class mix.
    pub fn uniform_mix(k: usize) -> Vec<f64> {
        vec![1.0 / k as f64; k]
    }
}

/// One test-time sample. The label is hidden behind `oracle`; nothing in
/// the pipeline reads it directly.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamSample {
    pub sample_id: u64,
    pub input: Vec<f64>,
    true_label: usize,
}

/// Reveal a sample's label. Idempotent; the harness decides when calling
/// this is legitimate.
pub fn oracle(sample: &StreamSample) -> usize {
    sample.true_label
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub input: Vec<f64>,
    pub label: usize,
}

/// Frozen world geometry: centroids and shift offsets derived from the
/// config seed. Data draws re-seed per call, so `make_source` and
/// `make_stream` return identical data every time they are called.
#[derive(Debug, Clone, PartialEq)]
pub struct World {
    cfg: WorldConfig,
    centroids: Vec<Vec<f64>>,
    mean_shift: Vec<f64>,
    class_shifts: Vec<Vec<f64>>,
}

fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Random unit directions, pairwise orthogonal while the dimension allows
/// (Gram-Schmidt); beyond that, plain random unit vectors.
fn orthogonalish_directions<R: Rng>(n: usize, dim: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let mut dirs: Vec<Vec<f64>> = Vec::with_capacity(n);
    while dirs.len() < n {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        if dirs.len() < dim {
            for d in &dirs {
                let proj: f64 = v.iter().zip(d).map(|(a, b)| a * b).sum();
                for (vi, di) in v.iter_mut().zip(d) {
                    *vi -= proj * di;
                }
            }
        }
        let norm = l2_norm(&v);
        if norm < 1e-9 {
            continue;
        }
        for vi in &mut v {
            *vi /= norm;
        }
        dirs.push(v);
    }
    dirs
}

impl World {
    pub fn new(cfg: WorldConfig) -> Result<Self, SimError> {
        cfg.validate()?;
        let mut geo = stream_rng(cfg.seed, tags::CENTROIDS);
        let centroids: Vec<Vec<f64>> = orthogonalish_directions(cfg.k_classes, cfg.dim, &mut geo)
            .into_iter()
            .map(|d| d.into_iter().map(|x| x * cfg.class_sep).collect())
            .collect();

        let mut shift_rng = stream_rng(cfg.seed, tags::SHIFT);
        let offset = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<f64> {
            let dir = orthogonalish_directions(1, cfg.dim, rng).remove(0);
            dir.into_iter().map(|x| x * cfg.shift_magnitude).collect()
        };
        let (mean_shift, class_shifts) = match cfg.shift_kind {
            ShiftKind::None => (vec![0.0; cfg.dim], vec![vec![0.0; cfg.dim]; cfg.k_classes]),
            ShiftKind::MeanShift => (
                offset(&mut shift_rng),
                vec![vec![0.0; cfg.dim]; cfg.k_classes],
            ),
            ShiftKind::ClassConditionalShift => {
                let shifts = (0..cfg.k_classes).map(|_| offset(&mut shift_rng)).collect();
                (vec![0.0; cfg.dim], shifts)
            }
        };
        Ok(Self {
            cfg,
            centroids,
            mean_shift,
            class_shifts,
        })
    }

    pub fn cfg(&self) -> &WorldConfig {
        &self.cfg
    }

    pub fn centroids(&self) -> &[Vec<f64>] {
        &self.centroids
    }

    fn draw_around<R: Rng>(&self, class: usize, rng: &mut R) -> Vec<f64> {
        self.centroids[class]
            .iter()
            .map(|&c| c + self.cfg.source_noise * rng.sample::<f64, _>(StandardNormal))
            .collect()
    }

    /// Labeled source dataset: n_source points per class, grouped by class
    /// in ascending label order.
    pub fn make_source(&self) -> Vec<LabeledSample> {
        let mut rng = stream_rng(self.cfg.seed, tags::SOURCE);
        let mut out = Vec::with_capacity(self.cfg.k_classes * self.cfg.n_source);
        for c in 0..self.cfg.k_classes {
            for _ in 0..self.cfg.n_source {
                out.push(LabeledSample {
                    input: self.draw_around(c, &mut rng),
                    label: c,
                });
            }
        }
        out
    }

    /// Shifted test stream: labels follow class_mix, inputs follow the
    /// class Gaussian plus the configured offset.
    pub fn make_stream(&self) -> Vec<StreamSample> {
        let mut rng = stream_rng(self.cfg.seed, tags::STREAM);
        (0..self.cfg.stream_len as u64)
            .map(|sample_id| {
                let label = sample_label(&self.cfg.class_mix, &mut rng);
                let mut input = self.draw_around(label, &mut rng);
                for (x, (m, c)) in input
                    .iter_mut()
                    .zip(self.mean_shift.iter().zip(&self.class_shifts[label]))
                {
                    *x += m + c;
                }
                StreamSample {
                    sample_id,
                    input,
                    true_label: label,
                }
            })
            .collect()
    }
}

fn sample_label<R: Rng>(mix: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (c, &w) in mix.iter().enumerate() {
        acc += w;
        if u < acc {
            return c;
        }
    }
    mix.len() - 1
}

/// Per-layer feature statistics of a labeled dataset under the frozen
/// encoder with a zero prompt: biased global and per-class moments.
pub fn compute_source_stats(
    model: &PromptModel,
    dataset: &[LabeledSample],
) -> Result<SourceStats, SimError> {
    if dataset.is_empty() {
        return Err(SimError::EmptyClass { class: 0 });
    }
    let k = model.k_classes();
    let n_layers = model.n_layers();
    let dim = model.dim();
    let zero_prompt = vec![0.0; dim];

    let mut counts = vec![0usize; k];
    let mut features: Vec<Vec<Vec<f64>>> = Vec::with_capacity(dataset.len());
    for s in dataset {
        if s.label >= k {
            return Err(SimError::BadLabel {
                label: s.label,
                k_classes: k,
            });
        }
        if s.input.len() != dim {
            return Err(SimError::DimMismatch {
                expected: dim,
                got: s.input.len(),
            });
        }
        counts[s.label] += 1;
        let enc = model
            .encode_with(&s.input, &zero_prompt)
            .expect("dimensions checked above");
        features.push(enc.layer_features);
    }
    if let Some(class) = counts.iter().position(|&c| c == 0) {
        return Err(SimError::EmptyClass { class });
    }

    let n = dataset.len() as f64;
    let mut global_mean = vec![vec![0.0; dim]; n_layers];
    let mut global_var = vec![vec![0.0; dim]; n_layers];
    let mut class_mean = vec![vec![vec![0.0; dim]; k]; n_layers];
    let mut class_var = vec![vec![vec![0.0; dim]; k]; n_layers];

    for (s, f) in dataset.iter().zip(&features) {
        for l in 0..n_layers {
            for j in 0..dim {
                global_mean[l][j] += f[l][j] / n;
                class_mean[l][s.label][j] += f[l][j] / counts[s.label] as f64;
            }
        }
    }
    for (s, f) in dataset.iter().zip(&features) {
        for l in 0..n_layers {
            for j in 0..dim {
                let dg = f[l][j] - global_mean[l][j];
                global_var[l][j] += dg * dg / n;
                let dc = f[l][j] - class_mean[l][s.label][j];
                class_var[l][s.label][j] += dc * dc / counts[s.label] as f64;
            }
        }
    }
    Ok(SourceStats {
        global_mean,
        global_var,
        class_mean,
        class_var,
    })
}

fn float_row(values: &[f64]) -> String {
    values
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

fn csv_header(dim: usize) -> String {
    let coords: Vec<String> = (0..dim).map(|j| format!("x{j}")).collect();
    format!("sample_id,label,{}\n", coords.join(","))
}

/// Inspection dump of the source dataset, labels included.
pub fn source_to_csv(dataset: &[LabeledSample]) -> String {
    let dim = dataset.first().map_or(0, |s| s.input.len());
    let mut out = csv_header(dim);
    for (i, s) in dataset.iter().enumerate() {
        out.push_str(&format!("{i},{},{}\n", s.label, float_row(&s.input)));
    }
    out
}

/// Inspection dump of the stream. Labels are printed here deliberately;
/// this is an offline debugging artifact, not a pipeline input.
pub fn stream_to_csv(stream: &[StreamSample]) -> String {
    let dim = stream.first().map_or(0, |s| s.input.len());
    let mut out = csv_header(dim);
    for s in stream {
        out.push_str(&format!(
            "{},{},{}\n",
            s.sample_id,
            s.true_label,
            float_row(&s.input)
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn base_cfg() -> WorldConfig {
        WorldConfig {
            k_classes: 3,
            dim: 6,
            class_sep: 2.0,
            source_noise: 0.5,
            shift_kind: ShiftKind::None,
            shift_magnitude: 0.0,
            n_source: 10,
            stream_len: 50,
            class_mix: WorldConfig::uniform_mix(3),
            seed: 7,
        }
    }

    #[test]
    fn centroids_are_orthogonal_with_requested_scale() {
        let w = World::new(base_cfg()).unwrap();
        let c = w.centroids();
        for i in 0..3 {
            assert!((l2_norm(&c[i]) - 2.0).abs() < 1e-9);
            for j in (i + 1)..3 {
                let dot: f64 = c[i].iter().zip(&c[j]).map(|(a, b)| a * b).sum();
                assert!(dot.abs() < 1e-9, "centroids {i},{j} not orthogonal: {dot}");
            }
        }
    }

    #[test]
    fn more_classes_than_dimensions_still_works() {
        let mut cfg = base_cfg();
        cfg.k_classes = 5;
        cfg.dim = 3;
        cfg.class_mix = WorldConfig::uniform_mix(5);
        let w = World::new(cfg).unwrap();
        for c in w.centroids() {
            assert!((l2_norm(c) - 2.0).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_separation_collapses_centroids() {
        let mut cfg = base_cfg();
        cfg.class_sep = 0.0;
        let w = World::new(cfg).unwrap();
        for c in w.centroids() {
            assert!(c.iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn source_without_noise_sits_on_centroids() {
        let mut cfg = base_cfg();
        cfg.source_noise = 0.0;
        let w = World::new(cfg).unwrap();
        for s in w.make_source() {
            assert_eq!(s.input, w.centroids()[s.label]);
        }
    }

    #[test]
    fn source_has_requested_class_counts() {
        let w = World::new(base_cfg()).unwrap();
        let src = w.make_source();
        assert_eq!(src.len(), 30);
        for c in 0..3 {
            assert_eq!(src.iter().filter(|s| s.label == c).count(), 10);
        }
    }

    #[test]
    fn world_data_is_reproducible() {
        let a = World::new(base_cfg()).unwrap();
        let b = World::new(base_cfg()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.make_source(), b.make_source());
        assert_eq!(a.make_stream(), b.make_stream());
        // Repeated calls on the same world also agree.
        assert_eq!(a.make_stream(), a.make_stream());
    }

    #[test]
    fn stream_without_shift_or_noise_sits_on_centroids() {
        let mut cfg = base_cfg();
        cfg.source_noise = 0.0;
        let w = World::new(cfg).unwrap();
        for s in w.make_stream() {
            assert_eq!(s.input, w.centroids()[oracle(&s)]);
        }
    }

    #[test]
    fn one_hot_mix_yields_one_class() {
        let mut cfg = base_cfg();
        cfg.class_mix = vec![0.0, 1.0, 0.0];
        let w = World::new(cfg).unwrap();
        assert!(w.make_stream().iter().all(|s| oracle(s) == 1));
    }

    #[test]
    fn label_frequencies_follow_the_mix() {
        let mut cfg = base_cfg();
        cfg.class_mix = vec![0.5, 0.3, 0.2];
        cfg.stream_len = 10_000;
        let w = World::new(cfg).unwrap();
        let stream = w.make_stream();
        for (c, &want) in [0.5, 0.3, 0.2].iter().enumerate() {
            let freq = stream.iter().filter(|s| oracle(s) == c).count() as f64 / 10_000.0;
            assert!((freq - want).abs() <= 0.02, "class {c}: {freq} vs {want}");
        }
    }

    #[test]
    fn mean_shift_offsets_every_sample_equally() {
        let mut cfg = base_cfg();
        cfg.source_noise = 0.0;
        cfg.shift_kind = ShiftKind::MeanShift;
        cfg.shift_magnitude = 2.5;
        let w = World::new(cfg).unwrap();
        let stream = w.make_stream();
        let offset: Vec<f64> = stream[0]
            .input
            .iter()
            .zip(&w.centroids()[oracle(&stream[0])])
            .map(|(x, c)| x - c)
            .collect();
        assert!((l2_norm(&offset) - 2.5).abs() < 1e-9);
        for s in &stream {
            let o: Vec<f64> = s
                .input
                .iter()
                .zip(&w.centroids()[oracle(s)])
                .map(|(x, c)| x - c)
                .collect();
            for (a, b) in o.iter().zip(&offset) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn class_conditional_shift_differs_per_class() {
        let mut cfg = base_cfg();
        cfg.source_noise = 0.0;
        cfg.shift_kind = ShiftKind::ClassConditionalShift;
        cfg.shift_magnitude = 1.5;
        cfg.stream_len = 200;
        let w = World::new(cfg).unwrap();
        let stream = w.make_stream();
        let mut offsets: Vec<Option<Vec<f64>>> = vec![None; 3];
        for s in &stream {
            let o: Vec<f64> = s
                .input
                .iter()
                .zip(&w.centroids()[oracle(s)])
                .map(|(x, c)| x - c)
                .collect();
            assert!((l2_norm(&o) - 1.5).abs() < 1e-9);
            match &offsets[oracle(s)] {
                None => offsets[oracle(s)] = Some(o),
                Some(prev) => {
                    for (a, b) in o.iter().zip(prev) {
                        assert!((a - b).abs() < 1e-12);
                    }
                }
            }
        }
        let o0 = offsets[0].as_ref().unwrap();
        let o1 = offsets[1].as_ref().unwrap();
        assert!(o0.iter().zip(o1).any(|(a, b)| (a - b).abs() > 1e-6));
    }

    #[test]
    fn zero_magnitude_shift_matches_source_distribution() {
        let mut cfg = base_cfg();
        cfg.shift_kind = ShiftKind::ClassConditionalShift;
        cfg.shift_magnitude = 0.0;
        cfg.n_source = 700;
        cfg.stream_len = 2000;
        let w = World::new(cfg).unwrap();
        let src = w.make_source();
        let stream = w.make_stream();
        let mean = |rows: Vec<&Vec<f64>>| -> Vec<f64> {
            let n = rows.len() as f64;
            let mut m = vec![0.0; 6];
            for r in rows {
                for (mi, x) in m.iter_mut().zip(r) {
                    *mi += x / n;
                }
            }
            m
        };
        let src_mean = mean(src.iter().map(|s| &s.input).collect());
        let stream_mean = mean(stream.iter().map(|s| &s.input).collect());
        for (a, b) in src_mean.iter().zip(&stream_mean) {
            assert!((a - b).abs() < 0.1, "means diverge: {a} vs {b}");
        }
    }

    #[test]
    fn oracle_is_idempotent_and_in_range() {
        let w = World::new(base_cfg()).unwrap();
        for s in w.make_stream() {
            let first = oracle(&s);
            assert_eq!(oracle(&s), first);
            assert!(first < 3);
        }
    }

    #[test]
    fn config_validation_rejects_bad_worlds() {
        let mut bad = base_cfg();
        bad.class_mix = vec![0.5, 0.5];
        assert!(World::new(bad).is_err());

        let mut bad = base_cfg();
        bad.class_mix = vec![0.5, 0.4, 0.2];
        assert!(World::new(bad).is_err());

        let mut bad = base_cfg();
        bad.stream_len = 0;
        assert!(World::new(bad).is_err());

        let mut bad = base_cfg();
        bad.source_noise = -1.0;
        assert!(World::new(bad).is_err());

        let mut bad = base_cfg();
        bad.n_source = 0;
        assert!(World::new(bad).is_err());
    }

    fn toy_model(seed: u64) -> PromptModel {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        PromptModel::random(6, 3, 2, 0.5, &mut r).unwrap()
    }

    #[test]
    fn single_point_classes_have_zero_class_variance() {
        let mut cfg = base_cfg();
        cfg.n_source = 1;
        let w = World::new(cfg).unwrap();
        let stats = compute_source_stats(&toy_model(1), &w.make_source()).unwrap();
        for l in 0..2 {
            for c in 0..3 {
                assert!(stats.class_var[l][c].iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn global_mean_is_count_weighted_class_mean() {
        let w = World::new(base_cfg()).unwrap();
        let mut data = w.make_source();
        data.truncate(data.len() - 4);
        let model = toy_model(2);
        let stats = compute_source_stats(&model, &data).unwrap();
        let mut counts = vec![0usize; 3];
        for s in &data {
            counts[s.label] += 1;
        }
        let n = data.len() as f64;
        for l in 0..2 {
            for j in 0..6 {
                let weighted: f64 = (0..3)
                    .map(|c| counts[c] as f64 / n * stats.class_mean[l][c][j])
                    .sum();
                assert!((weighted - stats.global_mean[l][j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn source_stats_ignore_the_current_prompt() {
        let w = World::new(base_cfg()).unwrap();
        let data = w.make_source();
        let mut model = toy_model(3);
        let clean = compute_source_stats(&model, &data).unwrap();
        model.set_prompt(vec![0.7; 6]).unwrap();
        let prompted = compute_source_stats(&model, &data).unwrap();
        assert_eq!(clean, prompted);
    }

    #[test]
    fn stats_require_every_class_present() {
        let w = World::new(base_cfg()).unwrap();
        let data: Vec<LabeledSample> = w
            .make_source()
            .into_iter()
            .filter(|s| s.label != 1)
            .collect();
        assert!(matches!(
            compute_source_stats(&toy_model(4), &data),
            Err(SimError::EmptyClass { class: 1 })
        ));
        assert!(compute_source_stats(&toy_model(4), &[]).is_err());
    }

    #[test]
    fn csv_dumps_have_one_row_per_sample() {
        let mut cfg = base_cfg();
        cfg.n_source = 2;
        cfg.stream_len = 3;
        let w = World::new(cfg).unwrap();
        let src_csv = source_to_csv(&w.make_source());
        assert_eq!(src_csv.lines().count(), 1 + 6);
        assert!(src_csv.starts_with("sample_id,label,x0,x1,x2,x3,x4,x5\n"));
        let stream_csv = stream_to_csv(&w.make_stream());
        assert_eq!(stream_csv.lines().count(), 1 + 3);
        for (i, line) in stream_csv.lines().skip(1).enumerate() {
            assert!(line.starts_with(&format!("{i},")));
        }
    }
}
