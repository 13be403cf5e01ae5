//! Bounded label store for queried samples. Eviction keeps class counts
//! near uniform: the victim comes from a class with maximal count, and
//! within it the entry the model already finds easiest (lowest cross
//! entropy) goes first. Class imbalance is tracked by
//! f = sum_c |count_c - L/K|, which post-fill never increases and, once it
//! reaches 0, oscillates between 0 and 2.

use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BufferError {
    #[error("buffer needs capacity >= 1 and k_classes >= 1, got L={capacity} K={k_classes}")]
    BadShape { capacity: usize, k_classes: usize },
    #[error("label {label} out of range for {k_classes} classes")]
    InvalidLabel { label: usize, k_classes: usize },
    #[error("cross entropy must be finite and non-negative, got {0}")]
    InvalidCost(f64),
    #[error("eviction is only defined at capacity")]
    NotFull,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BufferEntry {
    pub sample_id: u64,
    pub input: Vec<f64>,
    pub label: usize,
    /// Stream position at which the entry was stored.
    pub inserted_at: u64,
    /// Most recently computed cross entropy of the model on this entry.
    pub last_ce: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelBuffer {
    capacity: usize,
    k_classes: usize,
    entries: Vec<BufferEntry>,
    class_counts: Vec<usize>,
}

impl LabelBuffer {
    pub fn new(capacity: usize, k_classes: usize) -> Result<Self, BufferError> {
        if capacity == 0 || k_classes == 0 {
            return Err(BufferError::BadShape {
                capacity,
                k_classes,
            });
        }
        Ok(Self {
            capacity,
            k_classes,
            entries: Vec::with_capacity(capacity),
            class_counts: vec![0; k_classes],
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn k_classes(&self) -> usize {
        self.k_classes
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.entries.len() == self.capacity
    }

    pub fn entries(&self) -> &[BufferEntry] {
        &self.entries
    }

    pub fn class_counts(&self) -> &[usize] {
        &self.class_counts
    }

    /// f = sum_c |count_c - L/K|. The sum is accumulated in integers
    /// (scaled by K) so the result is exact even when K does not divide L.
    pub fn balance_measure(&self) -> f64 {
        let l = self.capacity as i64;
        let k = self.k_classes as i64;
        let scaled: i64 = self
            .class_counts
            .iter()
            .map(|&c| (k * c as i64 - l).abs())
            .sum();
        scaled as f64 / k as f64
    }

    fn check_entry(&self, entry: &BufferEntry) -> Result<(), BufferError> {
        if entry.label >= self.k_classes {
            return Err(BufferError::InvalidLabel {
                label: entry.label,
                k_classes: self.k_classes,
            });
        }
        if !entry.last_ce.is_finite() || entry.last_ce < 0.0 {
            return Err(BufferError::InvalidCost(entry.last_ce));
        }
        Ok(())
    }

    /// Index of the entry the balanced policy would evict. Only defined at
    /// capacity. Victim class: maximal count; among several maximal classes
    /// the one whose members have the lowest mean cross entropy (ties to the
    /// lowest class index). Victim entry: lowest cross entropy within that
    /// class, ties to the earliest insertion.
    pub fn select_victim(&self) -> Result<usize, BufferError> {
        if !self.is_full() {
            return Err(BufferError::NotFull);
        }
        let max_count = *self.class_counts.iter().max().expect("k_classes >= 1");
        let mut victim_class = usize::MAX;
        let mut best_total = f64::INFINITY;
        for c in 0..self.k_classes {
            if self.class_counts[c] != max_count {
                continue;
            }
            // Candidate classes all hold max_count entries, so comparing
            // summed cross entropy orders them exactly like the mean.
            let total: f64 = self
                .entries
                .iter()
                .filter(|e| e.label == c)
                .map(|e| e.last_ce)
                .sum();
            if total < best_total {
                best_total = total;
                victim_class = c;
            }
        }
        let victim = self
            .entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.label == victim_class)
            .min_by(|(_, a), (_, b)| {
                (a.last_ce, a.inserted_at)
                    .partial_cmp(&(b.last_ce, b.inserted_at))
                    .expect("stored cross entropies are finite")
            })
            .map(|(i, _)| i)
            .expect("a maximal class is never empty at capacity");
        Ok(victim)
    }

    /// Store an entry, evicting via `select_victim` when at capacity.
    /// Returns the evicted entry, if any.
    pub fn insert(&mut self, entry: BufferEntry) -> Result<Option<BufferEntry>, BufferError> {
        self.check_entry(&entry)?;
        let evicted = if self.is_full() {
            let idx = self.select_victim()?;
            let out = self.entries.remove(idx);
            self.class_counts[out.label] -= 1;
            Some(out)
        } else {
            None
        };
        self.class_counts[entry.label] += 1;
        self.entries.push(entry);
        Ok(evicted)
    }

    /// Baseline eviction: a uniformly random non-empty class, then a
    /// uniformly random entry inside it.
    pub fn insert_random_evict<R: Rng>(
        &mut self,
        entry: BufferEntry,
        rng: &mut R,
    ) -> Result<Option<BufferEntry>, BufferError> {
        self.check_entry(&entry)?;
        let evicted = if self.is_full() {
            let occupied: Vec<usize> = (0..self.k_classes)
                .filter(|&c| self.class_counts[c] > 0)
                .collect();
            let class = occupied[rng.gen_range(0..occupied.len())];
            let members: Vec<usize> = self
                .entries
                .iter()
                .enumerate()
                .filter(|(_, e)| e.label == class)
                .map(|(i, _)| i)
                .collect();
            let idx = members[rng.gen_range(0..members.len())];
            let out = self.entries.remove(idx);
            self.class_counts[out.label] -= 1;
            Some(out)
        } else {
            None
        };
        self.class_counts[entry.label] += 1;
        self.entries.push(entry);
        Ok(evicted)
    }

    /// Recompute every entry's cross entropy under the current model. Done
    /// once per step, right before an eviction decision, so victims are
    /// chosen on fresh costs.
    pub fn refresh_ce<F: FnMut(&[f64], usize) -> f64>(&mut self, mut ce: F) {
        for entry in &mut self.entries {
            let cost = ce(&entry.input, entry.label);
            assert!(
                cost.is_finite() && cost >= 0.0,
                "cross entropy callback produced {cost}"
            );
            entry.last_ce = cost;
        }
    }

    /// Uniform sample of `m` distinct entries (all of them when m >= len).
    pub fn sample_minibatch<R: Rng>(&self, m: usize, rng: &mut R) -> Vec<BufferEntry> {
        let take = m.min(self.entries.len());
        if take == 0 {
            return Vec::new();
        }
        let mut indices = rand::seq::index::sample(rng, self.entries.len(), take).into_vec();
        indices.sort_unstable();
        indices.into_iter().map(|i| self.entries[i].clone()).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("sample_id,label,inserted_at,last_ce\n");
        for e in &self.entries {
            out.push_str(&format!(
                "{},{},{},{}\n",
                e.sample_id, e.label, e.inserted_at, e.last_ce
            ));
        }
        out
    }
}
