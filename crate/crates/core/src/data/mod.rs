//! CSI sample and annotation model, clip slicing, synthetic data, and the
//! on-disk dataset format.

mod clips;
pub mod intel5300;
mod io;
mod synth;

pub use clips::{merge_clip_detections, slice_clips, slice_clips_with, Clip, MIN_CLIP_SEGMENT_S};
pub use io::{
    read_dataset, read_signal, write_dataset, write_signal, ANNOTATION_FILE, CLASSES_FILE,
    SIGNAL_DIR, SPLIT_FILE,
};
pub use synth::{synthesize_dataset, SynthConfig};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Sampling rate of the Intel 5300 captures.
pub const DEFAULT_SAMPLE_RATE_HZ: f64 = 100.0;

/// Annotated activity interval in seconds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segment {
    pub start_s: f64,
    pub end_s: f64,
    pub class_id: usize,
}

impl Segment {
    pub fn new(start_s: f64, end_s: f64, class_id: usize) -> Result<Self> {
        if !(start_s.is_finite() && end_s.is_finite()) || start_s < 0.0 || start_s >= end_s {
            return Err(Error::Invalid(format!(
                "segment [{start_s}, {end_s}] must satisfy 0 <= start < end"
            )));
        }
        Ok(Self {
            start_s,
            end_s,
            class_id,
        })
    }

    pub fn duration(&self) -> f64 {
        self.end_s - self.start_s
    }
}

/// One untrimmed recording: amplitude matrix `[T × C]` plus annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct CsiSample {
    pub id: String,
    pub signal: Tensor,
    pub sample_rate_hz: f64,
    pub segments: Vec<Segment>,
}

impl CsiSample {
    pub fn num_stamps(&self) -> usize {
        self.signal.rows()
    }

    pub fn num_channels(&self) -> usize {
        self.signal.cols()
    }

    pub fn duration_s(&self) -> f64 {
        self.num_stamps() as f64 / self.sample_rate_hz
    }

    /// Check the sample invariants: annotations inside the signal and class
    /// ids below `num_classes`.
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        let dur = self.duration_s() + 1e-9;
        for s in &self.segments {
            if s.end_s > dur {
                return Err(Error::Invalid(format!(
                    "sample {}: segment [{}, {}] exceeds signal duration {}",
                    self.id,
                    s.start_s,
                    s.end_s,
                    self.duration_s()
                )));
            }
            if s.class_id >= num_classes {
                return Err(Error::Invalid(format!(
                    "sample {}: class id {} out of range",
                    self.id, s.class_id
                )));
            }
        }
        Ok(())
    }
}

/// Per-class duration statistics (seconds) used to calibrate the generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassStat {
    pub name: String,
    pub avg_s: f64,
    pub max_s: f64,
    pub min_s: f64,
}

impl ClassStat {
    pub fn new(name: &str, avg_s: f64, max_s: f64, min_s: f64) -> Self {
        Self {
            name: name.to_string(),
            avg_s,
            max_s,
            min_s,
        }
    }
}

/// The seven recorded activities with their average, maximum and minimum
/// durations in seconds.
pub fn default_class_stats() -> Vec<ClassStat> {
    vec![
        ClassStat::new("walk", 16.0, 30.0, 10.0),
        ClassStat::new("run", 17.0, 25.0, 5.0),
        ClassStat::new("jump", 13.0, 20.0, 5.0),
        ClassStat::new("wave", 18.0, 30.0, 10.0),
        ClassStat::new("fall", 13.0, 25.0, 5.0),
        ClassStat::new("sit", 13.0, 40.0, 5.0),
        ClassStat::new("stand", 11.0, 20.0, 5.0),
    ]
}

/// Disjoint train/test partition of sample ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train: Vec<String>,
    pub test: Vec<String>,
}

impl DatasetSplit {
    pub const TRAIN_FRACTION: f64 = 0.7;

    /// Seeded shuffle of `ids`, the first `round(0.7 n)` going to train.
    pub fn new(ids: &[String], seed: u64) -> Self {
        Self::with_fraction(ids, seed, Self::TRAIN_FRACTION)
    }

    pub fn with_fraction(ids: &[String], seed: u64, train_fraction: f64) -> Self {
        let mut order: Vec<String> = ids.to_vec();
        order.sort();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_train = ((ids.len() as f64) * train_fraction).round() as usize;
        let test = order.split_off(n_train.min(order.len()));
        let mut train = order;
        train.sort();
        let mut test = test;
        test.sort();
        Self { train, test }
    }

    pub fn contains_train(&self, id: &str) -> bool {
        self.train.iter().any(|t| t == id)
    }
}

/// Class vocabulary plus samples, optionally with a split manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub classes: Vec<String>,
    pub samples: Vec<CsiSample>,
    pub split: Option<DatasetSplit>,
}

impl Dataset {
    pub fn class_id(&self, name: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == name)
    }

    pub fn sample(&self, id: &str) -> Option<&CsiSample> {
        self.samples.iter().find(|s| s.id == id)
    }

    /// Samples belonging to the requested part of the split; all samples
    /// when no split manifest is present.
    pub fn subset(&self, train: bool) -> Vec<&CsiSample> {
        match &self.split {
            None => self.samples.iter().collect(),
            Some(split) => {
                let ids = if train { &split.train } else { &split.test };
                self.samples
                    .iter()
                    .filter(|s| ids.iter().any(|i| *i == s.id))
                    .collect()
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn segment_rejects_inverted_bounds() {
        assert!(Segment::new(1.0, 1.0, 0).is_err());
        assert!(Segment::new(-0.1, 1.0, 0).is_err());
        assert!(Segment::new(0.0, 0.01, 3).is_ok());
    }

    #[test]
    fn split_is_deterministic_disjoint_and_complete() {
        let ids: Vec<String> = (0..20).map(|i| format!("s{i:03}")).collect();
        let a = DatasetSplit::new(&ids, 9);
        let b = DatasetSplit::new(&ids, 9);
        assert_eq!(a, b);
        assert_eq!(a.train.len(), 14);
        assert_eq!(a.test.len(), 6);
        let mut all: Vec<String> = a.train.iter().chain(&a.test).cloned().collect();
        all.sort();
        assert_eq!(all, ids);
        assert!(a.train.iter().all(|t| !a.test.contains(t)));
    }

    #[test]
    fn default_stats_are_ordered() {
        let stats = default_class_stats();
        assert_eq!(stats.len(), 7);
        for s in &stats {
            assert!(s.min_s <= s.avg_s && s.avg_s <= s.max_s, "{s:?}");
        }
        assert_eq!(stats[5], ClassStat::new("sit", 13.0, 40.0, 5.0));
    }
}
