//! Seeded generator of untrimmed CSI-like amplitude streams.
//!
//! Background: per channel, a base level plus 5–20 slow random-phase
//! sinusoids (< 2 Hz) and white noise. Each activity class `k` adds a burst
//! of three tones around `5 + 5k` Hz whose envelope has raised-cosine edges
//! and a class-specific AM rate, weighted by a class-specific gain profile
//! across channels.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{default_class_stats, ClassStat, DatasetSplit, CsiSample, Segment, DEFAULT_SAMPLE_RATE_HZ};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAX_LAYOUT_ATTEMPTS: usize = 10_000;
const RAMP_S: f64 = 0.25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    /// Set from the run seed, never from a config file.
    #[serde(skip)]
    pub seed: u64,
    pub num_samples: usize,
    pub duration_s: f64,
    pub num_channels: usize,
    pub sample_rate_hz: f64,
    pub min_segments: usize,
    pub max_segments: usize,
    pub min_gap_s: f64,
    pub noise_std: f64,
    pub activity_amplitude: f64,
    pub class_stats: Vec<ClassStat>,
    /// Share of samples placed in the train split.
    pub train_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            num_samples: 40,
            duration_s: 85.0,
            num_channels: 30,
            sample_rate_hz: DEFAULT_SAMPLE_RATE_HZ,
            min_segments: 2,
            max_segments: 6,
            min_gap_s: 2.0,
            noise_std: 0.3,
            activity_amplitude: 2.0,
            class_stats: default_class_stats(),
            train_fraction: DatasetSplit::TRAIN_FRACTION,
        }
    }
}

impl SynthConfig {
    pub fn class_names(&self) -> Vec<String> {
        self.class_stats.iter().map(|c| c.name.clone()).collect()
    }

    pub fn num_stamps(&self) -> usize {
        (self.duration_s * self.sample_rate_hz).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.class_stats.is_empty() {
            return bad("at least one class is required".into());
        }
        for c in &self.class_stats {
            if !(c.min_s > 0.0 && c.min_s <= c.avg_s && c.avg_s <= c.max_s) {
                return bad(format!(
                    "class `{}`: durations must satisfy 0 < min <= avg <= max",
                    c.name
                ));
            }
        }
        if self.num_channels == 0 || !(self.sample_rate_hz > 0.0) || !(self.duration_s > 0.0) {
            return bad("channels, sample rate and duration must be positive".into());
        }
        if self.min_segments == 0 || self.min_segments > self.max_segments {
            return bad(format!(
                "segment count range [{}, {}] is empty",
                self.min_segments, self.max_segments
            ));
        }
        if !(0.0..=1.0).contains(&self.train_fraction) {
            return bad("train_fraction must lie in [0, 1]".into());
        }
        if self.min_gap_s < 0.0 || self.noise_std < 0.0 {
            return bad("gap and noise must be non-negative".into());
        }
        let shortest = self.class_stats.iter().map(|c| c.min_s).fold(f64::INFINITY, f64::min);
        let need = self.min_segments as f64 * shortest + (self.min_segments + 1) as f64 * self.min_gap_s;
        if need > self.duration_s {
            return Err(Error::Infeasible(format!(
                "{} segments of at least {shortest} s with {} s gaps need {need} s, sample lasts {} s",
                self.min_segments, self.min_gap_s, self.duration_s
            )));
        }
        Ok(())
    }
}

/// Normal distribution truncated to `[lo, hi]`, with its location shifted so
/// that the truncated mean equals the requested average.
#[derive(Debug, Clone, Copy)]
pub(crate) struct TruncatedNormal {
    pub loc: f64,
    pub std: f64,
    pub lo: f64,
    pub hi: f64,
}

impl TruncatedNormal {
    pub fn calibrated(stat: &ClassStat) -> Self {
        let (lo, hi) = (stat.min_s, stat.max_s);
        let std = ((hi - lo) / 4.0).max(1e-6);
        if hi - lo < 1e-9 {
            return Self { loc: lo, std, lo, hi };
        }
        // The truncated mean increases monotonically with the location.
        let (mut a, mut b) = (lo - 4.0 * (hi - lo), hi + 4.0 * (hi - lo));
        for _ in 0..100 {
            let mid = 0.5 * (a + b);
            if truncated_mean(mid, std, lo, hi) < stat.avg_s {
                a = mid;
            } else {
                b = mid;
            }
        }
        Self {
            loc: 0.5 * (a + b),
            std,
            lo,
            hi,
        }
    }

    pub fn sample(&self, rng: &mut impl Rng) -> f64 {
        if self.hi - self.lo < 1e-9 {
            return self.lo;
        }
        let n = Normal::new(self.loc, self.std).expect("positive std");
        loop {
            let x = n.sample(rng);
            if (self.lo..=self.hi).contains(&x) {
                return x;
            }
        }
    }

    #[cfg(test)]
    pub fn mean(&self) -> f64 {
        truncated_mean(self.loc, self.std, self.lo, self.hi)
    }
}

/// Mean of `N(loc, std²)` restricted to `[lo, hi]` by Simpson quadrature.
fn truncated_mean(loc: f64, std: f64, lo: f64, hi: f64) -> f64 {
    const N: usize = 512;
    let h = (hi - lo) / N as f64;
    let (mut mass, mut first) = (0.0, 0.0);
    for i in 0..=N {
        let x = lo + i as f64 * h;
        let w = if i == 0 || i == N {
            1.0
        } else if i % 2 == 1 {
            4.0
        } else {
            2.0
        };
        let z = (x - loc) / std;
        let p = (-0.5 * z * z).exp();
        mass += w * p;
        first += w * p * x;
    }
    if mass <= 0.0 {
        // All mass far outside the interval: the nearer bound dominates.
        return if loc < lo { lo } else { hi };
    }
    first / mass
}

/// Draw a non-overlapping layout of `(start_stamp, end_stamp, class)`.
fn draw_layout(
    cfg: &SynthConfig,
    dists: &[TruncatedNormal],
    rng: &mut ChaCha8Rng,
) -> Result<Vec<(usize, usize, usize)>> {
    let fs = cfg.sample_rate_hz;
    let total = cfg.num_stamps();
    let gap = (cfg.min_gap_s * fs).ceil() as usize;
    for _ in 0..MAX_LAYOUT_ATTEMPTS {
        let n = rng.random_range(cfg.min_segments..=cfg.max_segments);
        let mut segs = Vec::with_capacity(n);
        for _ in 0..n {
            let k = rng.random_range(0..dists.len());
            let len = ((dists[k].sample(rng) * fs).round() as usize).max(1);
            segs.push((k, len));
        }
        let used: usize = segs.iter().map(|s| s.1).sum::<usize>() + (n + 1) * gap;
        if used > total {
            continue;
        }
        // Random split of the slack into n + 1 non-negative gap extensions.
        let slack = total - used;
        let mut cuts: Vec<usize> = (0..n).map(|_| rng.random_range(0..=slack)).collect();
        cuts.sort_unstable();
        let mut out = Vec::with_capacity(n);
        let mut cursor = 0;
        let mut prev_cut = 0;
        for (i, &(k, len)) in segs.iter().enumerate() {
            cursor += gap + (cuts[i] - prev_cut);
            prev_cut = cuts[i];
            out.push((cursor, cursor + len, k));
            cursor += len;
        }
        return Ok(out);
    }
    Err(Error::Infeasible(format!(
        "no layout of {}..={} segments fits {} s after {MAX_LAYOUT_ATTEMPTS} attempts",
        cfg.min_segments, cfg.max_segments, cfg.duration_s
    )))
}

fn render(
    cfg: &SynthConfig,
    layout: &[(usize, usize, usize)],
    rng: &mut ChaCha8Rng,
) -> Tensor {
    let t = cfg.num_stamps();
    let c = cfg.num_channels;
    let fs = cfg.sample_rate_hz;
    let noise = Normal::new(0.0, cfg.noise_std.max(1e-12)).expect("finite std");
    let mut data = vec![0.0; t * c];

    for ch in 0..c {
        let base = rng.random_range(5.0..15.0);
        let k = rng.random_range(5..=20);
        let tones: Vec<(f64, f64, f64)> = (0..k)
            .map(|_| {
                (
                    rng.random_range(0.02..2.0),
                    rng.random_range(0.05..0.4),
                    rng.random_range(0.0..2.0 * PI),
                )
            })
            .collect();
        for i in 0..t {
            let time = i as f64 / fs;
            let mut v = base;
            for &(f, a, p) in &tones {
                v += a * (2.0 * PI * f * time + p).sin();
            }
            data[i * c + ch] = v;
        }
    }

    for &(s, e, k) in layout {
        let kf = k as f64;
        let carriers: Vec<(f64, f64)> = (0..3)
            .map(|_| {
                (
                    5.0 + 5.0 * kf + rng.random_range(-1.0..1.0),
                    rng.random_range(0.0..2.0 * PI),
                )
            })
            .collect();
        let am = 0.4 + 0.2 * kf;
        let gains: Vec<f64> = (0..c)
            .map(|ch| {
                let phase = 2.0 * PI * (kf + 1.0) * ch as f64 / c as f64 + kf;
                (0.6 + 0.4 * phase.cos()) * rng.random_range(0.9..1.1)
            })
            .collect();
        let ramp = (RAMP_S * fs).max(1.0);
        let len = (e - s) as f64;
        for i in s..e {
            let local = (i - s) as f64;
            let edge = local.min(len - 1.0 - local).max(0.0);
            let env_edge = if edge < ramp {
                0.5 - 0.5 * (PI * edge / ramp).cos()
            } else {
                1.0
            };
            let time = local / fs;
            let env = env_edge * (0.75 + 0.25 * (2.0 * PI * am * time).cos());
            let carrier: f64 = carriers
                .iter()
                .map(|&(f, p)| (2.0 * PI * f * time + p).sin())
                .sum::<f64>()
                / 3.0;
            let amp = cfg.activity_amplitude * env * carrier;
            for (ch, g) in gains.iter().enumerate() {
                data[i * c + ch] += amp * g;
            }
        }
    }

    for v in data.iter_mut() {
        if cfg.noise_std > 0.0 {
            *v += noise.sample(rng);
        }
        // Stored as 32-bit floats on disk; keep memory and disk identical.
        *v = *v as f32 as f64;
    }
    Tensor::matrix(t, c, data).expect("sized above")
}

/// Generate `cfg.num_samples` annotated samples, fully determined by the
/// seed. Sample `i` draws from its own stream so samples are independent of
/// how many are requested.
pub fn synthesize_dataset(cfg: &SynthConfig) -> Result<Vec<CsiSample>> {
    cfg.validate()?;
    let dists: Vec<TruncatedNormal> = cfg.class_stats.iter().map(TruncatedNormal::calibrated).collect();
    let fs = cfg.sample_rate_hz;
    (0..cfg.num_samples)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(i as u64);
            let layout = draw_layout(cfg, &dists, &mut rng)?;
            let signal = render(cfg, &layout, &mut rng);
            let segments = layout
                .iter()
                .map(|&(s, e, k)| Segment::new(s as f64 / fs, e as f64 / fs, k))
                .collect::<Result<Vec<_>>>()?;
            Ok(CsiSample {
                id: format!("s{i:04}"),
                signal,
                sample_rate_hz: fs,
                segments,
            })
        })
        .collect()
}
