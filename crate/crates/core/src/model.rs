//! The full detector: stem, dual pyramids, per-level fusion and the shared
//! head, plus input standardization.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var, WindowReduce};
use crate::data::CsiSample;
use crate::encoders::{AttentionKind, Encoders, Pyramids, Stem, TsseBranches, TsseConfig};
use crate::error::{Error, Result};
use crate::fusion::{fuse_level, FusionKind, FusionLevel};
use crate::head::{Head, HeadOutput, LevelSpec};
use crate::nn::ParamBuilder;
use crate::tensor::{ModuleParams, Tensor};

/// Which pyramids feed the detection levels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum PyramidSelection {
    #[default]
    Both,
    TsseOnly,
    LsreOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub dim: usize,
    pub heads: usize,
    /// Encoder levels built.
    pub levels: usize,
    /// 1-based pyramid levels fed to the head.
    pub detection_levels: Vec<usize>,
    pub tau: f64,
    pub ffn_hidden: usize,
    pub lsre_hidden: usize,
    pub attention: AttentionKind,
    pub tsse_branches: TsseBranches,
    pub pyramids: PyramidSelection,
    pub lsre_reduce: WindowReduce,
    pub fusion: FusionKind,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 16,
            heads: 2,
            levels: 8,
            detection_levels: vec![4, 5, 6, 7],
            tau: 0.1,
            ffn_hidden: 32,
            lsre_hidden: 32,
            attention: AttentionKind::SignedMask,
            tsse_branches: TsseBranches::Both,
            pyramids: PyramidSelection::Both,
            lsre_reduce: WindowReduce::Range,
            fusion: FusionKind::CrossAttention,
        }
    }
}

/// Named single-component swaps for ablation runs.
pub const ABLATIONS: [&str; 9] = [
    "no-transformer",
    "no-conv-pool",
    "lsre-only",
    "tsse-only",
    "lsre-min",
    "lsre-mean",
    "lsre-max",
    "pyramid-add",
    "self-attention",
];

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return bad(format!("dim {} must be a positive multiple of heads {}", self.dim, self.heads));
        }
        if self.levels == 0 || self.levels > 16 {
            return bad(format!("levels {} must lie in 1..=16", self.levels));
        }
        if self.detection_levels.is_empty() {
            return bad("at least one detection level is required".into());
        }
        if self
            .detection_levels
            .windows(2)
            .any(|w| w[1] <= w[0])
            || self.detection_levels.iter().any(|&l| l == 0 || l > self.levels)
        {
            return bad(format!(
                "detection levels {:?} must be increasing and within 1..={}",
                self.detection_levels, self.levels
            ));
        }
        if self.tau < 0.0 || self.ffn_hidden == 0 || self.lsre_hidden == 0 {
            return bad("tau must be >= 0 and hidden widths >= 1".into());
        }
        Ok(())
    }

    /// Apply a named ablation from [`ABLATIONS`].
    pub fn apply_ablation(&mut self, name: &str) -> Result<()> {
        match name {
            "no-transformer" => self.tsse_branches = TsseBranches::PoolOnly,
            "no-conv-pool" => self.tsse_branches = TsseBranches::AttentionOnly,
            "lsre-only" => self.pyramids = PyramidSelection::LsreOnly,
            "tsse-only" => self.pyramids = PyramidSelection::TsseOnly,
            "lsre-min" => self.lsre_reduce = WindowReduce::Min,
            "lsre-mean" => self.lsre_reduce = WindowReduce::Mean,
            "lsre-max" => self.lsre_reduce = WindowReduce::Max,
            "pyramid-add" => self.fusion = FusionKind::Add,
            "self-attention" => self.attention = AttentionKind::SelfAttention,
            other => {
                return Err(Error::Config(format!(
                    "unknown ablation `{other}`; expected one of {}",
                    ABLATIONS.join(", ")
                )))
            }
        }
        Ok(())
    }

    /// Clip lengths must be divisible by this.
    pub fn length_multiple(&self) -> usize {
        1 << self.levels
    }

    pub fn level_specs(&self, clip_len: usize) -> Vec<LevelSpec> {
        self.detection_levels
            .iter()
            .map(|&l| LevelSpec::new(l, clip_len))
            .collect()
    }
}

/// Per-channel standardization fitted on training signals.
#[derive(Debug, Clone, PartialEq)]
pub struct InputNorm {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl InputNorm {
    pub const MEAN_BUFFER: &'static str = "input.mean";
    pub const STD_BUFFER: &'static str = "input.std";

    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    pub fn fit(samples: &[&CsiSample]) -> Result<Self> {
        let c = samples
            .first()
            .map(|s| s.num_channels())
            .ok_or_else(|| Error::Invalid("cannot fit normalization on zero samples".into()))?;
        let (mut sum, mut sq, mut n) = (vec![0.0; c], vec![0.0; c], 0usize);
        for s in samples {
            if s.num_channels() != c {
                return Err(Error::Shape(format!(
                    "sample {} has {} channels, expected {c}",
                    s.id,
                    s.num_channels()
                )));
            }
            for row in s.signal.data().chunks_exact(c) {
                for (j, &v) in row.iter().enumerate() {
                    sum[j] += v;
                    sq[j] += v * v;
                }
            }
            n += s.num_stamps();
        }
        let n = n.max(1) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| {
                let var = (q / n - m * m).max(0.0);
                if var > 1e-12 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn apply(&self, signal: &Tensor) -> Result<Tensor> {
        let c = signal.cols();
        if c != self.mean.len() {
            return Err(Error::Shape(format!(
                "signal has {c} channels, normalization fitted on {}",
                self.mean.len()
            )));
        }
        let mut out = signal.clone();
        for row in out.data_mut().chunks_exact_mut(c.max(1)) {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / s;
            }
        }
        Ok(out)
    }

    pub fn apply_sample(&self, sample: &CsiSample) -> Result<CsiSample> {
        Ok(CsiSample {
            signal: self.apply(&sample.signal)?,
            ..sample.clone()
        })
    }

    pub fn buffers(&self) -> Vec<(String, Tensor)> {
        let c = self.mean.len();
        vec![
            (Self::MEAN_BUFFER.into(), Tensor::new(vec![c], self.mean.clone()).expect("sized")),
            (Self::STD_BUFFER.into(), Tensor::new(vec![c], self.std.clone()).expect("sized")),
        ]
    }

    pub fn from_buffers(mean: &Tensor, std: &Tensor) -> Result<Self> {
        if mean.numel() != std.numel() {
            return Err(Error::Shape("normalization buffers differ in length".into()));
        }
        Ok(Self {
            mean: mean.data().to_vec(),
            std: std.data().to_vec(),
        })
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub in_channels: usize,
    pub num_classes: usize,
    pub params: ModuleParams,
    stem: Stem,
    encoders: Encoders,
    fusion: Vec<FusionLevel>,
    head: Head,
}

impl Model {
    /// Build with parameters drawn from a generator seeded by `seed`.
    pub fn new(cfg: ModelConfig, in_channels: usize, num_classes: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if in_channels == 0 {
            return Err(Error::Config("model needs at least one input channel".into()));
        }
        let mut params = ModuleParams::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = ParamBuilder::new(&mut params, &mut rng);
        let stem = Stem::new(&mut b.scope("stem"), in_channels, cfg.dim)?;
        let tsse = TsseConfig {
            dim: cfg.dim,
            heads: cfg.heads,
            tau: cfg.tau,
            ffn_hidden: cfg.ffn_hidden,
            attention: cfg.attention,
            branches: cfg.tsse_branches,
        };
        let encoders = Encoders::new(&mut b.scope("enc"), cfg.levels, tsse, cfg.lsre_hidden, cfg.lsre_reduce)?;
        let fusion = cfg
            .detection_levels
            .iter()
            .map(|l| FusionLevel::new(&mut b.scope(&format!("fusion.{l}")), cfg.dim, cfg.heads, cfg.ffn_hidden))
            .collect::<Result<_>>()?;
        let head = Head::new(&mut b.scope("head"), cfg.dim, num_classes, cfg.detection_levels.len())?;
        Ok(Self {
            cfg,
            in_channels,
            num_classes,
            params,
            stem,
            encoders,
            fusion,
            head,
        })
    }

    /// Stem output and both pyramids for every built level.
    pub fn pyramids(&self, tape: &mut Tape, p: &[Var], x: Var) -> Result<(Var, Pyramids)> {
        let (t, c) = (tape.shape(x)[0], tape.shape(x).get(1).copied().unwrap_or(1));
        if c != self.in_channels {
            return Err(Error::Shape(format!(
                "input has {c} channels, model expects {}",
                self.in_channels
            )));
        }
        if t == 0 || t % self.cfg.length_multiple() != 0 {
            return Err(Error::Shape(format!(
                "input length {t} must be a positive multiple of 2^{}",
                self.cfg.levels
            )));
        }
        let f0 = self.stem.forward(tape, p, x)?;
        let sel = self.cfg.pyramids;
        let pyr = self.encoders.build_pyramids(
            tape,
            p,
            f0,
            self.cfg.levels,
            sel != PyramidSelection::LsreOnly,
            sel != PyramidSelection::TsseOnly,
        )?;
        Ok((f0, pyr))
    }

    /// Head outputs of every detection level for one clip `x[T × C]`.
    pub fn forward(&self, tape: &mut Tape, p: &[Var], x: Var) -> Result<Vec<HeadOutput>> {
        let t = tape.shape(x)[0];
        let (_, pyr) = self.pyramids(tape, p, x)?;
        let specs = self.cfg.level_specs(t);
        let mut outs = Vec::with_capacity(specs.len());
        for (i, spec) in specs.into_iter().enumerate() {
            let idx = spec.level - 1;
            let f_det = match self.cfg.pyramids {
                PyramidSelection::TsseOnly => pyr.tsse[idx],
                PyramidSelection::LsreOnly => pyr.lsre[idx],
                PyramidSelection::Both => fuse_level(
                    tape,
                    p,
                    &self.fusion[i],
                    self.cfg.fusion,
                    pyr.tsse[idx],
                    pyr.lsre[idx],
                )?,
            };
            outs.push(self.head.forward(tape, p, f_det, spec, i)?);
        }
        Ok(outs)
    }
}
