//! Mini-batch training with Adam, a tab-separated step log, periodic
//! checkpoints and resumption.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::checkpoint::Checkpoint;
use crate::data::{slice_clips, CsiSample};
use crate::error::{Error, Result};
use crate::head::{assign_targets, total_loss, AssignedTargets, LossConfig};
use crate::model::{InputNorm, Model};
use crate::optim::{sgd_adam_step, AdamConfig, AdamState};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Overrides `epochs` when set.
    pub max_steps: Option<usize>,
    pub checkpoint_every: usize,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 4e-5,
            weight_decay: 1e-3,
            batch_size: 2,
            epochs: 40,
            max_steps: None,
            checkpoint_every: 100,
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.weight_decay < 0.0 || self.batch_size == 0 {
            return Err(Error::Config(
                "lr must be > 0, weight_decay >= 0 and batch_size >= 1".into(),
            ));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::Config("checkpoint_every must be >= 1".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }
}

/// A normalized clip with its precomputed targets.
#[derive(Debug, Clone)]
pub struct TrainClip {
    pub signal: Tensor,
    pub targets: AssignedTargets,
}

/// Slice normalized samples into clips and assign targets.
pub fn prepare_clips(
    model: &Model,
    norm: &InputNorm,
    samples: &[&CsiSample],
    clip_len: usize,
    stride_fraction: f64,
) -> Result<Vec<TrainClip>> {
    let specs = model.cfg.level_specs(clip_len);
    let mut out = Vec::new();
    for s in samples {
        let normed = norm.apply_sample(s)?;
        for clip in slice_clips(&normed, clip_len, stride_fraction)? {
            let targets = assign_targets(&clip.segments, &specs, clip.sample_rate_hz);
            out.push(TrainClip {
                signal: clip.signal,
                targets,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub loss: f64,
    pub cls: f64,
    pub loc: f64,
    pub positives: usize,
}

impl StepRecord {
    pub fn tsv(&self) -> String {
        format!(
            "{}\t{:.6}\t{:.6}\t{:.6}\t{}",
            self.step, self.loss, self.cls, self.loc, self.positives
        )
    }
}

pub const LOG_HEADER: &str = "step\tloss\tcls\tloc\tpositives";

/// Loss and parameter gradients of one clip.
fn clip_gradients(model: &Model, clip: &TrainClip, loss_cfg: &LossConfig) -> Result<(StepRecord, Vec<Vec<f64>>)> {
    let mut tape = Tape::new();
    let p = tape.bind(&model.params);
    let x = tape.constant(clip.signal.clone());
    let outs = model.forward(&mut tape, &p, x)?;
    let parts = total_loss(&mut tape, &outs, &clip.targets, loss_cfg)?;
    let loss = tape.value(parts.total).item();
    let grads = tape.backward(parts.total)?;
    let g = model
        .params
        .tensors()
        .iter()
        .zip(&p)
        .map(|(t, &v)| grads.get_or_zeros(v, t.numel()))
        .collect();
    Ok((
        StepRecord {
            step: 0,
            loss,
            cls: parts.cls,
            loc: parts.loc,
            positives: parts.positives,
        },
        g,
    ))
}

/// Gradients of several clips, evaluated on up to `jobs` threads. Results
/// come back in clip order so the merge is deterministic.
fn batch_gradients(
    model: &Model,
    clips: &[&TrainClip],
    loss_cfg: &LossConfig,
    jobs: usize,
) -> Vec<Result<(StepRecord, Vec<Vec<f64>>)>> {
    if jobs <= 1 || clips.len() <= 1 {
        return clips.iter().map(|c| clip_gradients(model, c, loss_cfg)).collect();
    }
    let chunk = clips.len().div_ceil(jobs);
    std::thread::scope(|scope| {
        let handles: Vec<_> = clips
            .chunks(chunk)
            .map(|part| {
                scope.spawn(move || {
                    part.iter()
                        .map(|c| clip_gradients(model, c, loss_cfg))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("training worker panicked"))
            .collect()
    })
}

/// Where training writes its artifacts.
#[derive(Debug, Clone)]
pub struct TrainPaths {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
}

impl TrainPaths {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            checkpoint: dir.join("model.ckpt"),
            log: dir.join("train_log.tsv"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub steps: u64,
    pub last: Option<StepRecord>,
}

pub struct Trainer<'a> {
    pub model: &'a mut Model,
    pub norm: InputNorm,
    pub cfg: TrainConfig,
    pub seed: u64,
    pub jobs: usize,
    pub state: AdamState,
}

impl<'a> Trainer<'a> {
    pub fn new(model: &'a mut Model, norm: InputNorm, cfg: TrainConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let state = AdamState::new(&model.params);
        Ok(Self {
            model,
            norm,
            cfg,
            seed,
            jobs: 1,
            state,
        })
    }

    /// Continue from a checkpoint: parameters, optimizer moments and step.
    pub fn resume_from(&mut self, ck: &Checkpoint) -> Result<()> {
        ck.restore_into(&mut self.model.params)?;
        if let Some(opt) = &ck.optimizer {
            self.state = opt.clone();
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            params: self.model.params.clone(),
            buffers: self.norm.buffers(),
            optimizer: Some(self.state.clone()),
        }
    }

    fn total_steps(&self, steps_per_epoch: usize) -> u64 {
        match self.cfg.max_steps {
            Some(s) => s as u64,
            None => (self.cfg.epochs * steps_per_epoch) as u64,
        }
    }

    /// Clip order of `epoch`; a pure function of the seed so a resumed run
    /// sees the same batches.
    fn epoch_order(&self, epoch: u64, n: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x5eed_0000_0000);
        rng.set_stream(epoch);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        order
    }

    /// Run until the configured number of steps. Every step appends a log
    /// line; checkpoints are written every `checkpoint_every` steps and at
    /// the end. A non-finite loss or gradient stops training after saving
    /// the last good parameters.
    pub fn run(&mut self, clips: &[TrainClip], paths: Option<&TrainPaths>) -> Result<TrainOutcome> {
        if clips.is_empty() {
            return Err(Error::Invalid("no training clips".into()));
        }
        let bs = self.cfg.batch_size;
        let steps_per_epoch = clips.len().div_ceil(bs);
        let total = self.total_steps(steps_per_epoch);
        let mut log = match paths {
            Some(p) => Some(open_log(&p.log, self.state.step)?),
            None => None,
        };
        let mut last = None;
        while self.state.step < total {
            let step = self.state.step;
            let epoch = step / steps_per_epoch as u64;
            let k = (step % steps_per_epoch as u64) as usize;
            let order = self.epoch_order(epoch, clips.len());
            let batch: Vec<&TrainClip> = order[k * bs..((k + 1) * bs).min(order.len())]
                .iter()
                .map(|&i| &clips[i])
                .collect();
            let inv = 1.0 / batch.len() as f64;
            let mut rec = StepRecord {
                step: step + 1,
                loss: 0.0,
                cls: 0.0,
                loc: 0.0,
                positives: 0,
            };
            self.model.params.zero_grad();
            for res in batch_gradients(self.model, &batch, &self.cfg.loss, self.jobs) {
                let (r, grads) = res?;
                rec.loss += r.loss * inv;
                rec.cls += r.cls * inv;
                rec.loc += r.loc * inv;
                rec.positives += r.positives;
                for (t, g) in self.model.params.tensors_mut().iter_mut().zip(grads) {
                    let n = t.numel();
                    let acc = t.grad.get_or_insert_with(|| vec![0.0; n]);
                    for (a, v) in acc.iter_mut().zip(g) {
                        *a += v * inv;
                    }
                }
            }
            let stepped = if rec.loss.is_finite() {
                sgd_adam_step(&mut self.model.params, &self.cfg.adam(), &mut self.state)
            } else {
                Err(Error::NonFinite(format!("loss {} at step {}", rec.loss, step + 1)))
            };
            if let Err(e) = stepped {
                self.model.params.zero_grad();
                if let Some(p) = paths {
                    self.checkpoint().save(&p.checkpoint)?;
                    log::error!(
                        "training aborted at step {}; last good parameters saved to {}",
                        step + 1,
                        p.checkpoint.display()
                    );
                }
                return Err(e);
            }
            if let Some(w) = log.as_mut() {
                writeln!(w, "{}", rec.tsv()).map_err(|e| Error::io(&paths.unwrap().log, e))?;
            }
            log::debug!("{}", rec.tsv());
            last = Some(rec);
            if let Some(p) = paths {
                if self.state.step % self.cfg.checkpoint_every as u64 == 0 {
                    self.checkpoint().save(&p.checkpoint)?;
                }
            }
        }
        if let Some(p) = paths {
            if let Some(w) = log.as_mut() {
                w.flush().map_err(|e| Error::io(&p.log, e))?;
            }
            self.checkpoint().save(&p.checkpoint)?;
        }
        Ok(TrainOutcome {
            steps: self.state.step,
            last,
        })
    }
}

fn open_log(path: &Path, step: u64) -> Result<BufWriter<File>> {
    let fresh = step == 0 || !path.exists();
    let file = if fresh {
        File::create(path)
    } else {
        OpenOptions::new().append(true).open(path)
    }
    .map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    if fresh {
        writeln!(w, "{LOG_HEADER}").map_err(|e| Error::io(path, e))?;
    }
    Ok(w)
}
