//! Run configuration and the command implementations behind the CLI.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{read_dataset, synthesize_dataset, write_dataset, CsiSample, Dataset, DatasetSplit, SynthConfig};
use crate::error::{Error, Result};
use crate::eval::{evaluate, fp_profile, read_predictions, write_predictions, Annotation, EvalReport, FpProfile, Prediction};
use crate::freq::band_split;
use crate::inference::{detect_samples, ClipConfig, InferenceConfig};
use crate::model::{InputNorm, Model, ModelConfig};
use crate::train::{prepare_clips, TrainConfig, TrainOutcome, TrainPaths, Trainer};

pub const CONFIG_FILE: &str = "config.toml";
pub const CUTOFF_REPORT: &str = "cutoffs.tsv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub synth: SynthConfig,
    pub clip: ClipConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub inference: InferenceConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            synth: SynthConfig::default(),
            clip: ClipConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            inference: InferenceConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.synth_config().validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.inference.validate()?;
        let m = self.model.length_multiple();
        if self.clip.len == 0 || self.clip.len % m != 0 {
            return Err(Error::Config(format!(
                "clip.len {} must be a positive multiple of {m}",
                self.clip.len
            )));
        }
        if !(self.clip.stride > 0.0 && self.clip.stride <= 1.0) {
            return Err(Error::Config("clip.stride must lie in (0, 1]".into()));
        }
        Ok(())
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            seed: self.seed,
            ..self.synth.clone()
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Load `path` (or the defaults), then apply `key=value` overrides with
    /// dotted keys, e.g. `train.lr=1e-3`. Values are parsed as TOML and fall
    /// back to plain strings.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                toml::from_str::<toml::Table>(&text).map_err(|e| Error::parse(p, 0, e.to_string()))?
            }
            None => toml::Table::new(),
        };
        for ov in overrides {
            apply_override(&mut table, ov)?;
        }
        let cfg: Self = toml::Table::try_into(table).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply_ablations(&mut self, names: &[String]) -> Result<()> {
        for n in names {
            self.model.apply_ablation(n)?;
        }
        self.model.validate()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_toml()?).map_err(|e| Error::io(path, e))
    }
}

fn apply_override(table: &mut toml::Table, ov: &str) -> Result<()> {
    let (key, raw) = ov
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{ov}` is not key=value")))?;
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    let (last, parents) = parts.split_last().expect("split yields at least one part");
    let mut cur = table;
    for p in parents {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{p}` is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

/// Which samples of a dataset a command operates on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitSel {
    Train,
    Test,
    All,
}

impl SplitSel {
    pub fn samples(self, ds: &Dataset) -> Vec<&CsiSample> {
        match self {
            SplitSel::Train => ds.subset(true),
            SplitSel::Test => ds.subset(false),
            SplitSel::All => ds.samples.iter().collect(),
        }
    }

    pub fn annotations(self, ds: &Dataset) -> Vec<Annotation> {
        Annotation::from_dataset(
            ds,
            match self {
                SplitSel::Train => Some(true),
                SplitSel::Test => Some(false),
                SplitSel::All => None,
            },
        )
    }
}

impl FromStr for SplitSel {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitSel::Train),
            "test" => Ok(SplitSel::Test),
            "all" => Ok(SplitSel::All),
            _ => Err(Error::Config(format!("unknown split `{s}` (train, test, all)"))),
        }
    }
}

fn prepare_output_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?.next().is_some();
        if non_empty && !force {
            return Err(Error::Invalid(format!(
                "output directory {} is not empty (use --force to overwrite)",
                dir.display()
            )));
        }
        if non_empty {
            fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Generate a dataset with its split manifest and effective config.
pub fn cmd_synth(cfg: &RunConfig, out: &Path, force: bool) -> Result<Dataset> {
    cfg.validate()?;
    prepare_output_dir(out, force)?;
    let scfg = cfg.synth_config();
    let samples = synthesize_dataset(&scfg)?;
    let ids: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
    let ds = Dataset {
        classes: scfg.class_names(),
        samples,
        split: Some(DatasetSplit::with_fraction(&ids, cfg.seed, scfg.train_fraction)),
    };
    write_dataset(out, &ds)?;
    cfg.save(&out.join(CONFIG_FILE))?;
    Ok(ds)
}

/// Train on the train split. With `resume`, an existing checkpoint in `out`
/// supplies parameters, normalization and optimizer state, and the step
/// counter continues from it.
pub fn cmd_train(cfg: &RunConfig, data: &Path, out: &Path, resume: bool, jobs: usize) -> Result<TrainOutcome> {
    cfg.validate()?;
    let ds = read_dataset(data)?;
    let train = ds.subset(true);
    if train.is_empty() {
        return Err(Error::Invalid(format!("{}: train split is empty", data.display())));
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let paths = TrainPaths::in_dir(out);
    let in_ch = train[0].num_channels();
    let mut model = Model::new(cfg.model.clone(), in_ch, ds.classes.len(), cfg.seed)?;
    let resumed = if resume && paths.checkpoint.exists() {
        Some(Checkpoint::load(&paths.checkpoint)?)
    } else {
        None
    };
    let norm = match &resumed {
        Some(ck) => norm_from_checkpoint(ck)?,
        None => InputNorm::fit(&train)?,
    };
    let clips = prepare_clips(&model, &norm, &train, cfg.clip.len, cfg.clip.stride)?;
    cfg.save(&out.join(CONFIG_FILE))?;
    let mut trainer = Trainer::new(&mut model, norm, cfg.train.clone(), cfg.seed)?;
    trainer.jobs = jobs.max(1);
    if let Some(ck) = &resumed {
        trainer.resume_from(ck)?;
        log::info!("resuming from step {}", ck.step());
    }
    log::info!("training on {} clips from {} samples", clips.len(), train.len());
    trainer.run(&clips, Some(&paths))
}

fn norm_from_checkpoint(ck: &Checkpoint) -> Result<InputNorm> {
    match (ck.buffer(InputNorm::MEAN_BUFFER), ck.buffer(InputNorm::STD_BUFFER)) {
        (Some(m), Some(s)) => InputNorm::from_buffers(m, s),
        _ => Err(Error::Invalid("checkpoint lacks input normalization buffers".into())),
    }
}

/// Restore a trained model; the architecture comes from `cfg`.
pub fn load_model(cfg: &RunConfig, ckpt: &Path, in_channels: usize, num_classes: usize) -> Result<(Model, InputNorm)> {
    let ck = Checkpoint::load(ckpt)?;
    let norm = norm_from_checkpoint(&ck)?;
    if norm.mean.len() != in_channels {
        return Err(Error::Shape(format!(
            "checkpoint normalizes {} channels, dataset has {in_channels}",
            norm.mean.len()
        )));
    }
    let mut model = Model::new(cfg.model.clone(), in_channels, num_classes, cfg.seed)?;
    ck.restore_into(&mut model.params)?;
    Ok((model, norm))
}

/// Run inference on the selected samples and write the prediction file.
pub fn cmd_detect(
    cfg: &RunConfig,
    data: &Path,
    ckpt: &Path,
    split: SplitSel,
    out: &Path,
    jobs: usize,
) -> Result<Vec<Prediction>> {
    cfg.validate()?;
    let ds = read_dataset(data)?;
    let samples = split.samples(&ds);
    let mut preds = Vec::new();
    if let Some(first) = samples.first() {
        let (model, norm) = load_model(cfg, ckpt, first.num_channels(), ds.classes.len())?;
        let dets = detect_samples(&model, &norm, &samples, &cfg.clip, &cfg.inference, jobs)?;
        for (s, ds) in samples.iter().zip(dets) {
            preds.extend(ds.iter().map(|d| Prediction::from_detection(&s.id, d)));
        }
    }
    write_predictions(out, &preds, &ds.classes)?;
    Ok(preds)
}

/// Score a prediction file against the dataset annotations.
pub fn cmd_eval(preds: &Path, data: &Path, split: SplitSel) -> Result<(EvalReport, Vec<String>)> {
    let ds = read_dataset(data)?;
    let p = read_predictions(preds, &ds.classes)?;
    let report = evaluate(&p, &split.annotations(&ds), ds.classes.len())?;
    Ok((report, ds.classes))
}

pub fn cmd_fp_profile(preds: &Path, data: &Path, split: SplitSel) -> Result<FpProfile> {
    let ds = read_dataset(data)?;
    let p = read_predictions(preds, &ds.classes)?;
    fp_profile(&p, &split.annotations(&ds), ds.classes.len())
}

/// Write `low/` and `high/` band datasets under `out` plus a cutoff report.
pub fn cmd_freq_split(data: &Path, out: &Path, force: bool) -> Result<Vec<(String, f64)>> {
    let ds = read_dataset(data)?;
    prepare_output_dir(out, force)?;
    let mut low = Dataset {
        classes: ds.classes.clone(),
        samples: Vec::with_capacity(ds.samples.len()),
        split: ds.split.clone(),
    };
    let mut high = low.clone();
    let mut cutoffs = Vec::with_capacity(ds.samples.len());
    let mut report = String::from("sample_id\tcutoff_hz\n");
    for s in &ds.samples {
        let split = band_split(s)?;
        writeln!(report, "{}\t{}", s.id, split.cutoff_hz).expect("writing to a String");
        cutoffs.push((s.id.clone(), split.cutoff_hz));
        low.samples.push(CsiSample {
            signal: split.low,
            ..s.clone()
        });
        high.samples.push(CsiSample {
            signal: split.high,
            ..s.clone()
        });
    }
    write_dataset(&out.join("low"), &low)?;
    write_dataset(&out.join("high"), &high)?;
    let path = out.join(CUTOFF_REPORT);
    fs::write(&path, report).map_err(|e| Error::io(&path, e))?;
    Ok(cutoffs)
}
