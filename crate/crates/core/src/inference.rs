//! Clip-wise inference over untrimmed samples.

use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::data::{merge_clip_detections, slice_clips, CsiSample};
use crate::error::{Error, Result};
use crate::eval::soft_nms;
use crate::head::{decode, Detection};
use crate::model::{InputNorm, Model};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceConfig {
    /// Candidates must score strictly above this before Soft-NMS.
    pub score_threshold: f64,
    pub nms_sigma: f64,
    /// Soft-NMS drops detections decayed below this.
    pub nms_floor: f64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            score_threshold: 0.9,
            nms_sigma: 0.95,
            nms_floor: 0.01,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.score_threshold)
            || !(self.nms_sigma > 0.0)
            || !(0.0..1.0).contains(&self.nms_floor)
        {
            return Err(Error::Config(
                "score_threshold and nms_floor must lie in [0, 1), nms_sigma > 0".into(),
            ));
        }
        Ok(())
    }
}

/// Clip slicing shared by training and inference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClipConfig {
    pub len: usize,
    pub stride: f64,
}

impl Default for ClipConfig {
    fn default() -> Self {
        Self {
            len: 4096,
            stride: 0.5,
        }
    }
}

/// Raw detections of one normalized clip signal, in clip-local seconds.
pub fn detect_clip(model: &Model, signal: &crate::tensor::Tensor, sample_rate_hz: f64) -> Result<Vec<Detection>> {
    let mut tape = Tape::new();
    let p = tape.bind(&model.params);
    let x = tape.constant(signal.clone());
    let outs = model.forward(&mut tape, &p, x)?;
    let dur = signal.rows() as f64 / sample_rate_hz;
    let mut dets = Vec::new();
    for o in outs {
        dets.extend(decode(
            tape.value(o.cls_logits),
            tape.value(o.distances),
            o.spec,
            sample_rate_hz,
            dur,
        )?);
    }
    Ok(dets)
}

/// Full pipeline on one raw sample: normalize, slice, decode, threshold,
/// merge clips, Soft-NMS, clamp to the sample and sort by score.
pub fn detect_sample(
    model: &Model,
    norm: &InputNorm,
    sample: &CsiSample,
    clip: &ClipConfig,
    cfg: &InferenceConfig,
) -> Result<Vec<Detection>> {
    let normed = norm.apply_sample(sample)?;
    let clips = slice_clips(&normed, clip.len, clip.stride)?;
    let mut per_clip = Vec::with_capacity(clips.len());
    for c in clips {
        let dets: Vec<Detection> = detect_clip(model, &c.signal, c.sample_rate_hz)?
            .into_iter()
            .filter(|d| d.score > cfg.score_threshold)
            .collect();
        per_clip.push((c, dets));
    }
    let merged = merge_clip_detections(&per_clip)?;
    let dur = sample.duration_s();
    let mut out: Vec<Detection> = soft_nms(&merged, cfg.nms_sigma, cfg.nms_floor)
        .into_iter()
        .filter_map(|mut d| {
            d.start_s = d.start_s.clamp(0.0, dur);
            d.end_s = d.end_s.clamp(0.0, dur);
            (d.end_s > d.start_s).then_some(d)
        })
        .collect();
    out.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.start_s.total_cmp(&b.start_s))
            .then(a.class_id.cmp(&b.class_id))
    });
    Ok(out)
}

/// [`detect_sample`] over many samples on up to `jobs` threads, results in
/// input order.
pub fn detect_samples(
    model: &Model,
    norm: &InputNorm,
    samples: &[&CsiSample],
    clip: &ClipConfig,
    cfg: &InferenceConfig,
    jobs: usize,
) -> Result<Vec<Vec<Detection>>> {
    if jobs <= 1 || samples.len() <= 1 {
        return samples.iter().map(|s| detect_sample(model, norm, s, clip, cfg)).collect();
    }
    let chunk = samples.len().div_ceil(jobs);
    std::thread::scope(|scope| {
        let handles: Vec<_> = samples
            .chunks(chunk)
            .map(|part| {
                scope.spawn(move || {
                    part.iter()
                        .map(|s| detect_sample(model, norm, s, clip, cfg))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("inference worker panicked"))
            .collect()
    })
}
