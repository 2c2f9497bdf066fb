//! Fixed-length clip slicing and re-assembly of clip-level detections.

use crate::data::{CsiSample, Segment};
use crate::error::{Error, Result};
use crate::head::Detection;
use crate::tensor::Tensor;

/// Clip-local fragments shorter than this are dropped from the targets.
pub const MIN_CLIP_SEGMENT_S: f64 = 0.5;

/// Window of a sample, zero-padded to the full clip length.
#[derive(Debug, Clone, PartialEq)]
pub struct Clip {
    pub parent_id: String,
    pub offset_stamps: usize,
    /// Number of leading rows that hold real signal; the rest is padding.
    pub valid_len: usize,
    pub sample_rate_hz: f64,
    pub signal: Tensor,
    /// Annotations intersected with the window, in clip-local seconds.
    pub segments: Vec<Segment>,
}

impl Clip {
    pub fn len(&self) -> usize {
        self.signal.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn offset_s(&self) -> f64 {
        self.offset_stamps as f64 / self.sample_rate_hz
    }

    pub fn duration_s(&self) -> f64 {
        self.len() as f64 / self.sample_rate_hz
    }
}

/// Slice with the default minimum fragment length.
pub fn slice_clips(sample: &CsiSample, clip_len: usize, stride_fraction: f64) -> Result<Vec<Clip>> {
    slice_clips_with(sample, clip_len, stride_fraction, MIN_CLIP_SEGMENT_S)
}

/// Cut `sample` into windows of `clip_len` stamps starting every
/// `round(clip_len · stride_fraction)` stamps, stopping at the first window
/// that reaches the end of the signal.
pub fn slice_clips_with(
    sample: &CsiSample,
    clip_len: usize,
    stride_fraction: f64,
    min_segment_s: f64,
) -> Result<Vec<Clip>> {
    if clip_len == 0 {
        return Err(Error::Config("clip length must be >= 1".into()));
    }
    if !(stride_fraction > 0.0 && stride_fraction <= 1.0) {
        return Err(Error::Config(format!(
            "stride fraction {stride_fraction} must lie in (0, 1]"
        )));
    }
    let t = sample.num_stamps();
    if t == 0 {
        return Err(Error::Invalid(format!("sample {} has an empty signal", sample.id)));
    }
    let c = sample.num_channels();
    let fs = sample.sample_rate_hz;
    let step = ((clip_len as f64 * stride_fraction).round() as usize).max(1);
    let src = sample.signal.data();

    let mut clips = Vec::new();
    let mut offset = 0usize;
    loop {
        let valid = clip_len.min(t - offset);
        let mut data = vec![0.0; clip_len * c];
        data[..valid * c].copy_from_slice(&src[offset * c..(offset + valid) * c]);
        let w0 = offset as f64 / fs;
        let w1 = (offset + clip_len) as f64 / fs;
        let segments = sample
            .segments
            .iter()
            .filter_map(|s| {
                let a = s.start_s.max(w0);
                let b = s.end_s.min(w1);
                (b - a >= min_segment_s).then(|| Segment {
                    start_s: a - w0,
                    end_s: b - w0,
                    class_id: s.class_id,
                })
            })
            .collect();
        clips.push(Clip {
            parent_id: sample.id.clone(),
            offset_stamps: offset,
            valid_len: valid,
            sample_rate_hz: fs,
            signal: Tensor::matrix(clip_len, c, data)?,
            segments,
        });
        if offset + clip_len >= t {
            break;
        }
        offset += step;
    }
    Ok(clips)
}

/// Shift clip-local detections to sample-global time. Overlapping clips may
/// yield duplicates; those are left for Soft-NMS.
pub fn merge_clip_detections(clips: &[(Clip, Vec<Detection>)]) -> Result<Vec<Detection>> {
    let Some((first, _)) = clips.first() else {
        return Ok(Vec::new());
    };
    let mut out = Vec::new();
    for (clip, dets) in clips {
        if clip.parent_id != first.parent_id {
            return Err(Error::Invalid(format!(
                "cannot merge clips of different samples ({} and {})",
                first.parent_id, clip.parent_id
            )));
        }
        let shift = clip.offset_s();
        out.extend(dets.iter().map(|d| Detection {
            start_s: d.start_s + shift,
            end_s: d.end_s + shift,
            ..*d
        }));
    }
    Ok(out)
}
