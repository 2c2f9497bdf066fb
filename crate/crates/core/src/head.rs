//! Anchor-free prediction head, target assignment, decoding and the
//! detection objective (sigmoid focal loss plus 1-D distance-IoU).

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::data::Segment;
use crate::error::{Error, Result};
use crate::kernels::{log_sigmoid, sigmoid};
use crate::nn::{CgrStack, Conv1d, ParamBuilder};
use crate::tensor::{ParamId, Tensor};

/// Initial foreground probability; sets the classification bias.
pub const PRIOR_PROB: f64 = 0.01;

/// Decoded candidate segment with its provenance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub class_id: usize,
    pub start_s: f64,
    pub end_s: f64,
    pub score: f64,
    /// Pyramid level (1-based) and feature index that produced it.
    pub level: usize,
    pub instant: usize,
}

impl Detection {
    pub fn duration(&self) -> f64 {
        self.end_s - self.start_s
    }
}

/// One detection level of the pyramid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LevelSpec {
    /// 1-based pyramid level.
    pub level: usize,
    /// Temporal stride in input stamps (`2^level`).
    pub stride: usize,
    pub len: usize,
}

impl LevelSpec {
    pub fn new(level: usize, clip_len: usize) -> Self {
        let stride = 1usize << level;
        Self {
            level,
            stride,
            len: clip_len / stride,
        }
    }

    /// Centre of feature cell `t` in input stamps.
    pub fn stamp(&self, t: usize) -> f64 {
        (t as f64 + 0.5) * self.stride as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Weight of the localization term.
    pub lambda: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 10.0,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
        }
    }
}

/// Shared classification and localization branches.
#[derive(Debug, Clone)]
pub struct Head {
    pub num_classes: usize,
    cls_tower: CgrStack,
    cls_out: Conv1d,
    reg_tower: CgrStack,
    reg_out: Conv1d,
    /// Learned per-level scale on the two regression outputs.
    scales: Vec<ParamId>,
}

/// Head outputs of one level: logits `[T_l × (C+1)]` (background last) and
/// non-negative boundary distances `[T_l × 2]` in input stamps.
#[derive(Debug, Clone, Copy)]
pub struct HeadOutput {
    pub spec: LevelSpec,
    pub cls_logits: Var,
    pub distances: Var,
}

impl Head {
    pub fn new(b: &mut ParamBuilder, dim: usize, num_classes: usize, num_levels: usize) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::Config("at least one class is required".into()));
        }
        let cls_tower = CgrStack::new(&mut b.scope("cls"), dim, dim, 3)?;
        let cls_out = Conv1d::same(&mut b.scope("cls.out"), dim, num_classes + 1, 3)?;
        // Foreground channels start near the prior, background near 1 - prior.
        let bias = (PRIOR_PROB / (1.0 - PRIOR_PROB)).ln();
        let init = b.params_mut().get_mut(cls_out.bias).data_mut();
        init.fill(bias);
        init[num_classes] = -bias;
        let reg_tower = CgrStack::new(&mut b.scope("reg"), dim, dim, 3)?;
        let reg_out = Conv1d::same(&mut b.scope("reg.out"), dim, 2, 3)?;
        let scales = (0..num_levels)
            .map(|i| b.constant(&format!("scale.{i}"), vec![2], 1.0))
            .collect::<Result<_>>()?;
        Ok(Self {
            num_classes,
            cls_tower,
            cls_out,
            reg_tower,
            reg_out,
            scales,
        })
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &[Var],
        x: Var,
        spec: LevelSpec,
        level_index: usize,
    ) -> Result<HeadOutput> {
        let scale = *self.scales.get(level_index).ok_or_else(|| {
            Error::Config(format!("head has no scale for detection level {level_index}"))
        })?;
        let h = self.cls_tower.forward(tape, p, x)?;
        let cls_logits = self.cls_out.forward(tape, p, h)?;
        let h = self.reg_tower.forward(tape, p, x)?;
        let raw = self.reg_out.forward(tape, p, h)?;
        let scaled = tape.mul_row(raw, p[scale.index()])?;
        let d = tape.relu(scaled);
        let distances = tape.scale(d, spec.stride as f64);
        Ok(HeadOutput {
            spec,
            cls_logits,
            distances,
        })
    }
}

/// Targets of one level: `Some(class)` for positives, `None` for background,
/// and `[d_st, d_et]` in stamps for positives.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelTargets {
    pub spec: LevelSpec,
    pub classes: Vec<Option<usize>>,
    pub distances: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssignedTargets {
    pub levels: Vec<LevelTargets>,
}

impl AssignedTargets {
    pub fn num_positives(&self) -> usize {
        self.levels
            .iter()
            .map(|l| l.classes.iter().filter(|c| c.is_some()).count())
            .sum()
    }
}

/// Regression range `[lo, hi)` of each detection level, in stamps. The
/// boundaries are 0, 4, 8, 16, ... times the finest detection stride and
/// the last level is open-ended.
pub fn regression_ranges(levels: &[LevelSpec]) -> Vec<(f64, f64)> {
    let base = levels.first().map_or(1.0, |l| l.stride as f64);
    (0..levels.len())
        .map(|i| {
            let lo = if i == 0 { 0.0 } else { base * 4.0 * (1u64 << (i - 1)) as f64 };
            let hi = if i + 1 == levels.len() {
                f64::INFINITY
            } else {
                base * 4.0 * (1u64 << i) as f64
            };
            (lo, hi)
        })
        .collect()
}

/// Assign every feature instant to at most one ground-truth segment.
///
/// Instant `t` of a level sits at stamp `(t + 0.5) · stride`. It is positive
/// for a segment containing it when `max(d_st, d_et)` falls in the level's
/// regression range; among several candidates the shortest segment wins,
/// then the earliest start.
pub fn assign_targets(gts: &[Segment], levels: &[LevelSpec], sample_rate_hz: f64) -> AssignedTargets {
    let ranges = regression_ranges(levels);
    let mut order: Vec<&Segment> = gts.iter().collect();
    order.sort_by(|a, b| {
        a.duration()
            .total_cmp(&b.duration())
            .then(a.start_s.total_cmp(&b.start_s))
            .then(a.end_s.total_cmp(&b.end_s))
            .then(a.class_id.cmp(&b.class_id))
    });
    let levels = levels
        .iter()
        .zip(&ranges)
        .map(|(spec, &(lo, hi))| {
            let mut classes = vec![None; spec.len];
            let mut distances = vec![[0.0; 2]; spec.len];
            for t in 0..spec.len {
                let x = spec.stamp(t);
                for g in &order {
                    let ds = x - g.start_s * sample_rate_hz;
                    let de = g.end_s * sample_rate_hz - x;
                    if ds < 0.0 || de < 0.0 {
                        continue;
                    }
                    let m = ds.max(de);
                    if m >= lo && m < hi {
                        classes[t] = Some(g.class_id);
                        distances[t] = [ds, de];
                        break;
                    }
                }
            }
            LevelTargets {
                spec: *spec,
                classes,
                distances,
            }
        })
        .collect();
    AssignedTargets { levels }
}

/// Turn one level's outputs into detections (clip-local seconds).
///
/// Instants whose arg-max over all `C + 1` logits is the background are
/// skipped; the score is the sigmoid of the winning logit.
pub fn decode(
    cls_logits: &Tensor,
    distances: &Tensor,
    spec: LevelSpec,
    sample_rate_hz: f64,
    clip_duration_s: f64,
) -> Result<Vec<Detection>> {
    let (t, k) = (cls_logits.rows(), cls_logits.cols());
    if distances.rows() != t || distances.cols() != 2 || k < 2 {
        return Err(Error::Shape(format!(
            "decode: logits {:?} against distances {:?}",
            cls_logits.shape(),
            distances.shape()
        )));
    }
    let bg = k - 1;
    let mut out = Vec::new();
    for i in 0..t {
        let row = cls_logits.row(i);
        let mut best = 0;
        for c in 1..k {
            if row[c] > row[best] {
                best = c;
            }
        }
        if best == bg {
            continue;
        }
        let x = spec.stamp(i);
        let d = distances.row(i);
        let start = ((x - d[0]) / sample_rate_hz).clamp(0.0, clip_duration_s);
        let end = ((x + d[1]) / sample_rate_hz).clamp(0.0, clip_duration_s);
        if end <= start {
            continue;
        }
        out.push(Detection {
            class_id: best,
            start_s: start,
            end_s: end,
            score: sigmoid(row[best]),
            level: spec.level,
            instant: i,
        });
    }
    Ok(out)
}

/// Sigmoid focal loss summed over every element, with its gradient.
/// `targets[i]` is the positive channel of row `i`.
pub fn focal_loss(logits: &Tensor, targets: &[usize], alpha: f64, gamma: f64) -> Result<(f64, Vec<f64>)> {
    let (t, k) = (logits.rows(), logits.cols());
    if targets.len() != t || targets.iter().any(|&c| c >= k) {
        return Err(Error::Shape(format!(
            "focal_loss: {} targets for {t}x{k} logits",
            targets.len()
        )));
    }
    let mut loss = 0.0;
    let mut grad = vec![0.0; t * k];
    for i in 0..t {
        for c in 0..k {
            let x = logits.data()[i * k + c];
            let p = sigmoid(x);
            let (l, g) = if c == targets[i] {
                let q = 1.0 - p;
                let w = alpha * q.powf(gamma);
                let lp = log_sigmoid(x);
                (-w * lp, w * (gamma * p * lp - q))
            } else {
                let w = (1.0 - alpha) * p.powf(gamma);
                let lq = log_sigmoid(-x);
                (-w * lq, w * (p - gamma * (1.0 - p) * lq))
            };
            loss += l;
            grad[i * k + c] = g;
        }
    }
    Ok((loss, grad))
}

/// 1-D distance-IoU loss `1 − IoU + ρ²/c²` between two intervals.
pub fn diou_loss_1d(pred: (f64, f64), gt: (f64, f64)) -> Result<f64> {
    if !(pred.0 < pred.1 && gt.0 < gt.1) {
        return Err(Error::Invalid(format!(
            "DIoU needs non-degenerate intervals, got {pred:?} and {gt:?}"
        )));
    }
    let inter = (pred.1.min(gt.1) - pred.0.max(gt.0)).max(0.0);
    let union = (pred.1 - pred.0) + (gt.1 - gt.0) - inter;
    let rho = 0.5 * ((pred.0 + pred.1) - (gt.0 + gt.1));
    let c = pred.1.max(gt.1) - pred.0.min(gt.0);
    Ok(1.0 - inter / union + rho * rho / (c * c))
}

/// DIoU between `[−d_st, d_et]` and `[−g_st, g_et]` (both anchored at the
/// same instant) with its gradient with respect to `d`.
pub fn diou_distance(d: [f64; 2], g: [f64; 2]) -> (f64, [f64; 2]) {
    let [a, b] = d;
    let [g1, g2] = g;
    let inter = a.min(g1) + b.min(g2);
    let union = a + b + g1 + g2 - inter;
    let r = (b - a) - (g2 - g1);
    let rho2 = 0.25 * r * r;
    let c = a.max(g1) + b.max(g2);
    let iou = inter / union;
    let loss = 1.0 - iou + rho2 / (c * c);

    let di = [f64::from(u8::from(a < g1)), f64::from(u8::from(b < g2))];
    let dc = [f64::from(u8::from(a >= g1)), f64::from(u8::from(b >= g2))];
    let drho2 = [-0.5 * r, 0.5 * r];
    let mut grad = [0.0; 2];
    for j in 0..2 {
        let du = 1.0 - di[j];
        let diou = (di[j] * union - inter * du) / (union * union);
        grad[j] = -diou + drho2[j] / (c * c) - 2.0 * rho2 * dc[j] / (c * c * c);
    }
    (loss, grad)
}

/// Scalar parts of a detection loss evaluation.
#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub total: Var,
    /// Normalized classification term.
    pub cls: f64,
    /// Normalized localization term (before λ).
    pub loc: f64,
    pub positives: usize,
}

/// `(Σ focal + λ Σ DIoU) / T₊`, with `T₊` replaced by 1 when there are no
/// positives. Focal runs over every instant and every `C + 1` channel; DIoU
/// over positive instants only.
pub fn total_loss(
    tape: &mut Tape,
    outputs: &[HeadOutput],
    targets: &AssignedTargets,
    cfg: &LossConfig,
) -> Result<LossParts> {
    if outputs.len() != targets.levels.len() {
        return Err(Error::Shape(format!(
            "{} output levels against {} target levels",
            outputs.len(),
            targets.levels.len()
        )));
    }
    let positives = targets.num_positives();
    let norm = 1.0 / positives.max(1) as f64;
    let mut terms = Vec::new();
    let (mut cls_sum, mut loc_sum) = (0.0, 0.0);
    for (out, tg) in outputs.iter().zip(&targets.levels) {
        let logits = tape.value(out.cls_logits);
        let bg = logits.cols().saturating_sub(1);
        let labels: Vec<usize> = tg.classes.iter().map(|c| c.unwrap_or(bg)).collect();
        let (fl, fg) = focal_loss(logits, &labels, cfg.focal_alpha, cfg.focal_gamma)?;
        cls_sum += fl;
        let fg = fg.into_iter().map(|g| g * norm).collect();
        terms.push(tape.fused_scalar(out.cls_logits, fl * norm, fg)?);

        if tg.classes.iter().any(Option::is_some) {
            let d = tape.value(out.distances);
            if d.rows() != tg.classes.len() || d.cols() != 2 {
                return Err(Error::Shape(format!(
                    "distances {:?} against {} targets",
                    d.shape(),
                    tg.classes.len()
                )));
            }
            let mut grad = vec![0.0; d.numel()];
            let mut level_loc = 0.0;
            for (i, c) in tg.classes.iter().enumerate() {
                if c.is_none() {
                    continue;
                }
                let row = d.row(i);
                let (l, g) = diou_distance([row[0], row[1]], tg.distances[i]);
                level_loc += l;
                grad[2 * i] = cfg.lambda * norm * g[0];
                grad[2 * i + 1] = cfg.lambda * norm * g[1];
            }
            loc_sum += level_loc;
            terms.push(tape.fused_scalar(out.distances, cfg.lambda * norm * level_loc, grad)?);
        }
    }
    let mut total = terms
        .first()
        .copied()
        .ok_or_else(|| Error::Invalid("total_loss needs at least one level".into()))?;
    for &t in &terms[1..] {
        total = tape.add(total, t)?;
    }
    Ok(LossParts {
        total,
        cls: cls_sum * norm,
        loc: loc_sum * norm,
        positives,
    })
}
