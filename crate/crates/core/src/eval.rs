//! Post-processing and evaluation: temporal IoU, Gaussian Soft-NMS,
//! all-point interpolated AP / mAP over tIoU thresholds, the false-positive
//! error profile, and the prediction file format.

use std::cmp::Ordering;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::head::Detection;

pub const TIOU_THRESHOLDS: [f64; 5] = [0.3, 0.4, 0.5, 0.6, 0.7];

/// Intersection over union of two intervals; 0 when the union is empty.
pub fn tiou(a: (f64, f64), b: (f64, f64)) -> f64 {
    let inter = (a.1.min(b.1) - a.0.max(b.0)).max(0.0);
    let union = (a.1 - a.0) + (b.1 - b.0) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Descending score, then earlier start, then shorter, then class.
fn rank(a: &Detection, b: &Detection) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.start_s.total_cmp(&b.start_s))
        .then(a.end_s.total_cmp(&b.end_s))
        .then(a.class_id.cmp(&b.class_id))
}

/// Gaussian Soft-NMS applied independently per class.
///
/// Repeatedly keeps the best remaining detection `M` and rescales every
/// other same-class detection by `exp(−tiou(M, b)² / sigma)`; detections
/// whose score drops below `floor` are discarded. The result is sorted by
/// final score.
pub fn soft_nms(dets: &[Detection], sigma: f64, floor: f64) -> Vec<Detection> {
    let mut classes: Vec<usize> = dets.iter().map(|d| d.class_id).collect();
    classes.sort_unstable();
    classes.dedup();
    let mut out = Vec::with_capacity(dets.len());
    for c in classes {
        let mut pool: Vec<Detection> = dets
            .iter()
            .filter(|d| d.class_id == c && d.score >= floor)
            .copied()
            .collect();
        while !pool.is_empty() {
            let best = (0..pool.len())
                .min_by(|&i, &j| rank(&pool[i], &pool[j]))
                .expect("non-empty");
            let m = pool.swap_remove(best);
            for d in pool.iter_mut() {
                let iou = tiou((m.start_s, m.end_s), (d.start_s, d.end_s));
                d.score *= (-(iou * iou) / sigma).exp();
            }
            pool.retain(|d| d.score >= floor);
            out.push(m);
        }
    }
    out.sort_by(rank);
    out
}

/// Scored segment belonging to a sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub sample_id: String,
    pub class_id: usize,
    pub start_s: f64,
    pub end_s: f64,
    pub score: f64,
}

impl Prediction {
    pub fn from_detection(sample_id: &str, d: &Detection) -> Self {
        Self {
            sample_id: sample_id.to_string(),
            class_id: d.class_id,
            start_s: d.start_s,
            end_s: d.end_s,
            score: d.score,
        }
    }

    fn interval(&self) -> (f64, f64) {
        (self.start_s, self.end_s)
    }
}

/// Ground-truth segment belonging to a sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Annotation {
    pub sample_id: String,
    pub class_id: usize,
    pub start_s: f64,
    pub end_s: f64,
}

impl Annotation {
    fn interval(&self) -> (f64, f64) {
        (self.start_s, self.end_s)
    }

    /// Every segment of every sample in `ds`.
    pub fn from_dataset(ds: &Dataset, train: Option<bool>) -> Vec<Self> {
        let samples = match train {
            Some(t) => ds.subset(t),
            None => ds.samples.iter().collect(),
        };
        samples
            .into_iter()
            .flat_map(|s| {
                s.segments.iter().map(|g| Annotation {
                    sample_id: s.id.clone(),
                    class_id: g.class_id,
                    start_s: g.start_s,
                    end_s: g.end_s,
                })
            })
            .collect()
    }
}

fn rank_predictions(a: &Prediction, b: &Prediction) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.sample_id.cmp(&b.sample_id))
        .then(a.start_s.total_cmp(&b.start_s))
        .then(a.end_s.total_cmp(&b.end_s))
        .then(a.class_id.cmp(&b.class_id))
}

fn sorted_predictions(preds: &[Prediction]) -> Vec<&Prediction> {
    let mut v: Vec<&Prediction> = preds.iter().collect();
    v.sort_by(|a, b| rank_predictions(a, b));
    v
}

/// Area under the all-point interpolated precision/recall curve given the
/// TP flags of score-ranked detections and the number of ground truths.
pub fn interpolated_ap(tp: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut prec = Vec::with_capacity(tp.len());
    let mut rec = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (i, &t) in tp.iter().enumerate() {
        if t {
            hits += 1;
        }
        prec.push(hits as f64 / (i + 1) as f64);
        rec.push(hits as f64 / num_gt as f64);
    }
    for i in (0..prec.len().saturating_sub(1)).rev() {
        prec[i] = prec[i].max(prec[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for (p, r) in prec.iter().zip(&rec) {
        ap += (r - prev_r) * p;
        prev_r = *r;
    }
    ap
}

/// AP of one class at one tIoU threshold; `None` when the class has no
/// ground truth.
pub fn average_precision(
    preds: &[Prediction],
    gts: &[Annotation],
    class_id: usize,
    tiou_thresh: f64,
) -> Option<f64> {
    let class_gts: Vec<&Annotation> = gts.iter().filter(|g| g.class_id == class_id).collect();
    if class_gts.is_empty() {
        return None;
    }
    let class_preds: Vec<Prediction> = preds.iter().filter(|p| p.class_id == class_id).cloned().collect();
    let mut matched = vec![false; class_gts.len()];
    let mut tp = Vec::with_capacity(class_preds.len());
    for p in sorted_predictions(&class_preds) {
        let mut best: Option<(f64, usize)> = None;
        for (gi, g) in class_gts.iter().enumerate() {
            if matched[gi] || g.sample_id != p.sample_id {
                continue;
            }
            let iou = tiou(p.interval(), g.interval());
            if iou >= tiou_thresh && best.is_none_or(|(b, _)| iou > b) {
                best = Some((iou, gi));
            }
        }
        match best {
            Some((_, gi)) => {
                matched[gi] = true;
                tp.push(true);
            }
            None => tp.push(false),
        }
    }
    Some(interpolated_ap(&tp, class_gts.len()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub thresholds: Vec<f64>,
    /// `per_class[k][c]`: AP of class `c` at `thresholds[k]`, `None` when
    /// the class has no ground truth.
    pub per_class: Vec<Vec<Option<f64>>>,
    /// mAP per threshold over classes with ground truth.
    pub map: Vec<f64>,
    pub map_avg: f64,
    pub num_gt: usize,
    pub num_predictions: usize,
}

impl EvalReport {
    pub fn map_at(&self, thresh: f64) -> Option<f64> {
        self.thresholds
            .iter()
            .position(|&t| (t - thresh).abs() < 1e-9)
            .map(|i| self.map[i])
    }

    pub fn to_text(&self, classes: &[String]) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "ground truth: {}  predictions: {}", self.num_gt, self.num_predictions);
        let _ = write!(s, "{:<12}", "class");
        for t in &self.thresholds {
            let _ = write!(s, " {:>8}", format!("AP@{t:.1}"));
        }
        s.push('\n');
        for (c, name) in classes.iter().enumerate() {
            let _ = write!(s, "{name:<12}");
            for row in &self.per_class {
                match row.get(c).copied().flatten() {
                    Some(ap) => {
                        let _ = write!(s, " {:>8.4}", ap);
                    }
                    None => {
                        let _ = write!(s, " {:>8}", "n/a");
                    }
                }
            }
            s.push('\n');
        }
        let _ = write!(s, "{:<12}", "mAP");
        for m in &self.map {
            let _ = write!(s, " {m:>8.4}");
        }
        let _ = writeln!(s, "\nmAP avg: {:.4}", self.map_avg);
        s
    }

    /// `key=value` lines for scripts.
    pub fn to_key_values(&self, classes: &[String]) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "num_gt={}", self.num_gt);
        let _ = writeln!(s, "num_predictions={}", self.num_predictions);
        for (k, t) in self.thresholds.iter().enumerate() {
            let _ = writeln!(s, "map@{t:.1}={:.6}", self.map[k]);
            for (c, name) in classes.iter().enumerate() {
                if let Some(ap) = self.per_class[k].get(c).copied().flatten() {
                    let _ = writeln!(s, "ap@{t:.1}/{name}={ap:.6}");
                }
            }
        }
        let _ = writeln!(s, "map_avg={:.6}", self.map_avg);
        s
    }
}

/// AP for every class at every threshold in [`TIOU_THRESHOLDS`].
pub fn evaluate(preds: &[Prediction], gts: &[Annotation], num_classes: usize) -> Result<EvalReport> {
    evaluate_at(preds, gts, num_classes, &TIOU_THRESHOLDS)
}

pub fn evaluate_at(
    preds: &[Prediction],
    gts: &[Annotation],
    num_classes: usize,
    thresholds: &[f64],
) -> Result<EvalReport> {
    if gts.is_empty() {
        return Err(Error::Undefined("evaluation needs at least one ground-truth segment".into()));
    }
    if let Some(g) = gts.iter().find(|g| g.class_id >= num_classes) {
        return Err(Error::Invalid(format!("class id {} out of range", g.class_id)));
    }
    if let Some(p) = preds.iter().find(|p| p.class_id >= num_classes) {
        return Err(Error::Invalid(format!("predicted class id {} out of range", p.class_id)));
    }
    let mut per_class = Vec::with_capacity(thresholds.len());
    let mut map = Vec::with_capacity(thresholds.len());
    for &th in thresholds {
        let row: Vec<Option<f64>> = (0..num_classes)
            .map(|c| average_precision(preds, gts, c, th))
            .collect();
        let present: Vec<f64> = row.iter().flatten().copied().collect();
        map.push(present.iter().sum::<f64>() / present.len() as f64);
        per_class.push(row);
    }
    let map_avg = map.iter().sum::<f64>() / map.len().max(1) as f64;
    Ok(EvalReport {
        thresholds: thresholds.to_vec(),
        per_class,
        map,
        map_avg,
        num_gt: gts.len(),
        num_predictions: preds.len(),
    })
}

/// Outcome of one prediction in the false-positive analysis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FpCategory {
    TruePositive,
    Background,
    Localization,
    WrongLabel,
    Confusion,
    DoubleDetection,
}

impl FpCategory {
    pub const ALL: [FpCategory; 6] = [
        FpCategory::TruePositive,
        FpCategory::Background,
        FpCategory::Localization,
        FpCategory::WrongLabel,
        FpCategory::Confusion,
        FpCategory::DoubleDetection,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FpCategory::TruePositive => "true_positive",
            FpCategory::Background => "background",
            FpCategory::Localization => "localization",
            FpCategory::WrongLabel => "wrong_label",
            FpCategory::Confusion => "confusion",
            FpCategory::DoubleDetection => "double_detection",
        }
    }

    fn index(self) -> usize {
        Self::ALL.iter().position(|&c| c == self).expect("listed")
    }
}

/// IoU boundaries of the error taxonomy.
pub const FP_LOW_IOU: f64 = 0.1;
pub const FP_HIGH_IOU: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct FpProfile {
    /// `fractions[split][category]` in [`FpCategory::ALL`] order.
    pub fractions: Vec<[f64; 6]>,
    pub counts: Vec<[usize; 6]>,
    /// Predictions considered (at most `10 · G`).
    pub considered: usize,
    /// `10 · G` minus the predictions actually available.
    pub missing: usize,
}

impl FpProfile {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("split");
        for c in FpCategory::ALL {
            s.push(',');
            s.push_str(c.name());
        }
        s.push('\n');
        for (k, row) in self.fractions.iter().enumerate() {
            let _ = write!(s, "{}", k + 1);
            for f in row {
                let _ = write!(s, ",{f:.6}");
            }
            s.push('\n');
        }
        s
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "predictions considered: {}  missing from top-10G: {}\n",
            self.considered, self.missing
        );
        let _ = write!(s, "{:<6}", "split");
        for c in FpCategory::ALL {
            let _ = write!(s, " {:>16}", c.name());
        }
        s.push('\n');
        for (k, row) in self.fractions.iter().enumerate() {
            let _ = write!(s, "{:<6}", k + 1);
            for f in row {
                let _ = write!(s, " {f:>16.4}");
            }
            s.push('\n');
        }
        s
    }
}

/// Label every prediction in ranked order (matching state is shared across
/// the ranking).
pub fn classify_predictions(ranked: &[&Prediction], gts: &[Annotation]) -> Vec<FpCategory> {
    let mut matched = vec![false; gts.len()];
    ranked
        .iter()
        .map(|p| {
            let (mut same_best, mut other_best) = (0.0f64, 0.0f64);
            let mut candidate: Option<(f64, usize)> = None;
            let mut same_hit = false;
            for (gi, g) in gts.iter().enumerate() {
                if g.sample_id != p.sample_id {
                    continue;
                }
                let iou = tiou(p.interval(), g.interval());
                if g.class_id == p.class_id {
                    same_best = same_best.max(iou);
                    if iou >= FP_HIGH_IOU {
                        same_hit = true;
                        if !matched[gi] && candidate.is_none_or(|(b, _)| iou > b) {
                            candidate = Some((iou, gi));
                        }
                    }
                } else {
                    other_best = other_best.max(iou);
                }
            }
            if same_best.max(other_best) < FP_LOW_IOU {
                FpCategory::Background
            } else if same_hit {
                match candidate {
                    Some((_, gi)) => {
                        matched[gi] = true;
                        FpCategory::TruePositive
                    }
                    None => FpCategory::DoubleDetection,
                }
            } else if other_best >= FP_HIGH_IOU {
                FpCategory::WrongLabel
            } else if same_best >= FP_LOW_IOU {
                FpCategory::Localization
            } else {
                FpCategory::Confusion
            }
        })
        .collect()
}

/// Error profile of the top-`10 G_j` predictions of every class `j`, pooled,
/// ranked by score and cut into ten equal splits.
pub fn fp_profile(preds: &[Prediction], gts: &[Annotation], num_classes: usize) -> Result<FpProfile> {
    if gts.is_empty() {
        return Err(Error::Undefined("FP profile needs ground truth".into()));
    }
    let mut pooled: Vec<&Prediction> = Vec::new();
    let mut budget = 0;
    for c in 0..num_classes {
        let g = gts.iter().filter(|a| a.class_id == c).count();
        budget += 10 * g;
        let mut mine: Vec<&Prediction> = preds.iter().filter(|p| p.class_id == c).collect();
        mine.sort_by(|a, b| rank_predictions(a, b));
        mine.truncate(10 * g);
        pooled.extend(mine);
    }
    pooled.sort_by(|a, b| rank_predictions(a, b));
    let n = pooled.len();
    if n < 10 {
        return Err(Error::Undefined(format!(
            "FP profile needs at least 10 predictions to form ten splits, got {n}"
        )));
    }
    let cats = classify_predictions(&pooled, gts);
    let mut fractions = Vec::with_capacity(10);
    let mut counts = Vec::with_capacity(10);
    for k in 0..10 {
        let (lo, hi) = (k * n / 10, (k + 1) * n / 10);
        let mut cnt = [0usize; 6];
        for c in &cats[lo..hi] {
            cnt[c.index()] += 1;
        }
        let size = (hi - lo) as f64;
        let mut frac = [0.0; 6];
        for (f, &c) in frac.iter_mut().zip(&cnt) {
            *f = c as f64 / size;
        }
        fractions.push(frac);
        counts.push(cnt);
    }
    Ok(FpProfile {
        fractions,
        counts,
        considered: n,
        missing: budget - n,
    })
}

/// Write `id \t start \t end \t class \t score` lines in the given order.
pub fn write_predictions(path: &Path, preds: &[Prediction], classes: &[String]) -> Result<()> {
    let mut s = String::new();
    for p in preds {
        let name = classes.get(p.class_id).ok_or_else(|| {
            Error::Invalid(format!("prediction class id {} out of range", p.class_id))
        })?;
        let _ = writeln!(s, "{}\t{}\t{}\t{}\t{}", p.sample_id, p.start_s, p.end_s, name, p.score);
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn read_predictions(path: &Path, classes: &[String]) -> Result<Vec<Prediction>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 5 {
            return Err(Error::parse(
                path,
                line_no,
                format!("expected 5 tab-separated fields, found {}", f.len()),
            ));
        }
        let num = |s: &str, what: &str| {
            s.trim()
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::parse(path, line_no, format!("{what} `{s}` is not a finite number")))
        };
        let (start, end, score) = (num(f[1], "start")?, num(f[2], "end")?, num(f[4], "score")?);
        if end <= start {
            return Err(Error::parse(path, line_no, format!("end {end} <= start {start}")));
        }
        let class_id = classes
            .iter()
            .position(|c| c == f[3].trim())
            .ok_or_else(|| Error::parse(path, line_no, format!("unknown class `{}`", f[3])))?;
        out.push(Prediction {
            sample_id: f[0].to_string(),
            class_id,
            start_s: start,
            end_s: end,
            score,
        });
    }
    Ok(out)
}
