//! Spectral analysis of CSI amplitude: FFT, smoothed power spectrum, −6 dB
//! cutoff search, low/high band reconstruction, and the overlap metrics used
//! to compare band-specific detectors.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::data::{CsiSample, Segment};
use crate::error::{Error, Result};
use crate::eval::{tiou, TIOU_THRESHOLDS};
use crate::head::Detection;
use crate::tensor::Tensor;

/// Moving-average width applied before the cutoff search.
pub const SMOOTHING_BINS: usize = 5;

/// Attenuation defining the cutoff, in decibels below the peak.
pub const CUTOFF_DB: f64 = 6.0;

pub fn fft_forward(x: &[f64]) -> Vec<Complex<f64>> {
    let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
    if !buf.is_empty() {
        FftPlanner::new().plan_fft_forward(buf.len()).process(&mut buf);
    }
    buf
}

/// Inverse transform normalized by `1/N`, returning the real part.
pub fn fft_inverse(spectrum: &[Complex<f64>]) -> Vec<f64> {
    let mut buf = spectrum.to_vec();
    let n = buf.len();
    if n == 0 {
        return Vec::new();
    }
    FftPlanner::new().plan_fft_inverse(n).process(&mut buf);
    buf.iter().map(|c| c.re / n as f64).collect()
}

/// One-sided power spectrum (bins `0..=N/2`).
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    pub power: Vec<f64>,
    pub bin_hz: f64,
    pub sample_rate_hz: f64,
}

/// Channel-averaged power spectrum of the mean-removed signal `[T × C]`.
pub fn power_spectrum(signal: &Tensor, sample_rate_hz: f64) -> Result<Spectrum> {
    let (n, c) = (signal.rows(), signal.cols());
    if n < 2 || c == 0 {
        return Err(Error::Invalid(format!(
            "power spectrum needs at least 2 stamps and 1 channel, got {n}x{c}"
        )));
    }
    let mut power = vec![0.0; n / 2 + 1];
    for ch in 0..c {
        let col = centered_column(signal, ch);
        for (p, z) in power.iter_mut().zip(fft_forward(&col)) {
            *p += z.norm_sqr() / c as f64;
        }
    }
    Ok(Spectrum {
        power,
        bin_hz: sample_rate_hz / n as f64,
        sample_rate_hz,
    })
}

fn centered_column(signal: &Tensor, ch: usize) -> Vec<f64> {
    let c = signal.cols();
    let col: Vec<f64> = signal.data().iter().skip(ch).step_by(c).copied().collect();
    let mean = col.iter().sum::<f64>() / col.len() as f64;
    col.into_iter().map(|v| v - mean).collect()
}

/// Centered moving average, truncated at the edges.
pub fn smooth(power: &[f64], width: usize) -> Vec<f64> {
    let half = width / 2;
    (0..power.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(power.len());
            power[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect()
}

/// First frequency above the smoothed peak whose power is at least 6 dB
/// below the peak. Falls back to `sample_rate / 4` when no such bin exists.
pub fn find_cutoff(spectrum: &Spectrum) -> Result<f64> {
    if spectrum.power.is_empty() {
        return Err(Error::Invalid("empty power spectrum".into()));
    }
    let s = smooth(&spectrum.power, SMOOTHING_BINS);
    let peak_bin = s
        .iter()
        .enumerate()
        .fold(0, |best, (i, &v)| if v > s[best] { i } else { best });
    let threshold = s[peak_bin] * 10f64.powf(-CUTOFF_DB / 10.0);
    let nyquist = spectrum.sample_rate_hz / 2.0;
    let found = (peak_bin + 1..s.len()).find(|&i| s[i] <= threshold && s[peak_bin] > 0.0);
    match found {
        // Keep the Nyquist bin on the high side.
        Some(bin) => Ok((bin as f64 * spectrum.bin_hz).min(nyquist - 0.5 * spectrum.bin_hz)),
        None => {
            log::warn!("power spectrum never falls 6 dB below its peak; using sample_rate/4");
            Ok(spectrum.sample_rate_hz / 4.0)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumSplit {
    pub cutoff_hz: f64,
    pub low: Tensor,
    pub high: Tensor,
}

/// Split at the cutoff of the channel-averaged spectrum.
pub fn band_split(sample: &CsiSample) -> Result<SpectrumSplit> {
    let spec = power_spectrum(&sample.signal, sample.sample_rate_hz)?;
    let cutoff = find_cutoff(&spec)?;
    band_split_at(sample, cutoff)
}

/// Per-channel split of the mean-removed signal: bins below `cutoff_hz`
/// (including DC) form the low band, the rest (including Nyquist) the high
/// band.
pub fn band_split_at(sample: &CsiSample, cutoff_hz: f64) -> Result<SpectrumSplit> {
    let (n, c) = (sample.num_stamps(), sample.num_channels());
    let nyquist = sample.sample_rate_hz / 2.0;
    if !(cutoff_hz > 0.0 && cutoff_hz < nyquist) {
        return Err(Error::Invalid(format!(
            "cutoff {cutoff_hz} Hz outside (0, {nyquist}) Hz"
        )));
    }
    if n < 2 {
        return Err(Error::Invalid("band split needs at least 2 stamps".into()));
    }
    let bin_hz = sample.sample_rate_hz / n as f64;
    let mut low = vec![0.0; n * c];
    let mut high = vec![0.0; n * c];
    for ch in 0..c {
        let spec = fft_forward(&centered_column(&sample.signal, ch));
        let (mut lo_spec, mut hi_spec) = (spec.clone(), spec);
        for k in 0..n {
            let f = k.min(n - k) as f64 * bin_hz;
            if f < cutoff_hz {
                hi_spec[k] = Complex::new(0.0, 0.0);
            } else {
                lo_spec[k] = Complex::new(0.0, 0.0);
            }
        }
        for (i, (l, h)) in fft_inverse(&lo_spec).into_iter().zip(fft_inverse(&hi_spec)).enumerate() {
            low[i * c + ch] = l;
            high[i * c + ch] = h;
        }
    }
    Ok(SpectrumSplit {
        cutoff_hz,
        low: Tensor::matrix(n, c, low)?,
        high: Tensor::matrix(n, c, high)?,
    })
}

/// Class-agnostic mean IoU: predictions and ground truths are matched
/// greedily by decreasing IoU, each used at most once; unmatched ground
/// truths contribute 0.
pub fn localization_miou(predictions: &[Detection], gts: &[Segment]) -> Result<f64> {
    if gts.is_empty() {
        return Err(Error::Undefined("mIoU needs at least one ground-truth segment".into()));
    }
    let mut pairs = Vec::new();
    for (gi, g) in gts.iter().enumerate() {
        for (pi, p) in predictions.iter().enumerate() {
            let iou = tiou((p.start_s, p.end_s), (g.start_s, g.end_s));
            if iou > 0.0 {
                pairs.push((iou, gi, pi));
            }
        }
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut gt_used = vec![false; gts.len()];
    let mut pred_used = vec![false; predictions.len()];
    let mut total = 0.0;
    for (iou, gi, pi) in pairs {
        if !gt_used[gi] && !pred_used[pi] {
            gt_used[gi] = true;
            pred_used[pi] = true;
            total += iou;
        }
    }
    Ok(total / gts.len() as f64)
}

/// Fraction of predictions overlapping some same-label ground truth with
/// tIoU at or above each threshold, averaged over thresholds.
pub fn label_precision(predictions: &[Detection], gts: &[Segment], thresholds: &[f64]) -> Result<f64> {
    if predictions.is_empty() {
        return Err(Error::Undefined("label precision needs at least one prediction".into()));
    }
    if thresholds.is_empty() {
        return Err(Error::Config("no tIoU thresholds given".into()));
    }
    let mut acc = 0.0;
    for &th in thresholds {
        let hits = predictions
            .iter()
            .filter(|p| {
                gts.iter().any(|g| {
                    g.class_id == p.class_id && tiou((p.start_s, p.end_s), (g.start_s, g.end_s)) >= th
                })
            })
            .count();
        acc += hits as f64 / predictions.len() as f64;
    }
    Ok(acc / thresholds.len() as f64)
}

/// [`label_precision`] over the standard thresholds 0.3..=0.7.
pub fn label_precision_default(predictions: &[Detection], gts: &[Segment]) -> Result<f64> {
    label_precision(predictions, gts, &TIOU_THRESHOLDS)
}
