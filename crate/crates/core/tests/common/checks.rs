//! Oracle comparisons and analytic invariants as measured values, shared by
//! the per-topic tests and the acceptance runner.

use csitad_core::autograd::{Tape, WindowReduce};
use csitad_core::data::{synthesize_dataset, ClassStat, SynthConfig};
use csitad_core::encoders::{contranorm, lsre_aggregate, sma_head, AttentionKind, SignedMaskAttention, SmaHeadVars};
use csitad_core::eval::{average_precision, soft_nms, Annotation, Prediction};
use csitad_core::freq::{band_split, fft_forward, fft_inverse};
use csitad_core::head::{diou_loss_1d, Detection};
use csitad_core::Tensor;
use rand::Rng;

use super::*;

pub const INSTANCES: u64 = 6;

/// One measured quantity against its allowed bound.
#[derive(Debug, Clone)]
pub struct Check {
    pub name: &'static str,
    pub instances: usize,
    pub value: f64,
    pub tol: f64,
}

impl Check {
    fn new(name: &'static str, instances: usize, value: f64, tol: f64) -> Self {
        Self {
            name,
            instances,
            value,
            tol,
        }
    }

    pub fn passed(&self) -> bool {
        self.value <= self.tol
    }
}

fn flat(m: &Mat) -> Vec<f64> {
    m.iter().flatten().copied().collect()
}

fn sma_vars(tape: &mut Tape, w: &[Tensor], wm: &Tensor) -> SmaHeadVars {
    SmaHeadVars {
        wq: tape.constant(w[0].clone()),
        wk: tape.constant(w[1].clone()),
        wv: tape.constant(w[2].clone()),
        wm: tape.constant(wm.clone()),
    }
}

pub fn sma_head_error() -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..INSTANCES {
        let mut r = rng(seed);
        let (t, dk) = (5 + seed as usize, 3 + (seed as usize % 3));
        let x = rand_tensor(&mut r, vec![t, dk], 1.5);
        let w: Vec<Tensor> = (0..3).map(|_| rand_tensor(&mut r, vec![dk, dk], 1.0)).collect();
        let wm = rand_tensor(&mut r, vec![dk, 1], 1.0);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let vars = sma_vars(&mut tape, &w, &wm);
        let got = sma_head(&mut tape, xv, vars).unwrap();
        let (want, mask) = oracle_sma(&rows(&x), &rows(&w[0]), &rows(&w[1]), &rows(&w[2]), &rows(&wm));
        worst = worst
            .max(max_abs_diff(tape.value(got.out).data(), &flat(&want)))
            .max(max_abs_diff(tape.value(got.mask).data(), &flat(&mask)));
    }
    worst
}

pub fn multi_head_sma_error() -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..INSTANCES {
        let (d, heads, t) = (8, 2, 9);
        let (p, sma) = params_of(seed, |b| SignedMaskAttention::new(b, d, heads));
        let x = rand_tensor(&mut rng(100 + seed), vec![t, d], 1.0);
        let mut tape = Tape::new();
        let pv = tape.bind(&p);
        let xv = tape.constant(x.clone());
        let got = sma.forward(&mut tape, &pv, xv, AttentionKind::SignedMask).unwrap();
        let xr = rows(&x);
        let dk = d / heads;
        let mut want = vec![vec![0.0; d]; t];
        for h in 0..heads {
            let xs: Mat = xr.iter().map(|row| row[h * dk..(h + 1) * dk].to_vec()).collect();
            let g = |n: &str| rows(p.by_name(&format!("head{h}.{n}")).unwrap());
            let (o, _) = oracle_sma(&xs, &g("wq"), &g("wk"), &g("wv"), &g("wm"));
            for i in 0..t {
                want[i][h * dk..(h + 1) * dk].copy_from_slice(&o[i]);
            }
        }
        worst = worst.max(max_abs_diff(tape.value(got).data(), &flat(&want)));
    }
    worst
}

pub fn cross_attention_error() -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..INSTANCES {
        let heads = 1 + seed as usize % 2;
        let (d, t) = (4 * heads, 6 + seed as usize);
        let (p, ca) = cross_attention_params(seed, d, heads);
        let mut r = rng(200 + seed);
        let a = rand_tensor(&mut r, vec![t, d], 1.0);
        let b = rand_tensor(&mut r, vec![t, d], 1.0);
        let mut tape = Tape::new();
        let pv = tape.bind(&p);
        let (av, bv) = (tape.constant(a.clone()), tape.constant(b.clone()));
        let got = ca.forward(&mut tape, &pv, av, bv).unwrap();
        let l = |n: &str| LinearW::from_params(&p, n);
        let want = oracle_cross_attention(&rows(&a), &rows(&b), &l("q"), &l("k"), &l("v"), &l("o"), heads);
        worst = worst.max(max_abs_diff(tape.value(got).data(), &flat(&want)));
    }
    worst
}

pub fn contranorm_error() -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..INSTANCES {
        let mut r = rng(300 + seed);
        let fc = rand_tensor(&mut r, vec![7 + seed as usize, 5], 1.0);
        let tau = r.random_range(0.05..1.0);
        let mut tape = Tape::new();
        let v = tape.constant(fc.clone());
        let got = contranorm(&mut tape, v, tau).unwrap();
        worst = worst.max(max_abs_diff(tape.value(got).data(), &flat(&oracle_contranorm(&rows(&fc), tau))));
    }
    worst
}

pub const REDUCTIONS: [WindowReduce; 4] = [WindowReduce::Range, WindowReduce::Max, WindowReduce::Min, WindowReduce::Mean];

pub fn lsre_error() -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..INSTANCES {
        let level = 1 + seed as usize % 4;
        let f0 = rand_tensor(&mut rng(400 + seed), vec![64, 3], 2.0);
        for reduce in REDUCTIONS {
            let mut tape = Tape::new();
            let v = tape.constant(f0.clone());
            let got = lsre_aggregate(&mut tape, v, level, reduce).unwrap();
            if tape.shape(got) != [64 >> level, 3] {
                return f64::INFINITY;
            }
            let want = oracle_lsre(&rows(&f0), level, reduce);
            worst = worst.max(max_abs_diff(tape.value(got).data(), &flat(&want)));
        }
    }
    worst
}

pub fn random_detections(seed: u64, n: usize) -> Vec<Detection> {
    let mut r = rng(seed);
    (0..n)
        .map(|_| {
            let s = r.random_range(0.0..30.0);
            Detection {
                class_id: r.random_range(0..3),
                start_s: s,
                end_s: s + r.random_range(0.5..8.0),
                // Coarse grid so equal scores occur and tie-breaking is exercised.
                score: (r.random_range(1..=40) as f64) / 40.0,
                level: 1,
                instant: 0,
            }
        })
        .collect()
}

/// Largest score difference; infinite when the kept set or order differs.
pub fn soft_nms_error() -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..INSTANCES {
        let dets = random_detections(500 + seed, 50);
        let got = soft_nms(&dets, 0.95, 0.01);
        let want = oracle_soft_nms(&dets, 0.95, 0.01);
        if got.len() != want.len() {
            return f64::INFINITY;
        }
        for (g, w) in got.iter().zip(&want) {
            if (g.class_id, g.start_s, g.end_s) != (w.class_id, w.start_s, w.end_s) {
                return f64::INFINITY;
            }
            worst = worst.max((g.score - w.score).abs());
        }
    }
    worst
}

pub fn average_precision_error() -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..INSTANCES {
        let mut r = rng(600 + seed);
        let ids = ["a", "b"];
        let gts: Vec<Annotation> = (0..4)
            .map(|i| {
                let s = r.random_range(0.0..20.0);
                Annotation {
                    sample_id: ids[i % 2].into(),
                    class_id: r.random_range(0..2),
                    start_s: s,
                    end_s: s + r.random_range(1.0..6.0),
                }
            })
            .collect();
        let n = r.random_range(1..=6);
        let preds: Vec<Prediction> = (0..n)
            .map(|_| {
                let g = &gts[r.random_range(0..gts.len())];
                let jitter = r.random_range(-1.5..1.5);
                Prediction {
                    sample_id: g.sample_id.clone(),
                    class_id: if r.random_bool(0.8) { g.class_id } else { 1 - g.class_id },
                    start_s: (g.start_s + jitter).max(0.0),
                    end_s: g.end_s + r.random_range(-1.0..1.0),
                    score: r.random_range(0.0..1.0),
                }
            })
            .filter(|p| p.end_s > p.start_s)
            .collect();
        for class in 0..2 {
            for th in [0.3, 0.5, 0.7] {
                match (average_precision(&preds, &gts, class, th), oracle_ap(&preds, &gts, class, th)) {
                    (Some(g), Some(w)) => worst = worst.max((g - w).abs()),
                    (None, None) => {}
                    _ => return f64::INFINITY,
                }
            }
        }
    }
    worst
}

pub fn oracle_checks() -> Vec<Check> {
    let n = INSTANCES as usize;
    vec![
        Check::new("sma_head", n, sma_head_error(), 1e-9),
        Check::new("multi_head_sma", n, multi_head_sma_error(), 1e-9),
        Check::new("cross_attention", n, cross_attention_error(), 1e-9),
        Check::new("contranorm", n, contranorm_error(), 1e-9),
        Check::new("lsre_aggregation", n, lsre_error(), 1e-12),
        Check::new("soft_nms", n, soft_nms_error(), 1e-12),
        Check::new("average_precision", n, average_precision_error(), 1e-12),
    ]
}

const INVARIANT_SEEDS: u64 = 50;

/// How far `|mask|` and `|A|` exceed 1.
fn sma_mask_excess() -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..INVARIANT_SEEDS {
        let mut r = rng(1000 + seed);
        let (t, dk) = (r.random_range(1..12), r.random_range(1..6));
        let x = rand_tensor(&mut r, vec![t, dk], 5.0);
        let w: Vec<Tensor> = (0..3).map(|_| rand_tensor(&mut r, vec![dk, dk], 3.0)).collect();
        let wm = rand_tensor(&mut r, vec![dk, 1], 3.0);
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let vars = sma_vars(&mut tape, &w, &wm);
        let out = sma_head(&mut tape, xv, vars).unwrap();
        for v in [out.mask, out.scores] {
            let m = tape.value(v).data().iter().fold(0.0f64, |a, b| a.max(b.abs()));
            worst = worst.max(m - 1.0);
        }
    }
    worst.max(0.0)
}

fn contranorm_identity_error() -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..INVARIANT_SEEDS {
        let fc = rand_tensor(&mut rng(1100 + seed), vec![1 + seed as usize % 9, 4], 5.0);
        let mut tape = Tape::new();
        let v = tape.constant(fc.clone());
        let out = contranorm(&mut tape, v, 0.0).unwrap();
        worst = worst.max(max_abs_diff(tape.value(out).data(), fc.data()));
    }
    worst
}

/// (most negative Range output, largest change under per-channel offsets)
fn lsre_range_invariants() -> (f64, f64) {
    let (mut neg, mut shift) = (0.0f64, 0.0f64);
    for seed in 0..INVARIANT_SEEDS {
        let mut r = rng(1200 + seed);
        let level = r.random_range(1..5);
        let (t, d) = (r.random_range(1..5) << level, 3);
        let x = rand_tensor(&mut r, vec![t, d], 3.0);
        let offs = rand_vec(&mut r, d, 50.0);
        let moved: Vec<f64> = x.data().iter().enumerate().map(|(i, v)| v + offs[i % d]).collect();
        let mut tape = Tape::new();
        let (a, b) = (tape.constant(x), tape.constant(Tensor::new(vec![t, d], moved).unwrap()));
        let ra = lsre_aggregate(&mut tape, a, level, WindowReduce::Range).unwrap();
        let rb = lsre_aggregate(&mut tape, b, level, WindowReduce::Range).unwrap();
        neg = neg.max(-tape.value(ra).data().iter().fold(0.0f64, |m, &v| m.min(v)));
        shift = shift.max(max_abs_diff(tape.value(ra).data(), tape.value(rb).data()));
    }
    (neg, shift)
}

fn softmax_row_error() -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..INVARIANT_SEEDS {
        let mut r = rng(1300 + seed);
        let (t, d) = (r.random_range(1..12), r.random_range(1..20));
        let mut tape = Tape::new();
        let x = tape.constant(rand_tensor(&mut r, vec![t, d], 30.0));
        let s = tape.softmax(x);
        for i in 0..t {
            let row = tape.value(s).row(i);
            if row.iter().any(|&v| v < 0.0) {
                return f64::INFINITY;
            }
            worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
        }
    }
    worst
}

fn diou_self_error() -> f64 {
    let mut r = rng(1400);
    (0..INVARIANT_SEEDS)
        .map(|_| {
            let s = r.random_range(-100.0..100.0);
            let e = s + r.random_range(0.01..50.0);
            diou_loss_1d((s, e), (s, e)).unwrap().abs()
        })
        .fold(0.0, f64::max)
}

fn relative(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    num / den.max(f64::MIN_POSITIVE)
}

fn fft_round_trip_error() -> f64 {
    let mut worst = 0.0f64;
    for (i, n) in [2, 3, 17, 64, 100, 1000, 2048, 4096, 5000].into_iter().enumerate() {
        let x = rand_vec(&mut rng(1500 + i as u64), n, 10.0);
        worst = worst.max(relative(&fft_inverse(&fft_forward(&x)), &x));
    }
    worst
}

fn band_split_error() -> f64 {
    let cfg = SynthConfig {
        seed: 3,
        num_samples: 3,
        duration_s: 30.0,
        num_channels: 8,
        min_segments: 1,
        max_segments: 3,
        class_stats: vec![ClassStat::new("a", 5.0, 8.0, 3.0), ClassStat::new("b", 5.0, 8.0, 3.0)],
        ..SynthConfig::default()
    };
    let mut worst = 0.0f64;
    for s in synthesize_dataset(&cfg).unwrap() {
        let split = band_split(&s).unwrap();
        let c = s.num_channels();
        let mut centered = s.signal.data().to_vec();
        for ch in 0..c {
            let mean = centered.iter().skip(ch).step_by(c).sum::<f64>() / s.num_stamps() as f64;
            centered.iter_mut().skip(ch).step_by(c).for_each(|v| *v -= mean);
        }
        let sum: Vec<f64> = split.low.data().iter().zip(split.high.data()).map(|(a, b)| a + b).collect();
        worst = worst.max(relative(&sum, &centered));
    }
    worst
}

pub fn invariant_checks() -> Vec<Check> {
    let n = INVARIANT_SEEDS as usize;
    let (neg, shift) = lsre_range_invariants();
    vec![
        Check::new("sma_mask_bounded", n, sma_mask_excess(), 0.0),
        Check::new("contranorm_tau0_identity", n, contranorm_identity_error(), 0.0),
        Check::new("lsre_range_non_negative", n, neg, 0.0),
        Check::new("lsre_range_offset_invariant", n, shift, 1e-9),
        Check::new("softmax_rows_sum_to_one", n, softmax_row_error(), 1e-12),
        Check::new("diou_self_zero", n, diou_self_error(), 0.0),
        Check::new("fft_round_trip", 9, fft_round_trip_error(), 1e-9),
        Check::new("band_split_reconstruction", 3, band_split_error(), 1e-8),
    ]
}
