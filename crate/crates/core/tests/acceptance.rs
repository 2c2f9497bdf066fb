//! Acceptance runner: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Criteria run one after another so the timed toy run has the
//! machine to itself.

mod common;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::checks::{invariant_checks, oracle_checks, Check};
use common::*;
use csitad_core::app::{self, RunConfig, SplitSel};
use csitad_core::autograd::Tape;
use csitad_core::data::{synthesize_dataset, SynthConfig};
use csitad_core::eval::{evaluate, fp_profile, Annotation, FpCategory, Prediction, EvalReport};
use csitad_core::model::{Model, ModelConfig};
use csitad_core::train::TrainPaths;
use rand::Rng;

const TOY_MAP_AVG: f64 = 0.85;
const TOY_MAP_50: f64 = 0.9;
const TOY_MAX_STEPS: u64 = 500;
const TOY_BUDGET: Duration = Duration::from_secs(600);
const GRAD_BUDGET: Duration = Duration::from_secs(120);

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn failed_checks(checks: &[Check]) -> Vec<String> {
    checks
        .iter()
        .filter(|c| !c.passed())
        .map(|c| format!("{}={:e}>{:e}", c.name, c.value, c.tol))
        .collect()
}

fn criterion_1() -> Verdict {
    let t0 = Instant::now();
    let suite = gradient_suite();
    let elapsed = t0.elapsed();
    let worst = suite
        .iter()
        .max_by(|a, b| a.report.max_rel_err.total_cmp(&b.report.max_rel_err))
        .unwrap();
    let bad: Vec<&str> = suite
        .iter()
        .filter(|c| !(c.report.max_rel_err < GRAD_TOL))
        .map(|c| c.name.as_str())
        .collect();
    verdict(
        bad.is_empty() && elapsed < GRAD_BUDGET,
        format!(
            "{} cases, worst {} rel_err={:.2e}, time={:.1}s{}",
            suite.len(),
            worst.name,
            worst.report.max_rel_err,
            elapsed.as_secs_f64(),
            if bad.is_empty() { String::new() } else { format!(", failing: {}", bad.join(",")) }
        ),
    )
}

fn criterion_2() -> Verdict {
    let checks = oracle_checks();
    let bad = failed_checks(&checks);
    let summary: Vec<String> = checks.iter().map(|c| format!("{}={:.1e}", c.name, c.value)).collect();
    verdict(
        bad.is_empty() && checks.iter().all(|c| c.instances >= 5),
        format!("{} instances each; {}", checks[0].instances, summary.join(" ")),
    )
}

fn criterion_3() -> Verdict {
    let (t, levels) = (4096, 8);
    let cfg = ModelConfig::default();
    if cfg.levels != levels {
        return verdict(false, format!("default depth is {}", cfg.levels));
    }
    let model = Model::new(cfg.clone(), 30, 7, 1).unwrap();
    let mut tape = Tape::new();
    let pv = tape.bind(&model.params);
    let x = tape.constant(rand_tensor(&mut rng(2), vec![t, 30], 1.0));
    let (f0, pyr) = model.pyramids(&mut tape, &pv, x).unwrap();
    let mut problems = Vec::new();
    if tape.shape(f0) != [t, cfg.dim] {
        problems.push(format!("stem {:?}", tape.shape(f0)));
    }
    let lens: Vec<usize> = pyr.tsse.iter().map(|&v| tape.shape(v)[0]).collect();
    let want: Vec<usize> = (1..=levels).map(|l| t >> l).collect();
    if lens != want {
        problems.push(format!("tsse lengths {lens:?}"));
    }
    for (l, (a, b)) in pyr.tsse.iter().zip(&pyr.lsre).enumerate() {
        if tape.shape(*a) != tape.shape(*b) || tape.shape(*a) != [t >> (l + 1), cfg.dim] {
            problems.push(format!("level {}: {:?} vs {:?}", l + 1, tape.shape(*a), tape.shape(*b)));
        }
    }
    let det: Vec<usize> = cfg.level_specs(t).iter().map(|s| s.len).collect();
    if det != [256, 128, 64, 32] {
        problems.push(format!("detection lengths {det:?}"));
    }
    let outs = model.forward(&mut tape, &pv, x).unwrap();
    for (o, &n) in outs.iter().zip(&det) {
        if tape.shape(o.cls_logits) != [n, 8] || tape.shape(o.distances) != [n, 2] {
            problems.push(format!("head at {n}: {:?}", tape.shape(o.cls_logits)));
        }
    }
    verdict(
        problems.is_empty(),
        format!("levels {lens:?}, detection {det:?}{}", if problems.is_empty() { String::new() } else { format!("; {}", problems.join("; ")) }),
    )
}

fn criterion_4() -> Verdict {
    let checks = invariant_checks();
    let bad = failed_checks(&checks);
    verdict(
        bad.is_empty(),
        if bad.is_empty() {
            format!("{} invariants hold", checks.len())
        } else {
            bad.join(" ")
        },
    )
}

struct ToyRun {
    report: EvalReport,
    steps: u64,
    elapsed: Duration,
    dir: PathBuf,
}

/// Synthesize, train, detect and evaluate on the training samples.
fn toy_run(cfg: &RunConfig, root: &Path, data: Option<&Path>) -> ToyRun {
    let t0 = Instant::now();
    let data = match data {
        Some(d) => d.to_path_buf(),
        None => {
            let d = root.join("data");
            app::cmd_synth(cfg, &d, false).unwrap();
            d
        }
    };
    let run = root.join("run");
    let outcome = app::cmd_train(cfg, &data, &run, false, 1).unwrap();
    let preds = root.join("predictions.tsv");
    app::cmd_detect(cfg, &data, &TrainPaths::in_dir(&run).checkpoint, SplitSel::Train, &preds, 1).unwrap();
    let (report, classes) = app::cmd_eval(&preds, &data, SplitSel::Train).unwrap();
    fs::write(root.join("report.txt"), report.to_key_values(&classes)).unwrap();
    ToyRun {
        report,
        steps: outcome.steps,
        elapsed: t0.elapsed(),
        dir: root.to_path_buf(),
    }
}

fn map_line(r: &EvalReport) -> String {
    let per: Vec<String> = r.thresholds.iter().zip(&r.map).map(|(t, m)| format!("{t}:{m:.3}")).collect();
    format!("mAP_avg={:.3} [{}]", r.map_avg, per.join(" "))
}

fn criterion_5(toy: &ToyRun) -> Verdict {
    let m50 = toy.report.map_at(0.5).unwrap_or(0.0);
    verdict(
        toy.report.map_avg >= TOY_MAP_AVG && m50 >= TOY_MAP_50 && toy.steps <= TOY_MAX_STEPS && toy.elapsed < TOY_BUDGET,
        format!(
            "{}, steps={}, time={:.1}s",
            map_line(&toy.report),
            toy.steps,
            toy.elapsed.as_secs_f64()
        ),
    )
}

fn criterion_6(range: &ToyRun, scratch: &Path) -> Verdict {
    let mut cfg = toy_config();
    cfg.apply_ablations(&["lsre-min".into()]).unwrap();
    let min = toy_run(&cfg, scratch, Some(&range.dir.join("data")));
    verdict(
        range.report.map_avg >= min.report.map_avg,
        format!(
            "max-min mAP_avg={:.3} vs min-only mAP_avg={:.3} ({:.1}s)",
            range.report.map_avg,
            min.report.map_avg,
            min.elapsed.as_secs_f64()
        ),
    )
}

fn as_predictions(gts: &[Annotation]) -> Vec<Prediction> {
    gts.iter()
        .map(|g| Prediction {
            sample_id: g.sample_id.clone(),
            class_id: g.class_id,
            start_s: g.start_s,
            end_s: g.end_s,
            score: 1.0,
        })
        .collect()
}

fn criterion_7() -> Verdict {
    let cfg = SynthConfig {
        seed: 11,
        num_samples: 8,
        num_channels: 2,
        ..SynthConfig::default()
    };
    let samples = synthesize_dataset(&cfg).unwrap();
    let ds = csitad_core::data::Dataset {
        classes: cfg.class_names(),
        samples,
        split: None,
    };
    let gts = Annotation::from_dataset(&ds, None);
    let k = ds.classes.len();
    let perfect = as_predictions(&gts);
    let report = evaluate(&perfect, &gts, k).unwrap();
    let self_ok = report.map.iter().all(|&m| m == 1.0) && report.map_avg == 1.0;
    let prof = fp_profile(&perfect, &gts, k).unwrap();
    let tp = FpCategory::TruePositive as usize;
    let all_tp = prof.fractions.len() == 10 && prof.fractions.iter().all(|f| f[tp] == 1.0);

    // Fractions on perturbed predictions.
    let mut worst = 0.0f64;
    for seed in 0..20 {
        let mut r = rng(700 + seed);
        let mut preds = Vec::new();
        for g in &gts {
            for _ in 0..r.random_range(0..4) {
                let dt = r.random_range(-4.0..4.0);
                preds.push(Prediction {
                    sample_id: g.sample_id.clone(),
                    class_id: if r.random_bool(0.7) { g.class_id } else { r.random_range(0..k) },
                    start_s: (g.start_s + dt).max(0.0),
                    end_s: g.end_s + dt + r.random_range(0.0..3.0),
                    score: r.random_range(0.0..1.0),
                });
            }
        }
        if let Ok(p) = fp_profile(&preds, &gts, k) {
            for f in &p.fractions {
                worst = worst.max((f.iter().sum::<f64>() - 1.0).abs());
            }
        }
    }
    verdict(
        self_ok && all_tp && worst <= 1e-12,
        format!(
            "self-eval {} over {} segments, fp-profile all-TP={all_tp}, max |sum-1|={worst:.1e}",
            map_line(&report),
            gts.len()
        ),
    )
}

fn files_under(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn criterion_8(scratch: &Path) -> Verdict {
    let mut cfg = toy_config();
    cfg.train.max_steps = Some(100);
    cfg.inference.score_threshold = 0.05;
    let (a, b) = (scratch.join("a"), scratch.join("b"));
    let ra = toy_run(&cfg, &a, None);
    toy_run(&cfg, &b, None);
    let (fa, fb) = (files_under(&a), files_under(&b));
    let differing: Vec<String> = fa
        .keys()
        .chain(fb.keys())
        .filter(|k| fa.get(*k) != fb.get(*k))
        .map(|k| k.display().to_string())
        .collect();
    let npred = fs::read_to_string(a.join("predictions.tsv")).unwrap().lines().count();
    verdict(
        differing.is_empty() && ra.report.num_predictions > 0,
        format!(
            "{} files compared, {} prediction lines, differing: [{}]",
            fa.len(),
            npred,
            differing.join(",")
        ),
    )
}

fn main() -> ExitCode {
    let scratch = tempfile::tempdir().unwrap();
    let mut results = Vec::new();
    let mut record = |n: usize, v: Verdict| {
        println!("criterion {n}: {} {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
        results.push(v.pass);
    };
    record(1, criterion_1());
    record(2, criterion_2());
    record(3, criterion_3());
    record(4, criterion_4());
    let toy = toy_run(&toy_config(), &scratch.path().join("toy"), None);
    record(5, criterion_5(&toy));
    record(6, criterion_6(&toy, &scratch.path().join("toy_min")));
    record(7, criterion_7());
    record(8, criterion_8(&scratch.path().join("determinism")));
    let passed = results.iter().filter(|&&p| p).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed == results.len() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
