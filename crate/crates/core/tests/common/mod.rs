//! Helpers shared by the integration tests: random fixtures, the gradient
//! suite, brute-force reference implementations and the toy configuration.
#![allow(dead_code)]

pub mod checks;

use std::path::PathBuf;

use csitad_core::app::RunConfig;
use csitad_core::autograd::{Tape, Var, WindowReduce};
use csitad_core::data::Segment;
use csitad_core::encoders::{contranorm, Lsre, SignedMaskAttention, Tsse, TsseConfig};
use csitad_core::eval::{tiou, Annotation, Prediction};
use csitad_core::fusion::{CrossAttention, FusionLevel};
use csitad_core::gradcheck::{check_sampled, GradCheckReport};
use csitad_core::head::{assign_targets, focal_loss, total_loss, diou_distance, Detection, Head, LevelSpec, LossConfig};
use csitad_core::model::{Model, ModelConfig};
use csitad_core::nn::{Conv1d, Cgr, LayerNorm, Linear, ParamBuilder};
use csitad_core::{ModuleParams, Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const GRAD_TOL: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, rand_vec(rng, n, scale)).unwrap().with_grad()
}

/// Values bounded away from zero, for inputs of kinked functions.
pub fn rand_tensor_off_zero(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(0.1..1.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape, data).unwrap().with_grad()
}

pub fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// `Σ out ⊙ W` for a fixed random `W`, so every output element carries a
/// distinct weight into the scalar.
pub fn weighted_sum(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(out).to_vec();
    let mut r = rng(seed);
    let n = shape.iter().product();
    let w = tape.constant(Tensor::new(shape, rand_vec(&mut r, n, 1.0))?);
    let m = tape.mul(out, w)?;
    Ok(tape.sum(m))
}

/// Fresh parameter store and builder seed for one module.
pub fn params_of<M>(seed: u64, build: impl FnOnce(&mut ParamBuilder) -> Result<M>) -> (ModuleParams, M) {
    let mut params = ModuleParams::new();
    let mut r = rng(seed);
    let m = {
        let mut b = ParamBuilder::new(&mut params, &mut r);
        build(&mut b).unwrap()
    };
    (params, m)
}

pub struct GradCase {
    pub name: String,
    pub report: GradCheckReport,
}

const T: usize = 64;
const D: usize = 8;
const M: usize = 2;
const C: usize = 3;

fn case(name: &str, inputs: &[Tensor], f: impl Fn(&mut Tape, &[Var]) -> Result<Var>) -> GradCase {
    let report = check_sampled(inputs, f, 48, 11).unwrap();
    GradCase {
        name: name.to_string(),
        report,
    }
}

/// Module check: input `x` first, then every parameter in id order.
fn module_case(
    name: &str,
    x: Tensor,
    params: &ModuleParams,
    f: impl Fn(&mut Tape, &[Var], Var) -> Result<Var>,
) -> GradCase {
    let mut inputs = vec![x];
    inputs.extend(params.tensors().iter().cloned());
    case(name, &inputs, |tape, v| {
        let out = f(tape, &v[1..], v[0])?;
        weighted_sum(tape, out, 99)
    })
}

/// Finite-difference checks of every differentiable operation and of the
/// composed training loss at `T=64, D=8, M=2, C=3`.
pub fn gradient_suite() -> Vec<GradCase> {
    let mut r = rng(2024);
    let mut out = Vec::new();
    let a = rand_tensor(&mut r, vec![T, D], 1.0);
    let b = rand_tensor(&mut r, vec![T, D], 1.0);
    let row = rand_tensor(&mut r, vec![D], 1.0);
    let k = rand_tensor(&mut r, vec![D, 5], 1.0);
    let kn = rand_tensor(&mut r, vec![T / 2, D], 1.0);
    let kinked = rand_tensor_off_zero(&mut r, vec![T, D]);

    macro_rules! unary {
        ($name:expr, $x:expr, |$t:ident, $v:ident| $body:expr) => {
            out.push(case($name, &[$x.clone()], |$t, vs| {
                let $v = vs[0];
                let y = $body;
                weighted_sum($t, y, 7)
            }));
        };
    }
    macro_rules! binary {
        ($name:expr, $x:expr, $y:expr, |$t:ident, $u:ident, $w:ident| $body:expr) => {
            out.push(case($name, &[$x.clone(), $y.clone()], |$t, vs| {
                let ($u, $w) = (vs[0], vs[1]);
                let y = $body;
                weighted_sum($t, y, 7)
            }));
        };
    }

    binary!("add", a, b, |t, x, y| t.add(x, y)?);
    binary!("sub", a, b, |t, x, y| t.sub(x, y)?);
    binary!("mul", a, b, |t, x, y| t.mul(x, y)?);
    unary!("scale", a, |t, x| t.scale(x, -1.7));
    binary!("add_row", a, row, |t, x, y| t.add_row(x, y)?);
    binary!("mul_row", a, row, |t, x, y| t.mul_row(x, y)?);
    binary!("matmul", a, k, |t, x, y| t.matmul(x, y)?);
    binary!("matmul_nt", a, kn, |t, x, y| t.matmul_nt(x, y)?);
    unary!("relu", kinked, |t, x| t.relu(x));
    unary!("sigmoid", a, |t, x| t.sigmoid(x));
    unary!("tanh", a, |t, x| t.tanh(x));
    unary!("softmax", a, |t, x| t.softmax(x));
    unary!("row_l1", kinked, |t, x| t.row_l1(x));
    binary!("concat_cols", a, kinked, |t, x, y| t.concat_cols(x, y)?);
    unary!("slice_cols", a, |t, x| t.slice_cols(x, 2, 3)?);
    unary!("sum", a, |t, x| t.sum(x));
    unary!("mean", a, |t, x| t.mean(x));
    unary!("group_norm", a, |t, x| t.group_norm(x, 4, 1e-5)?);
    unary!("layer_norm", a, |t, x| t.layer_norm(x, 1e-5));
    unary!("max_pool1d", a, |t, x| t.max_pool1d(x, 3, 2, 1)?);
    for reduce in [WindowReduce::Max, WindowReduce::Min, WindowReduce::Mean, WindowReduce::Range] {
        unary!(&format!("window_reduce_{reduce:?}"), a, |t, x| t.window_reduce(x, 4, 4, reduce)?);
    }
    let kernel3 = rand_tensor(&mut r, vec![3, D, 6], 0.5);
    let kernel2 = rand_tensor(&mut r, vec![2, D, 6], 0.5);
    binary!("conv1d_k3_s1", a, kernel3, |t, x, w| t.conv1d(x, w, 1, 1)?);
    binary!("conv1d_k2_s2", a, kernel2, |t, x, w| t.conv1d(x, w, 2, 0)?);

    // Fused losses: values computed in the forward pass, gradients supplied.
    let logits = rand_tensor(&mut r, vec![T, C + 1], 2.0);
    let labels: Vec<usize> = (0..T).map(|i| (i * 7) % (C + 1)).collect();
    out.push(case("focal_loss", &[logits], |t, v| {
        let (val, grad) = focal_loss(t.value(v[0]), &labels, 0.25, 2.0)?;
        t.fused_scalar(v[0], val, grad)
    }));
    let dist = Tensor::new(
        vec![T, 2],
        (0..2 * T).map(|_| r.random_range(0.5..20.0)).collect(),
    )
    .unwrap()
    .with_grad();
    let gt: Vec<[f64; 2]> = (0..T).map(|_| [r.random_range(0.5..20.0), r.random_range(0.5..20.0)]).collect();
    out.push(case("diou_loss", &[dist], |t, v| {
        let d = t.value(v[0]).clone();
        let mut total = 0.0;
        let mut grad = vec![0.0; 2 * T];
        for i in 0..T {
            let (l, g) = diou_distance([d.get(i, 0), d.get(i, 1)], gt[i]);
            total += l;
            grad[2 * i] = g[0];
            grad[2 * i + 1] = g[1];
        }
        t.fused_scalar(v[0], total, grad)
    }));

    // Building blocks with their parameters.
    let x = rand_tensor(&mut r, vec![T, D], 1.0);
    let (p, lin) = params_of(1, |b| Linear::new(b, D, 5));
    out.push(module_case("linear", x.clone(), &p, |t, p, x| lin.forward(t, p, x)));
    let (p, conv) = params_of(2, |b| Conv1d::same(b, D, D, 3));
    out.push(module_case("conv1d_module", x.clone(), &p, |t, p, x| conv.forward(t, p, x)));
    let (p, ln) = params_of(3, |b| LayerNorm::new(b, D));
    out.push(module_case("layer_norm_affine", x.clone(), &p, |t, p, x| ln.forward(t, p, x)));
    let (p, cgr) = params_of(4, |b| Cgr::new(b, D, D));
    out.push(module_case("cgr", x.clone(), &p, |t, p, x| cgr.forward(t, p, x)));

    let (p, sma) = params_of(5, |b| SignedMaskAttention::new(b, D, M));
    out.push(module_case("signed_mask_attention", x.clone(), &p, |t, p, x| {
        sma.forward(t, p, x, csitad_core::encoders::AttentionKind::SignedMask)
    }));
    out.push(module_case("vanilla_attention", x.clone(), &p, |t, p, x| {
        sma.forward(t, p, x, csitad_core::encoders::AttentionKind::SelfAttention)
    }));
    out.push(module_case("contranorm", x.clone(), &ModuleParams::new(), |t, _, x| contranorm(t, x, 0.1)));
    let tcfg = TsseConfig {
        dim: D,
        heads: M,
        ffn_hidden: 16,
        ..TsseConfig::default()
    };
    let (p, tsse) = params_of(6, |b| Tsse::new(b, tcfg));
    out.push(module_case("tsse", x.clone(), &p, |t, p, x| tsse.forward(t, p, x)));
    let (p, lsre) = params_of(7, |b| Lsre::new(b, 2, D, 16, WindowReduce::Range));
    out.push(module_case("lsre", x.clone(), &p, |t, p, x| lsre.forward(t, p, x)));
    let y = rand_tensor(&mut r, vec![T, D], 1.0);
    let (p, fl) = params_of(8, |b| FusionLevel::new(b, D, M, 16));
    {
        let mut inputs = vec![x.clone(), y.clone()];
        inputs.extend(p.tensors().iter().cloned());
        out.push(case("cross_attention_fusion", &inputs, |t, v| {
            let o = fl.forward(t, &v[2..], v[0], v[1])?;
            weighted_sum(t, o, 99)
        }));
    }
    let (p, head) = params_of(9, |b| Head::new(b, D, C, 1));
    out.push(module_case("head", x.clone(), &p, |t, p, x| {
        let o = head.forward(t, p, x, LevelSpec::new(1, 2 * T), 0)?;
        let c = weighted_sum(t, o.cls_logits, 3)?;
        let d = weighted_sum(t, o.distances, 4)?;
        t.add(c, d)
    }));

    out.push(full_loss_case());
    out
}

/// Toy detector used by the composed-loss check.
pub fn toy_grad_model() -> Model {
    let cfg = ModelConfig {
        dim: D,
        heads: M,
        levels: 4,
        detection_levels: vec![1, 2, 3, 4],
        ffn_hidden: 16,
        lsre_hidden: 16,
        ..ModelConfig::default()
    };
    Model::new(cfg, 4, C, 31).unwrap()
}

fn full_loss_case() -> GradCase {
    let model = toy_grad_model();
    let mut r = rng(77);
    let fs = 10.0;
    let x = Tensor::new(vec![T, 4], rand_vec(&mut r, T * 4, 1.5)).unwrap();
    let gts = vec![
        Segment::new(0.8, 2.5, 0).unwrap(),
        Segment::new(3.2, 5.9, 2).unwrap(),
    ];
    let targets = assign_targets(&gts, &model.cfg.level_specs(T), fs);
    assert!(targets.num_positives() > 0);
    let cfg = LossConfig::default();
    let report = check_sampled(
        model.params.tensors(),
        |tape, p| {
            let xv = tape.constant(x.clone());
            let outs = model.forward(tape, p, xv)?;
            Ok(total_loss(tape, &outs, &targets, &cfg)?.total)
        },
        4,
        5,
    )
    .unwrap();
    GradCase {
        name: "full_loss".into(),
        report,
    }
}

// ---------------------------------------------------------------------------
// Brute-force references, written with plain loops over nested vectors.

pub type Mat = Vec<Vec<f64>>;

pub fn mat_of(t: &Tensor) -> Mat {
    rows(t)
}

pub fn mm(a: &Mat, b: &Mat) -> Mat {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            let mut s = 0.0;
            for l in 0..k {
                s += a[i][l] * b[l][j];
            }
            out[i][j] = s;
        }
    }
    out
}

fn softmax_row(r: &[f64]) -> Vec<f64> {
    let mx = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = r.iter().map(|v| (v - mx).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// One signed mask-attention head: returns `(output, mask)`.
pub fn oracle_sma(x: &Mat, wq: &Mat, wk: &Mat, wv: &Mat, wm: &Mat) -> (Mat, Mat) {
    let t = x.len();
    let dk = wq.len() as f64;
    let (q, k, v) = (mm(x, wq), mm(x, wk), mm(x, wv));
    let mut mask = vec![vec![0.0; t]; t];
    let mut logits = vec![vec![0.0; t]; t];
    for s in 0..t {
        let l1: f64 = (0..q[s].len()).map(|c| (q[s][c] + k[s][c]).abs()).sum();
        for u in 0..t {
            let proj: f64 = (0..q[u].len()).map(|c| (q[u][c] + k[u][c]) * wm[c][0]).sum();
            mask[s][u] = (l1 * proj / dk).tanh();
            let dot: f64 = (0..q[s].len()).map(|c| q[s][c] * k[u][c]).sum();
            let sim = 1.0 / (1.0 + (-dot).exp());
            logits[s][u] = mask[s][u] * sim / dk;
        }
    }
    let attn: Mat = logits.iter().map(|r| softmax_row(r)).collect();
    (mm(&attn, &v), mask)
}

pub struct LinearW {
    pub w: Mat,
    pub b: Vec<f64>,
}

impl LinearW {
    pub fn from_params(p: &ModuleParams, prefix: &str) -> Self {
        Self {
            w: mat_of(p.by_name(&format!("{prefix}.weight")).unwrap()),
            b: p.by_name(&format!("{prefix}.bias")).unwrap().data().to_vec(),
        }
    }

    pub fn apply(&self, x: &Mat) -> Mat {
        let mut y = mm(x, &self.w);
        for r in &mut y {
            for (v, b) in r.iter_mut().zip(&self.b) {
                *v += b;
            }
        }
        y
    }
}

/// Multi-head cross-attention: queries from `qs`, keys and values from `kvs`.
pub fn oracle_cross_attention(qs: &Mat, kvs: &Mat, wq: &LinearW, wk: &LinearW, wv: &LinearW, wo: &LinearW, heads: usize) -> Mat {
    let (q, k, v) = (wq.apply(qs), wk.apply(kvs), wv.apply(kvs));
    let (t, d) = (q.len(), q[0].len());
    let dk = d / heads;
    let mut cat = vec![vec![0.0; d]; t];
    for h in 0..heads {
        let cols = h * dk..(h + 1) * dk;
        for i in 0..t {
            let scores: Vec<f64> = (0..t)
                .map(|j| cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dk as f64).sqrt())
                .collect();
            let a = softmax_row(&scores);
            for c in cols.clone() {
                cat[i][c] = (0..t).map(|j| a[j] * v[j][c]).sum();
            }
        }
    }
    wo.apply(&cat)
}

pub fn oracle_contranorm(fc: &Mat, tau: f64) -> Mat {
    let t = fc.len();
    let mut out = fc.clone();
    for i in 0..t {
        let sims: Vec<f64> = (0..t)
            .map(|j| fc[i].iter().zip(&fc[j]).map(|(a, b)| a * b).sum())
            .collect();
        let w = softmax_row(&sims);
        for c in 0..fc[i].len() {
            let agg: f64 = (0..t).map(|j| w[j] * fc[j][c]).sum();
            out[i][c] = fc[i][c] - tau * agg;
        }
    }
    out
}

/// Non-overlapping windows of `2^level` rows reduced per channel.
pub fn oracle_lsre(f0: &Mat, level: usize, reduce: WindowReduce) -> Mat {
    let w = 1 << level;
    f0.chunks(w)
        .map(|win| {
            (0..win[0].len())
                .map(|c| {
                    let col: Vec<f64> = win.iter().map(|r| r[c]).collect();
                    let mx = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mn = col.iter().cloned().fold(f64::INFINITY, f64::min);
                    match reduce {
                        WindowReduce::Max => mx,
                        WindowReduce::Min => mn,
                        WindowReduce::Range => mx - mn,
                        WindowReduce::Mean => col.iter().sum::<f64>() / col.len() as f64,
                    }
                })
                .collect()
        })
        .collect()
}

/// Gaussian Soft-NMS by repeated full scans; suppressed entries are flagged
/// rather than removed.
pub fn oracle_soft_nms(dets: &[Detection], sigma: f64, floor: f64) -> Vec<Detection> {
    let mut scores: Vec<f64> = dets.iter().map(|d| d.score).collect();
    let mut alive: Vec<bool> = scores.iter().map(|&s| s >= floor).collect();
    let mut kept = Vec::new();
    let better = |i: usize, j: usize, s: &[f64]| {
        let (a, b) = (&dets[i], &dets[j]);
        s[i] > s[j]
            || (s[i] == s[j]
                && (a.start_s, a.end_s, a.class_id) < (b.start_s, b.end_s, b.class_id))
    };
    loop {
        let mut best: Option<usize> = None;
        for i in 0..dets.len() {
            if alive[i] && best.is_none_or(|b| better(i, b, &scores)) {
                best = Some(i);
            }
        }
        let Some(m) = best else { break };
        alive[m] = false;
        let mut d = dets[m];
        d.score = scores[m];
        kept.push(d);
        for i in 0..dets.len() {
            if alive[i] && dets[i].class_id == dets[m].class_id {
                let iou = tiou((dets[m].start_s, dets[m].end_s), (dets[i].start_s, dets[i].end_s));
                scores[i] *= (-(iou * iou) / sigma).exp();
                if scores[i] < floor {
                    alive[i] = false;
                }
            }
        }
    }
    kept.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.start_s.total_cmp(&b.start_s))
            .then(a.end_s.total_cmp(&b.end_s))
            .then(a.class_id.cmp(&b.class_id))
    });
    kept
}

/// AP of one class by enumerating every rank cutoff: the precision at each
/// recall increase is replaced by the best precision at any later cutoff.
pub fn oracle_ap(preds: &[Prediction], gts: &[Annotation], class: usize, th: f64) -> Option<f64> {
    let gt: Vec<&Annotation> = gts.iter().filter(|g| g.class_id == class).collect();
    if gt.is_empty() {
        return None;
    }
    let mut ps: Vec<&Prediction> = preds.iter().filter(|p| p.class_id == class).collect();
    ps.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.sample_id.cmp(&b.sample_id))
            .then(a.start_s.total_cmp(&b.start_s))
            .then(a.end_s.total_cmp(&b.end_s))
    });
    let mut used = vec![false; gt.len()];
    let mut tp = Vec::new();
    for p in &ps {
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gt.iter().enumerate() {
            if used[j] || g.sample_id != p.sample_id {
                continue;
            }
            let iou = tiou((p.start_s, p.end_s), (g.start_s, g.end_s));
            if iou >= th && best.is_none_or(|(_, b)| iou > b) {
                best = Some((j, iou));
            }
        }
        if let Some((j, _)) = best {
            used[j] = true;
        }
        tp.push(best.is_some());
    }
    let n = tp.len();
    let prec: Vec<f64> = (0..n)
        .map(|k| tp[..=k].iter().filter(|&&b| b).count() as f64 / (k + 1) as f64)
        .collect();
    let mut ap = 0.0;
    for k in 0..n {
        if tp[k] {
            let best_later = prec[k..].iter().cloned().fold(0.0, f64::max);
            ap += best_later / gt.len() as f64;
        }
    }
    Some(ap)
}

// ---------------------------------------------------------------------------

pub fn workspace_root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

/// The two-class configuration shipped in `configs/toy.toml`.
pub fn toy_config() -> RunConfig {
    let path = workspace_root().join("configs/toy.toml");
    RunConfig::load(Some(&path), &[]).unwrap()
}

pub fn cross_attention_params(seed: u64, d: usize, heads: usize) -> (ModuleParams, CrossAttention) {
    params_of(seed, |b| CrossAttention::new(b, d, heads))
}
