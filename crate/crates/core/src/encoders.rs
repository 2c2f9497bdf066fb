//! Per-level encoders: the projection stem, the Temporal Signal Semantic
//! Encoder (signed mask-attention branch, conv-pool branch, ContraNorm
//! fusion) and the Local Sensitive Response Encoder (learning-free
//! sliding-window aggregation followed by an MLP).

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var, WindowReduce};
use crate::error::{Error, Result};
use crate::nn::{CgrStack, Conv1d, Ffn, LayerNorm, Linear, ParamBuilder};
use crate::tensor::ParamId;

/// Extra factor on the mask projection so training starts close to uniform
/// attention.
pub const MASK_INIT_GAIN: f64 = 0.1;

/// Attention used inside the TSSE attention branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum AttentionKind {
    #[default]
    SignedMask,
    /// `softmax(QKᵀ/√d_k)·V` with the same projections.
    SelfAttention,
}

/// Which TSSE branches are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum TsseBranches {
    #[default]
    Both,
    AttentionOnly,
    PoolOnly,
}

/// Three CGR layers projecting `C` input channels to `D`.
#[derive(Debug, Clone)]
pub struct Stem {
    layers: CgrStack,
}

impl Stem {
    pub fn new(b: &mut ParamBuilder, in_channels: usize, dim: usize) -> Result<Self> {
        Ok(Self {
            layers: CgrStack::new(b, in_channels, dim, 3)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, p: &[Var], x: Var) -> Result<Var> {
        self.layers.forward(tape, p, x)
    }
}

/// Vars of one attention head: `d_k × d_k` projections and the `d_k × 1`
/// mask vector.
#[derive(Debug, Clone, Copy)]
pub struct SmaHeadVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wm: Var,
}

/// Intermediate results of one signed mask-attention head.
#[derive(Debug, Clone, Copy)]
pub struct SmaOutput {
    pub out: Var,
    pub mask: Var,
    /// `mask ⊙ sigmoid(QKᵀ)`, before scaling and softmax.
    pub scores: Var,
}

/// Signed mask-attention for one head on `x[T × d_k]`.
///
/// `mask_st = tanh(‖(Q+K)_s‖₁ · ((Q+K)_t · w) / d_k)`,
/// `A = mask ⊙ sigmoid(QKᵀ)`, output `softmax(A / d_k)·V`.
pub fn sma_head(tape: &mut Tape, x: Var, h: SmaHeadVars) -> Result<SmaOutput> {
    let dk = tape.shape(h.wq)[0] as f64;
    let q = tape.matmul(x, h.wq)?;
    let k = tape.matmul(x, h.wk)?;
    let v = tape.matmul(x, h.wv)?;
    let s = tape.add(q, k)?;
    let norm = tape.row_l1(s);
    let proj = tape.matmul(s, h.wm)?;
    let outer = tape.matmul_nt(norm, proj)?;
    let outer = tape.scale(outer, 1.0 / dk);
    let mask = tape.tanh(outer);
    let sim = tape.matmul_nt(q, k)?;
    let sim = tape.sigmoid(sim);
    let a = tape.mul(mask, sim)?;
    let logits = tape.scale(a, 1.0 / dk);
    let attn = tape.softmax(logits);
    Ok(SmaOutput {
        out: tape.matmul(attn, v)?,
        mask,
        scores: a,
    })
}

/// Scaled dot-product self-attention for one head on `x[T × d_k]`.
pub fn vanilla_head(tape: &mut Tape, x: Var, h: SmaHeadVars) -> Result<Var> {
    let dk = tape.shape(h.wq)[0] as f64;
    let q = tape.matmul(x, h.wq)?;
    let k = tape.matmul(x, h.wk)?;
    let v = tape.matmul(x, h.wv)?;
    let sim = tape.matmul_nt(q, k)?;
    let sim = tape.scale(sim, 1.0 / dk.sqrt());
    let attn = tape.softmax(sim);
    tape.matmul(attn, v)
}

/// Multi-head signed mask-attention; the input's channels are split into
/// `M` slices of `d_k = D / M` and the head outputs are concatenated.
#[derive(Debug, Clone)]
pub struct SignedMaskAttention {
    pub heads: usize,
    pub dk: usize,
    wq: Vec<ParamId>,
    wk: Vec<ParamId>,
    wv: Vec<ParamId>,
    wm: Vec<ParamId>,
}

impl SignedMaskAttention {
    pub fn new(b: &mut ParamBuilder, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!("{dim} channels cannot be split into {heads} heads")));
        }
        let dk = dim / heads;
        let mut s = Self {
            heads,
            dk,
            wq: Vec::new(),
            wk: Vec::new(),
            wv: Vec::new(),
            wm: Vec::new(),
        };
        for i in 0..heads {
            let mut hb = b.scope(&format!("head{i}"));
            s.wq.push(hb.uniform("wq", vec![dk, dk], dk, 1.0)?);
            s.wk.push(hb.uniform("wk", vec![dk, dk], dk, 1.0)?);
            s.wv.push(hb.uniform("wv", vec![dk, dk], dk, 1.0)?);
            s.wm.push(hb.uniform("wm", vec![dk, 1], dk, MASK_INIT_GAIN)?);
        }
        Ok(s)
    }

    pub fn head_vars(&self, p: &[Var], i: usize) -> SmaHeadVars {
        SmaHeadVars {
            wq: p[self.wq[i].index()],
            wk: p[self.wk[i].index()],
            wv: p[self.wv[i].index()],
            wm: p[self.wm[i].index()],
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &[Var], x: Var, kind: AttentionKind) -> Result<Var> {
        let d = tape.shape(x).get(1).copied().unwrap_or(0);
        if d != self.heads * self.dk {
            return Err(Error::Shape(format!(
                "attention expects {} channels, got {d}",
                self.heads * self.dk
            )));
        }
        let mut out: Option<Var> = None;
        for i in 0..self.heads {
            let xi = tape.slice_cols(x, i * self.dk, self.dk)?;
            let hv = self.head_vars(p, i);
            let oi = match kind {
                AttentionKind::SignedMask => sma_head(tape, xi, hv)?.out,
                AttentionKind::SelfAttention => vanilla_head(tape, xi, hv)?,
            };
            out = Some(match out {
                None => oi,
                Some(prev) => tape.concat_cols(prev, oi)?,
            });
        }
        Ok(out.expect("at least one head"))
    }
}

/// `f_c − τ · softmax(f_c f_cᵀ) · f_c` with the softmax taken row-wise.
pub fn contranorm(tape: &mut Tape, fc: Var, tau: f64) -> Result<Var> {
    if tau == 0.0 {
        return Ok(fc);
    }
    let sim = tape.matmul_nt(fc, fc)?;
    let w = tape.softmax(sim);
    let agg = tape.matmul(w, fc)?;
    let agg = tape.scale(agg, tau);
    tape.sub(fc, agg)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TsseConfig {
    pub dim: usize,
    pub heads: usize,
    pub tau: f64,
    pub ffn_hidden: usize,
    pub attention: AttentionKind,
    pub branches: TsseBranches,
}

impl Default for TsseConfig {
    fn default() -> Self {
        Self {
            dim: 16,
            heads: 2,
            tau: 0.1,
            ffn_hidden: 32,
            attention: AttentionKind::SignedMask,
            branches: TsseBranches::Both,
        }
    }
}

/// One TSSE level, halving the temporal length.
#[derive(Debug, Clone)]
pub struct Tsse {
    cfg: TsseConfig,
    /// Stride-2, kernel-2 down-sampling shared by both branches.
    ds: Conv1d,
    attn: SignedMaskAttention,
    norm: LayerNorm,
    ffn: Ffn,
    pool_conv: Conv1d,
    fuse: Conv1d,
}

impl Tsse {
    pub fn new(b: &mut ParamBuilder, cfg: TsseConfig) -> Result<Self> {
        let d = cfg.dim;
        if cfg.tau < 0.0 {
            return Err(Error::Config(format!("ContraNorm scale {} must be >= 0", cfg.tau)));
        }
        let fuse_in = if cfg.branches == TsseBranches::Both { 2 * d } else { d };
        Ok(Self {
            cfg,
            ds: Conv1d::new(&mut b.scope("ds"), d, d, 2, 2, 0)?,
            attn: SignedMaskAttention::new(&mut b.scope("sma"), d, cfg.heads)?,
            norm: LayerNorm::new(&mut b.scope("sma.norm"), d)?,
            ffn: Ffn::new(&mut b.scope("sma.ffn"), d, cfg.ffn_hidden)?,
            pool_conv: Conv1d::same(&mut b.scope("pool.conv"), d, d, 3)?,
            fuse: Conv1d::new(&mut b.scope("fuse"), fuse_in, d, 1, 1, 0)?,
        })
    }

    fn check_even(tape: &Tape, f: Var) -> Result<usize> {
        let t = tape.shape(f)[0];
        if t == 0 || t % 2 != 0 {
            return Err(Error::Shape(format!("TSSE needs an even, non-zero length, got {t}")));
        }
        Ok(t)
    }

    pub fn downsample(&self, tape: &mut Tape, p: &[Var], f: Var) -> Result<Var> {
        Self::check_even(tape, f)?;
        self.ds.forward(tape, p, f)
    }

    /// `FFN(LN(SMA(DS f) + DS f))`, given `DS f`.
    pub fn attention_branch(&self, tape: &mut Tape, p: &[Var], ds: Var) -> Result<Var> {
        let a = self.attn.forward(tape, p, ds, self.cfg.attention)?;
        let r = tape.add(a, ds)?;
        let r = self.norm.forward(tape, p, r)?;
        self.ffn.forward(tape, p, r)
    }

    /// `conv(sigmoid(maxpool(f)) ⊙ DS f)`.
    pub fn pool_branch(&self, tape: &mut Tape, p: &[Var], f: Var, ds: Var) -> Result<Var> {
        let m = tape.max_pool1d(f, 3, 2, 1)?;
        let gate = tape.sigmoid(m);
        let g = tape.mul(gate, ds)?;
        self.pool_conv.forward(tape, p, g)
    }

    /// 1×1 projection of the (concatenated) branch outputs, then ContraNorm.
    pub fn fuse(&self, tape: &mut Tape, p: &[Var], sma: Option<Var>, pool: Option<Var>) -> Result<Var> {
        let x = match (sma, pool) {
            (Some(a), Some(b)) => tape.concat_cols(a, b)?,
            (Some(a), None) | (None, Some(a)) => a,
            (None, None) => return Err(Error::Config("TSSE needs at least one branch".into())),
        };
        let fc = self.fuse.forward(tape, p, x)?;
        contranorm(tape, fc, self.cfg.tau)
    }

    pub fn forward(&self, tape: &mut Tape, p: &[Var], f: Var) -> Result<Var> {
        let ds = self.downsample(tape, p, f)?;
        let sma = match self.cfg.branches {
            TsseBranches::PoolOnly => None,
            _ => Some(self.attention_branch(tape, p, ds)?),
        };
        let pool = match self.cfg.branches {
            TsseBranches::AttentionOnly => None,
            _ => Some(self.pool_branch(tape, p, f, ds)?),
        };
        self.fuse(tape, p, sma, pool)
    }
}

/// Learning-free aggregation of level `l`: window `2^l` evaluated every
/// `2^l` stamps, giving `T / 2^l` rows.
pub fn lsre_aggregate(tape: &mut Tape, f0: Var, level: usize, reduce: WindowReduce) -> Result<Var> {
    let t = tape.shape(f0)[0];
    let w = 1usize
        .checked_shl(level as u32)
        .filter(|&w| level >= 1 && w <= t && t % w == 0)
        .ok_or_else(|| Error::Shape(format!("length {t} is not divisible by 2^{level}")))?;
    tape.window_reduce(f0, w, w, reduce)
}

/// LSRE of one level: aggregation then `Linear → ReLU → Linear`.
#[derive(Debug, Clone)]
pub struct Lsre {
    pub level: usize,
    pub reduce: WindowReduce,
    up: Linear,
    down: Linear,
}

impl Lsre {
    pub fn new(b: &mut ParamBuilder, level: usize, dim: usize, hidden: usize, reduce: WindowReduce) -> Result<Self> {
        Ok(Self {
            level,
            reduce,
            up: Linear::new(&mut b.scope("up"), dim, hidden)?,
            down: Linear::new(&mut b.scope("down"), hidden, dim)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, p: &[Var], f0: Var) -> Result<Var> {
        let a = lsre_aggregate(tape, f0, self.level, self.reduce)?;
        let h = self.up.forward(tape, p, a)?;
        let h = tape.relu(h);
        self.down.forward(tape, p, h)
    }
}

/// Encoders of every level plus the stem.
#[derive(Debug, Clone)]
pub struct Encoders {
    pub tsse: Vec<Tsse>,
    pub lsre: Vec<Lsre>,
}

/// Features of both pyramids; entry `i` is level `i + 1`.
#[derive(Debug, Clone, Default)]
pub struct Pyramids {
    pub tsse: Vec<Var>,
    pub lsre: Vec<Var>,
}

impl Encoders {
    pub fn new(
        b: &mut ParamBuilder,
        levels: usize,
        tsse: TsseConfig,
        lsre_hidden: usize,
        reduce: WindowReduce,
    ) -> Result<Self> {
        Ok(Self {
            tsse: (1..=levels)
                .map(|l| Tsse::new(&mut b.scope(&format!("tsse.{l}")), tsse))
                .collect::<Result<_>>()?,
            lsre: (1..=levels)
                .map(|l| Lsre::new(&mut b.scope(&format!("lsre.{l}")), l, tsse.dim, lsre_hidden, reduce))
                .collect::<Result<_>>()?,
        })
    }

    pub fn levels(&self) -> usize {
        self.tsse.len()
    }

    /// Build both pyramids up to level `upto` (inclusive). Pyramids that are
    /// not requested stay empty.
    pub fn build_pyramids(
        &self,
        tape: &mut Tape,
        p: &[Var],
        f0: Var,
        upto: usize,
        with_tsse: bool,
        with_lsre: bool,
    ) -> Result<Pyramids> {
        let t = tape.shape(f0)[0];
        let l = self.levels();
        if upto > l || t % (1usize << upto.min(63)) != 0 {
            return Err(Error::Shape(format!(
                "length {t} must be divisible by 2^{upto} with {l} levels built"
            )));
        }
        let mut out = Pyramids::default();
        if with_tsse {
            let mut f = f0;
            for enc in &self.tsse[..upto] {
                f = enc.forward(tape, p, f)?;
                out.tsse.push(f);
            }
        }
        if with_lsre {
            for enc in &self.lsre[..upto] {
                out.lsre.push(enc.forward(tape, p, f0)?);
            }
        }
        Ok(out)
    }
}
