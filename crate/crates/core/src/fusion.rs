//! Cross-attention pyramid fusion of the TSSE and LSRE features, level by
//! level.

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Ffn, LayerNorm, Linear, ParamBuilder};

/// How the two pyramids are combined at a detection level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum FusionKind {
    #[default]
    CrossAttention,
    /// Elementwise `f_tsse + f_lsre`.
    Add,
}

/// Multi-head attention with queries from the first argument and keys and
/// values from the second, followed by an output projection.
#[derive(Debug, Clone)]
pub struct CrossAttention {
    pub heads: usize,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

impl CrossAttention {
    pub fn new(b: &mut ParamBuilder, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!("{dim} channels cannot be split into {heads} heads")));
        }
        Ok(Self {
            heads,
            q: Linear::new(&mut b.scope("q"), dim, dim)?,
            k: Linear::new(&mut b.scope("k"), dim, dim)?,
            v: Linear::new(&mut b.scope("v"), dim, dim)?,
            o: Linear::new(&mut b.scope("o"), dim, dim)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, p: &[Var], query_src: Var, kv_src: Var) -> Result<Var> {
        let (qs, ks) = (tape.shape(query_src).to_vec(), tape.shape(kv_src).to_vec());
        if qs != ks {
            return Err(Error::Shape(format!("cross-attention inputs {qs:?} vs {ks:?}")));
        }
        let d = qs[1];
        let dk = d / self.heads;
        let q = self.q.forward(tape, p, query_src)?;
        let k = self.k.forward(tape, p, kv_src)?;
        let v = self.v.forward(tape, p, kv_src)?;
        let mut cat: Option<Var> = None;
        for h in 0..self.heads {
            let qh = tape.slice_cols(q, h * dk, dk)?;
            let kh = tape.slice_cols(k, h * dk, dk)?;
            let vh = tape.slice_cols(v, h * dk, dk)?;
            let s = tape.matmul_nt(qh, kh)?;
            let s = tape.scale(s, 1.0 / (dk as f64).sqrt());
            let a = tape.softmax(s);
            let oh = tape.matmul(a, vh)?;
            cat = Some(match cat {
                None => oh,
                Some(prev) => tape.concat_cols(prev, oh)?,
            });
        }
        self.o.forward(tape, p, cat.expect("at least one head"))
    }
}

/// Fusion block of one detection level. Both attention directions share
/// one parameter set.
#[derive(Debug, Clone)]
pub struct FusionLevel {
    pub attn: CrossAttention,
    pub ffn: Ffn,
    pub norm_in: LayerNorm,
    pub norm_out: LayerNorm,
}

impl FusionLevel {
    pub fn new(b: &mut ParamBuilder, dim: usize, heads: usize, ffn_hidden: usize) -> Result<Self> {
        Ok(Self {
            attn: CrossAttention::new(&mut b.scope("attn"), dim, heads)?,
            ffn: Ffn::new(&mut b.scope("ffn"), dim, ffn_hidden)?,
            norm_in: LayerNorm::new(&mut b.scope("norm_in"), dim)?,
            norm_out: LayerNorm::new(&mut b.scope("norm_out"), dim)?,
        })
    }

    /// `c1 + c2` with `c1 = CA(lsre → Q, tsse → K,V)` and
    /// `c2 = CA(tsse → Q, lsre → K,V)`.
    pub fn bidirectional(&self, tape: &mut Tape, p: &[Var], f_tsse: Var, f_lsre: Var) -> Result<Var> {
        let c1 = self.attn.forward(tape, p, f_lsre, f_tsse)?;
        let c2 = self.attn.forward(tape, p, f_tsse, f_lsre)?;
        tape.add(c1, c2)
    }

    /// `LN_out(FFN(c1 + c2) + LN_in(f_tsse))`.
    pub fn forward(&self, tape: &mut Tape, p: &[Var], f_tsse: Var, f_lsre: Var) -> Result<Var> {
        let c = self.bidirectional(tape, p, f_tsse, f_lsre)?;
        let h = self.ffn.forward(tape, p, c)?;
        let skip = self.norm_in.forward(tape, p, f_tsse)?;
        let r = tape.add(h, skip)?;
        self.norm_out.forward(tape, p, r)
    }
}

/// Combine the two features of one level according to `kind`.
pub fn fuse_level(
    tape: &mut Tape,
    p: &[Var],
    block: &FusionLevel,
    kind: FusionKind,
    f_tsse: Var,
    f_lsre: Var,
) -> Result<Var> {
    match kind {
        FusionKind::CrossAttention => block.forward(tape, p, f_tsse, f_lsre),
        FusionKind::Add => tape.add(f_tsse, f_lsre),
    }
}
