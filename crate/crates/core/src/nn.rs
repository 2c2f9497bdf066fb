//! Neural building blocks composed from tape operations: linear maps,
//! convolutions, normalizations, the FFN, and the CGR (Conv + GroupNorm +
//! ReLU) layer.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{ModuleParams, ParamId, Tensor};

pub const NORM_EPS: f64 = 1e-5;

/// Group count used for every GroupNorm over `dim` channels.
pub fn default_groups(dim: usize) -> usize {
    let mut g = dim.clamp(1, 8);
    while dim % g != 0 {
        g -= 1;
    }
    g
}

/// Registers parameters under a hierarchical path prefix and draws their
/// initial values from one seeded generator.
pub struct ParamBuilder<'a> {
    params: &'a mut ModuleParams,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a> ParamBuilder<'a> {
    pub fn new(params: &'a mut ModuleParams, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            params,
            rng,
            prefix: String::new(),
        }
    }

    pub fn scope(&mut self, name: &str) -> ParamBuilder<'_> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        ParamBuilder {
            params: self.params,
            rng: self.rng,
            prefix,
        }
    }

    pub fn params_mut(&mut self) -> &mut ModuleParams {
        self.params
    }

    fn path(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    /// Uniform `U(-gain/√fan_in, gain/√fan_in)` initialization.
    pub fn uniform(
        &mut self,
        name: &str,
        shape: Vec<usize>,
        fan_in: usize,
        gain: f64,
    ) -> Result<ParamId> {
        let bound = gain / (fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| self.rng.random_range(-bound..=bound))
            .collect();
        let path = self.path(name);
        self.params.insert(path, Tensor::new(shape, data)?)
    }

    pub fn constant(&mut self, name: &str, shape: Vec<usize>, value: f64) -> Result<ParamId> {
        let path = self.path(name);
        self.params.insert(path, Tensor::filled(shape, value))
    }
}

#[inline]
fn var(p: &[Var], id: ParamId) -> Var {
    p[id.index()]
}

/// `y = x·W + b` applied to each row.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(b: &mut ParamBuilder, din: usize, dout: usize) -> Result<Self> {
        Ok(Self {
            weight: b.uniform("weight", vec![din, dout], din, 1.0)?,
            bias: b.uniform("bias", vec![dout], din, 1.0)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, p: &[Var], x: Var) -> Result<Var> {
        let h = tape.matmul(x, var(p, self.weight))?;
        tape.add_row(h, var(p, self.bias))
    }
}

#[derive(Debug, Clone)]
pub struct Conv1d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub padding: usize,
}

impl Conv1d {
    pub fn new(
        b: &mut ParamBuilder,
        din: usize,
        dout: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let fan_in = din * kernel;
        Ok(Self {
            weight: b.uniform("weight", vec![kernel, din, dout], fan_in, 1.0)?,
            bias: b.uniform("bias", vec![dout], fan_in, 1.0)?,
            stride,
            padding,
        })
    }

    /// Kernel `k` (odd) with padding `k / 2` keeps the temporal length.
    pub fn same(b: &mut ParamBuilder, din: usize, dout: usize, kernel: usize) -> Result<Self> {
        Self::new(b, din, dout, kernel, 1, kernel / 2)
    }

    pub fn forward(&self, tape: &mut Tape, p: &[Var], x: Var) -> Result<Var> {
        let h = tape.conv1d(x, var(p, self.weight), self.stride, self.padding)?;
        tape.add_row(h, var(p, self.bias))
    }
}

/// Group normalization followed by a per-channel affine transform.
pub fn group_norm(
    tape: &mut Tape,
    x: Var,
    groups: usize,
    scale: Var,
    bias: Var,
    eps: f64,
) -> Result<Var> {
    let h = tape.group_norm(x, groups, eps)?;
    let h = tape.mul_row(h, scale)?;
    tape.add_row(h, bias)
}

/// Per-timestep normalization over channels followed by an affine transform.
pub fn layer_norm(tape: &mut Tape, x: Var, scale: Var, bias: Var, eps: f64) -> Result<Var> {
    let h = tape.layer_norm(x, eps);
    let h = tape.mul_row(h, scale)?;
    tape.add_row(h, bias)
}

#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub groups: usize,
    pub scale: ParamId,
    pub bias: ParamId,
}

impl GroupNorm {
    pub fn new(b: &mut ParamBuilder, dim: usize, groups: usize) -> Result<Self> {
        if groups == 0 || dim % groups != 0 {
            return Err(Error::Config(format!(
                "GroupNorm: {dim} channels not divisible into {groups} groups"
            )));
        }
        Ok(Self {
            groups,
            scale: b.constant("scale", vec![dim], 1.0)?,
            bias: b.constant("bias", vec![dim], 0.0)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, p: &[Var], x: Var) -> Result<Var> {
        group_norm(
            tape,
            x,
            self.groups,
            var(p, self.scale),
            var(p, self.bias),
            NORM_EPS,
        )
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub scale: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(b: &mut ParamBuilder, dim: usize) -> Result<Self> {
        Ok(Self {
            scale: b.constant("scale", vec![dim], 1.0)?,
            bias: b.constant("bias", vec![dim], 0.0)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, p: &[Var], x: Var) -> Result<Var> {
        layer_norm(tape, x, var(p, self.scale), var(p, self.bias), NORM_EPS)
    }
}

/// Two linear maps with a ReLU in between; output width equals input width.
#[derive(Debug, Clone)]
pub struct Ffn {
    pub up: Linear,
    pub down: Linear,
}

impl Ffn {
    pub fn new(b: &mut ParamBuilder, dim: usize, hidden: usize) -> Result<Self> {
        if hidden == 0 {
            return Err(Error::Config("FFN hidden width must be >= 1".into()));
        }
        Ok(Self {
            up: Linear::new(&mut b.scope("up"), dim, hidden)?,
            down: Linear::new(&mut b.scope("down"), hidden, dim)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, p: &[Var], x: Var) -> Result<Var> {
        let h = self.up.forward(tape, p, x)?;
        let h = tape.relu(h);
        self.down.forward(tape, p, h)
    }
}

/// Functional FFN over explicit weight vars.
pub fn ffn(
    tape: &mut Tape,
    x: Var,
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
) -> Result<Var> {
    let h = tape.matmul(x, w1)?;
    let h = tape.add_row(h, b1)?;
    let h = tape.relu(h);
    let h = tape.matmul(h, w2)?;
    tape.add_row(h, b2)
}

/// Conv (kernel 3, stride 1, same padding) + GroupNorm + ReLU.
#[derive(Debug, Clone)]
pub struct Cgr {
    pub conv: Conv1d,
    pub norm: GroupNorm,
}

impl Cgr {
    pub fn new(b: &mut ParamBuilder, din: usize, dout: usize) -> Result<Self> {
        Ok(Self {
            conv: Conv1d::same(&mut b.scope("conv"), din, dout, 3)?,
            norm: GroupNorm::new(&mut b.scope("norm"), dout, default_groups(dout))?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, p: &[Var], x: Var) -> Result<Var> {
        let h = self.conv.forward(tape, p, x)?;
        let h = self.norm.forward(tape, p, h)?;
        Ok(tape.relu(h))
    }
}

/// Stack of CGR layers applied in sequence.
#[derive(Debug, Clone)]
pub struct CgrStack {
    pub layers: Vec<Cgr>,
}

impl CgrStack {
    pub fn new(b: &mut ParamBuilder, din: usize, dim: usize, depth: usize) -> Result<Self> {
        let layers = (0..depth)
            .map(|i| Cgr::new(&mut b.scope(&i.to_string()), if i == 0 { din } else { dim }, dim))
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn forward(&self, tape: &mut Tape, p: &[Var], mut x: Var) -> Result<Var> {
        for l in &self.layers {
            x = l.forward(tape, p, x)?;
        }
        Ok(x)
    }
}
