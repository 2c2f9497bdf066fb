//! Reverse-mode automatic differentiation over a recorded computation tape.
//!
//! Every operation appends a node holding its forward value and enough
//! context to compute vector-Jacobian products. [`Tape::backward`] consumes
//! the tape, so the graph is freed once gradients have been extracted.
//!
//! Tensors on the tape are treated as matrices: the first dimension is the
//! row (time) axis and the remaining dimensions are flattened into columns.

use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::{ModuleParams, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Reduction used by sliding-window aggregation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WindowReduce {
    Max,
    Min,
    Mean,
    /// Per-channel `max - min` over the window.
    Range,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Softmax(Var),
    Conv1d {
        x: Var,
        kernel: Var,
        stride: usize,
        padding: usize,
    },
    GroupNorm {
        x: Var,
        groups: usize,
        rstd: Vec<f64>,
    },
    LayerNorm {
        x: Var,
        rstd: Vec<f64>,
    },
    /// Linear map `out[o] += w * x[i]` given as a sparse list of `(o, i, w)`.
    Gather {
        x: Var,
        entries: Vec<(usize, usize, f64)>,
    },
    RowL1(Var),
    ConcatCols(Var, Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    Sum(Var),
    /// Scalar whose gradient with respect to `x` was computed during forward.
    Fused {
        x: Var,
        grad: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recorded computation graph.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by leaf [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of a leaf that requires grad, if it participated in the loss.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, or zeros of length `len` when `v` did not contribute.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<f64> {
        self.get(v).map_or_else(|| vec![0.0; len], <[f64]>::to_vec)
    }

    /// Write gradients of bound parameters into their `grad` fields,
    /// accumulating into any gradient already present.
    pub fn accumulate_into(&self, params: &mut ModuleParams, bound: &[Var]) {
        for (tensor, &v) in params.tensors_mut().iter_mut().zip(bound) {
            if !tensor.requires_grad {
                continue;
            }
            let n = tensor.numel();
            let g = tensor.grad.get_or_insert_with(|| vec![0.0; n]);
            if let Some(src) = self.get(v) {
                for (d, s) in g.iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
    }
}

fn shape_err(op: &str, detail: String) -> Error {
    Error::Shape(format!("{op}: {detail}"))
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn rc(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn out(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        Tensor::new(shape, data).expect("internal shape bookkeeping")
    }

    /// Add a leaf; it is differentiated when `tensor.requires_grad` is set.
    pub fn leaf(&mut self, mut tensor: Tensor) -> Var {
        let needs_grad = tensor.requires_grad;
        tensor.grad = None;
        self.nodes.push(Node {
            value: tensor,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that is never differentiated.
    pub fn constant(&mut self, mut tensor: Tensor) -> Var {
        tensor.requires_grad = false;
        self.leaf(tensor)
    }

    /// Bind every parameter as a leaf, returning vars in [`ParamId`](crate::tensor::ParamId) order.
    pub fn bind(&mut self, params: &ModuleParams) -> Vec<Var> {
        params.tensors().iter().map(|t| self.leaf(t.clone())).collect()
    }

    fn same_shape(&self, op: &str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn zip_map(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let shape = va.shape().to_vec();
        self.push(Self::out(shape, data), op, &[a, b])
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let va = self.value(a);
        let data = va.data().iter().map(|&x| f(x)).collect();
        let shape = va.shape().to_vec();
        self.push(Self::out(shape, data), op, &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_map(a, b, |x, y| x + y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_map(a, b, |x, y| x - y, Op::Sub(a, b)))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_map(a, b, |x, y| x * y, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x * c, Op::Scale(a, c))
    }

    fn row_op(&mut self, name: &str, a: Var, row: Var, mul: bool) -> Result<Var> {
        let (m, n) = self.rc(a);
        let r = self.value(row);
        if r.numel() != n {
            return Err(shape_err(
                name,
                format!("row of {} elements against {m}x{n}", r.numel()),
            ));
        }
        let rd = r.data();
        let mut data = self.value(a).data().to_vec();
        for chunk in data.chunks_exact_mut(n.max(1)) {
            for (x, &b) in chunk.iter_mut().zip(rd) {
                if mul {
                    *x *= b;
                } else {
                    *x += b;
                }
            }
        }
        let shape = self.shape(a).to_vec();
        let op = if mul {
            Op::MulRow(a, row)
        } else {
            Op::AddRow(a, row)
        };
        Ok(self.push(Self::out(shape, data), op, &[a, row]))
    }

    /// Broadcast-add a length-`cols` vector to every row.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_op("add_row", a, row, false)
    }

    /// Broadcast-multiply every row by a length-`cols` vector.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_op("mul_row", a, row, true)
    }

    /// `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.rc(a);
        let (k2, n) = self.rc(b);
        if k != k2 {
            return Err(shape_err("matmul", format!("{m}x{k} · {k2}x{n}")));
        }
        let mut out = vec![0.0; m * n];
        kernels::mm(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        Ok(self.push(Self::out(vec![m, n], out), Op::MatMul(a, b), &[a, b]))
    }

    /// `a[m×k] · b[n×k]ᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.rc(a);
        let (n, k2) = self.rc(b);
        if k != k2 {
            return Err(shape_err("matmul_nt", format!("{m}x{k} · ({n}x{k2})ᵀ")));
        }
        let mut out = vec![0.0; m * n];
        kernels::mm_nt(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        Ok(self.push(Self::out(vec![m, n], out), Op::MatMulNt(a, b), &[a, b]))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, kernels::sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    /// Row-wise softmax over the last (column) axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let (_, n) = self.rc(a);
        let mut data = self.value(a).data().to_vec();
        for row in data.chunks_exact_mut(n.max(1)) {
            kernels::softmax_in_place(row);
        }
        let shape = self.shape(a).to_vec();
        self.push(Self::out(shape, data), Op::Softmax(a), &[a])
    }

    /// Temporal convolution of `x[T×Din]` with `kernel[K×Din×Dout]`.
    pub fn conv1d(&mut self, x: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let (t, din) = self.rc(x);
        let ks = self.shape(kernel).to_vec();
        if ks.len() != 3 || ks[1] != din {
            return Err(shape_err(
                "conv1d",
                format!("kernel {ks:?} against input with {din} channels"),
            ));
        }
        if stride == 0 {
            return Err(Error::Config("conv1d stride must be >= 1".into()));
        }
        let (k, dout) = (ks[0], ks[2]);
        if t + 2 * padding < k {
            return Err(shape_err(
                "conv1d",
                format!("kernel {k} longer than padded input {}", t + 2 * padding),
            ));
        }
        let tout = (t + 2 * padding - k) / stride + 1;
        let xd = self.value(x).data();
        let wd = self.value(kernel).data();
        let mut out = vec![0.0; tout * dout];
        for o in 0..tout {
            let orow = &mut out[o * dout..(o + 1) * dout];
            for kk in 0..k {
                let src = (o * stride + kk) as isize - padding as isize;
                if src < 0 || src as usize >= t {
                    continue;
                }
                let xrow = &xd[src as usize * din..(src as usize + 1) * din];
                for (i, &xv) in xrow.iter().enumerate() {
                    let wrow = &wd[(kk * din + i) * dout..(kk * din + i + 1) * dout];
                    kernels::axpy(xv, wrow, orow);
                }
            }
        }
        Ok(self.push(
            Self::out(vec![tout, dout], out),
            Op::Conv1d {
                x,
                kernel,
                stride,
                padding,
            },
            &[x, kernel],
        ))
    }

    /// Normalize each channel group of `x[T×D]` over time and its channels
    /// (no affine transform).
    pub fn group_norm(&mut self, x: Var, groups: usize, eps: f64) -> Result<Var> {
        let (t, d) = self.rc(x);
        if groups == 0 || d % groups != 0 {
            return Err(Error::Config(format!(
                "group_norm: {d} channels not divisible into {groups} groups"
            )));
        }
        let cg = d / groups;
        let xd = self.value(x).data();
        let mut out = vec![0.0; t * d];
        let mut rstd = vec![0.0; groups];
        let count = (t * cg) as f64;
        for g in 0..groups {
            let cols = g * cg..(g + 1) * cg;
            let mut mean = 0.0;
            for r in 0..t {
                mean += xd[r * d + cols.start..r * d + cols.end].iter().sum::<f64>();
            }
            mean /= count;
            let mut var = 0.0;
            for r in 0..t {
                for &v in &xd[r * d + cols.start..r * d + cols.end] {
                    var += (v - mean) * (v - mean);
                }
            }
            var /= count;
            let rs = kernels::rstd(var, eps);
            rstd[g] = rs;
            for r in 0..t {
                for c in cols.clone() {
                    out[r * d + c] = (xd[r * d + c] - mean) * rs;
                }
            }
        }
        Ok(self.push(
            Self::out(vec![t, d], out),
            Op::GroupNorm { x, groups, rstd },
            &[x],
        ))
    }

    /// Normalize every row of `x` to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Var {
        let (t, d) = self.rc(x);
        let mut out = self.value(x).data().to_vec();
        let mut rstd = vec![0.0; t];
        for (r, row) in out.chunks_exact_mut(d.max(1)).enumerate() {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = kernels::rstd(var, eps);
            rstd[r] = rs;
            for v in row.iter_mut() {
                *v = (*v - mean) * rs;
            }
        }
        let shape = self.shape(x).to_vec();
        self.push(Self::out(shape, out), Op::LayerNorm { x, rstd }, &[x])
    }

    /// Temporal max pooling with `-inf` padding; the gradient is routed to
    /// the arg-max element of every window.
    pub fn max_pool1d(
        &mut self,
        x: Var,
        window: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (t, d) = self.rc(x);
        if window == 0 || stride == 0 {
            return Err(Error::Config("max_pool1d window and stride must be >= 1".into()));
        }
        if window > t + 2 * padding {
            return Err(Error::Invalid(format!(
                "max_pool1d window {window} exceeds input length {t} (padding {padding}); output would be empty"
            )));
        }
        let tout = (t + 2 * padding - window) / stride + 1;
        let xd = self.value(x).data();
        let mut out = vec![f64::NEG_INFINITY; tout * d];
        let mut arg = vec![usize::MAX; tout * d];
        for o in 0..tout {
            for w in 0..window {
                let src = (o * stride + w) as isize - padding as isize;
                if src < 0 || src as usize >= t {
                    continue;
                }
                let s = src as usize;
                for c in 0..d {
                    let v = xd[s * d + c];
                    if v > out[o * d + c] {
                        out[o * d + c] = v;
                        arg[o * d + c] = s * d + c;
                    }
                }
            }
        }
        let entries = arg
            .iter()
            .enumerate()
            .filter(|(_, &i)| i != usize::MAX)
            .map(|(o, &i)| (o, i, 1.0))
            .collect();
        Ok(self.push(Self::out(vec![tout, d], out), Op::Gather { x, entries }, &[x]))
    }

    /// Per-channel sliding-window reduction evaluated at window starts
    /// `0, stride, 2·stride, …`, where a start beyond the last full window
    /// reuses the last full window (replicate padding of the window sequence).
    pub fn window_reduce(
        &mut self,
        x: Var,
        window: usize,
        stride: usize,
        reduce: WindowReduce,
    ) -> Result<Var> {
        let (t, d) = self.rc(x);
        if window == 0 || stride == 0 || window > t {
            return Err(Error::Invalid(format!(
                "window_reduce: window {window} / stride {stride} invalid for length {t}"
            )));
        }
        let tout = t.div_ceil(stride);
        let last = t - window;
        let xd = self.value(x).data();
        let mut out = vec![0.0; tout * d];
        let mut entries = Vec::new();
        for o in 0..tout {
            let start = (o * stride).min(last);
            for c in 0..d {
                let idx = |r: usize| (start + r) * d + c;
                let (mut imax, mut imin) = (idx(0), idx(0));
                for r in 1..window {
                    let i = idx(r);
                    if xd[i] > xd[imax] {
                        imax = i;
                    }
                    if xd[i] < xd[imin] {
                        imin = i;
                    }
                }
                let oi = o * d + c;
                match reduce {
                    WindowReduce::Max => {
                        out[oi] = xd[imax];
                        entries.push((oi, imax, 1.0));
                    }
                    WindowReduce::Min => {
                        out[oi] = xd[imin];
                        entries.push((oi, imin, 1.0));
                    }
                    WindowReduce::Range => {
                        out[oi] = xd[imax] - xd[imin];
                        if imax != imin {
                            entries.push((oi, imax, 1.0));
                            entries.push((oi, imin, -1.0));
                        }
                    }
                    WindowReduce::Mean => {
                        let w = 1.0 / window as f64;
                        for r in 0..window {
                            out[oi] += xd[idx(r)] * w;
                            entries.push((oi, idx(r), w));
                        }
                    }
                }
            }
        }
        Ok(self.push(Self::out(vec![tout, d], out), Op::Gather { x, entries }, &[x]))
    }

    /// Row-wise L1 norm: `[m×n] -> [m×1]`.
    pub fn row_l1(&mut self, a: Var) -> Var {
        let (m, n) = self.rc(a);
        let data = self
            .value(a)
            .data()
            .chunks_exact(n.max(1))
            .map(|r| r.iter().map(|v| v.abs()).sum())
            .collect();
        self.push(Self::out(vec![m, 1], data), Op::RowL1(a), &[a])
    }

    /// Channel-wise concatenation `[T×A] ‖ [T×B] -> [T×(A+B)]`.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ma, na) = self.rc(a);
        let (mb, nb) = self.rc(b);
        if ma != mb {
            return Err(shape_err("concat_cols", format!("{ma} rows vs {mb} rows")));
        }
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(ma * (na + nb));
        for r in 0..ma {
            out.extend_from_slice(&da[r * na..(r + 1) * na]);
            out.extend_from_slice(&db[r * nb..(r + 1) * nb]);
        }
        Ok(self.push(
            Self::out(vec![ma, na + nb], out),
            Op::ConcatCols(a, b),
            &[a, b],
        ))
    }

    /// Columns `start..start+len` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.rc(a);
        if start + len > n {
            return Err(shape_err(
                "slice_cols",
                format!("columns {start}..{} of {n}", start + len),
            ));
        }
        let d = self.value(a).data();
        let mut out = Vec::with_capacity(m * len);
        for r in 0..m {
            out.extend_from_slice(&d[r * n + start..r * n + start + len]);
        }
        Ok(self.push(
            Self::out(vec![m, len], out),
            Op::SliceCols { x: a, start },
            &[a],
        ))
    }

    /// Sum of all elements as a one-element tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Record a scalar `value` of `x` whose gradient `d value / d x` is
    /// already known. Used by the fused loss functions.
    pub fn fused_scalar(&mut self, x: Var, value: f64, grad: Vec<f64>) -> Result<Var> {
        if grad.len() != self.value(x).numel() {
            return Err(shape_err(
                "fused_scalar",
                format!("gradient of {} for input of {}", grad.len(), self.value(x).numel()),
            ));
        }
        Ok(self.push(Tensor::scalar(value), Op::Fused { x, grad }, &[x]))
    }

    /// Reverse pass from a one-element `loss`. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Shape(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let nodes = self.nodes;
        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            backprop(&nodes, id, &g, &mut grads);
        }
        // Only leaves keep their gradient.
        for (slot, node) in grads.iter_mut().zip(&nodes) {
            if !matches!(node.op, Op::Leaf) || !node.needs_grad {
                *slot = None;
            }
        }
        Ok(Gradients { grads })
    }
}

/// Accumulator for the gradient of input `v`; `None` if `v` is not differentiated.
fn slot<'a>(
    nodes: &[Node],
    grads: &'a mut [Option<Vec<f64>>],
    v: Var,
) -> Option<&'a mut Vec<f64>> {
    if !nodes[v.0].needs_grad {
        return None;
    }
    let n = nodes[v.0].value.numel();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
}

fn backprop(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[id];
    let y = node.value.data();
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            for v in [*a, *b] {
                if let Some(da) = slot(nodes, grads, v) {
                    kernels::axpy(1.0, g, da);
                }
            }
        }
        Op::Sub(a, b) => {
            if let Some(da) = slot(nodes, grads, *a) {
                kernels::axpy(1.0, g, da);
            }
            if let Some(db) = slot(nodes, grads, *b) {
                kernels::axpy(-1.0, g, db);
            }
        }
        Op::Mul(a, b) => {
            let (va, vb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
            if let Some(da) = slot(nodes, grads, *a) {
                for ((d, &gi), &bi) in da.iter_mut().zip(g).zip(vb) {
                    *d += gi * bi;
                }
            }
            if let Some(db) = slot(nodes, grads, *b) {
                for ((d, &gi), &ai) in db.iter_mut().zip(g).zip(va) {
                    *d += gi * ai;
                }
            }
        }
        Op::Scale(a, c) => {
            if let Some(da) = slot(nodes, grads, *a) {
                kernels::axpy(*c, g, da);
            }
        }
        Op::AddRow(a, row) => {
            let n = nodes[row.0].value.numel();
            if let Some(da) = slot(nodes, grads, *a) {
                kernels::axpy(1.0, g, da);
            }
            if let Some(dr) = slot(nodes, grads, *row) {
                for grow in g.chunks_exact(n) {
                    kernels::axpy(1.0, grow, dr);
                }
            }
        }
        Op::MulRow(a, row) => {
            let n = nodes[row.0].value.numel();
            let rv = nodes[row.0].value.data();
            let av = nodes[a.0].value.data();
            if let Some(da) = slot(nodes, grads, *a) {
                for (drow, grow) in da.chunks_exact_mut(n).zip(g.chunks_exact(n)) {
                    for ((d, &gi), &r) in drow.iter_mut().zip(grow).zip(rv) {
                        *d += gi * r;
                    }
                }
            }
            if let Some(dr) = slot(nodes, grads, *row) {
                for (grow, arow) in g.chunks_exact(n).zip(av.chunks_exact(n)) {
                    for ((d, &gi), &ai) in dr.iter_mut().zip(grow).zip(arow) {
                        *d += gi * ai;
                    }
                }
            }
        }
        Op::MatMul(a, b) => {
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
            // dA = G Bᵀ ; dB = Aᵀ G
            if let Some(da) = slot(nodes, grads, *a) {
                kernels::mm_nt(g, tb.data(), da, m, n, k);
            }
            if let Some(db) = slot(nodes, grads, *b) {
                kernels::mm_tn(ta.data(), g, db, k, m, n);
            }
        }
        Op::MatMulNt(a, b) => {
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
            // C = A Bᵀ: dA = G B ; dB = Gᵀ A
            if let Some(da) = slot(nodes, grads, *a) {
                kernels::mm(g, tb.data(), da, m, n, k);
            }
            if let Some(db) = slot(nodes, grads, *b) {
                kernels::mm_tn(g, ta.data(), db, n, m, k);
            }
        }
        Op::Relu(a) => {
            let av = nodes[a.0].value.data();
            if let Some(da) = slot(nodes, grads, *a) {
                for ((d, &gi), &x) in da.iter_mut().zip(g).zip(av) {
                    if x > 0.0 {
                        *d += gi;
                    }
                }
            }
        }
        Op::Sigmoid(a) => {
            if let Some(da) = slot(nodes, grads, *a) {
                for ((d, &gi), &s) in da.iter_mut().zip(g).zip(y) {
                    *d += gi * s * (1.0 - s);
                }
            }
        }
        Op::Tanh(a) => {
            if let Some(da) = slot(nodes, grads, *a) {
                for ((d, &gi), &t) in da.iter_mut().zip(g).zip(y) {
                    *d += gi * (1.0 - t * t);
                }
            }
        }
        Op::Softmax(a) => {
            let n = node.value.cols().max(1);
            if let Some(da) = slot(nodes, grads, *a) {
                for ((drow, grow), yrow) in da
                    .chunks_exact_mut(n)
                    .zip(g.chunks_exact(n))
                    .zip(y.chunks_exact(n))
                {
                    let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    for ((d, &gi), &yi) in drow.iter_mut().zip(grow).zip(yrow) {
                        *d += yi * (gi - dot);
                    }
                }
            }
        }
        Op::Conv1d {
            x,
            kernel,
            stride,
            padding,
        } => {
            let tx = &nodes[x.0].value;
            let tk = &nodes[kernel.0].value;
            let (t, din) = (tx.rows(), tx.cols());
            let (k, dout) = (tk.shape()[0], tk.shape()[2]);
            let tout = node.value.rows();
            let (xd, wd) = (tx.data(), tk.data());
            let mut dx = slot(nodes, grads, *x).map(std::mem::take);
            let mut dw = slot(nodes, grads, *kernel).map(std::mem::take);
            for o in 0..tout {
                let grow = &g[o * dout..(o + 1) * dout];
                for kk in 0..k {
                    let src = (o * stride + kk) as isize - *padding as isize;
                    if src < 0 || src as usize >= t {
                        continue;
                    }
                    let s = src as usize;
                    for i in 0..din {
                        let wi = (kk * din + i) * dout;
                        if let Some(dx) = dx.as_mut() {
                            dx[s * din + i] += kernels::dot(grow, &wd[wi..wi + dout]);
                        }
                        if let Some(dw) = dw.as_mut() {
                            kernels::axpy(xd[s * din + i], grow, &mut dw[wi..wi + dout]);
                        }
                    }
                }
            }
            if let Some(dx) = dx {
                grads[x.0] = Some(dx);
            }
            if let Some(dw) = dw {
                grads[kernel.0] = Some(dw);
            }
        }
        Op::GroupNorm { x, groups, rstd } => {
            let (t, d) = (node.value.rows(), node.value.cols());
            let cg = d / groups;
            let count = (t * cg) as f64;
            if let Some(dx) = slot(nodes, grads, *x) {
                for (gi, &rs) in rstd.iter().enumerate() {
                    let cols = gi * cg..(gi + 1) * cg;
                    let (mut mg, mut mgy) = (0.0, 0.0);
                    for r in 0..t {
                        for c in cols.clone() {
                            mg += g[r * d + c];
                            mgy += g[r * d + c] * y[r * d + c];
                        }
                    }
                    mg /= count;
                    mgy /= count;
                    for r in 0..t {
                        for c in cols.clone() {
                            let i = r * d + c;
                            dx[i] += rs * (g[i] - mg - y[i] * mgy);
                        }
                    }
                }
            }
        }
        Op::LayerNorm { x, rstd } => {
            let d = node.value.cols().max(1);
            if let Some(dx) = slot(nodes, grads, *x) {
                for (r, &rs) in rstd.iter().enumerate() {
                    let (grow, yrow) = (&g[r * d..(r + 1) * d], &y[r * d..(r + 1) * d]);
                    let mg = grow.iter().sum::<f64>() / d as f64;
                    let mgy = kernels::dot(grow, yrow) / d as f64;
                    for c in 0..d {
                        dx[r * d + c] += rs * (grow[c] - mg - yrow[c] * mgy);
                    }
                }
            }
        }
        Op::Gather { x, entries } => {
            if let Some(dx) = slot(nodes, grads, *x) {
                for &(o, i, w) in entries {
                    dx[i] += w * g[o];
                }
            }
        }
        Op::RowL1(a) => {
            let ta = &nodes[a.0].value;
            let n = ta.cols().max(1);
            if let Some(da) = slot(nodes, grads, *a) {
                for (r, (drow, arow)) in da
                    .chunks_exact_mut(n)
                    .zip(ta.data().chunks_exact(n))
                    .enumerate()
                {
                    for (d, &v) in drow.iter_mut().zip(arow) {
                        *d += g[r] * kernels::sign(v);
                    }
                }
            }
        }
        Op::ConcatCols(a, b) => {
            let na = nodes[a.0].value.cols();
            let nb = nodes[b.0].value.cols();
            let n = na + nb;
            if let Some(da) = slot(nodes, grads, *a) {
                for (drow, grow) in da.chunks_exact_mut(na.max(1)).zip(g.chunks_exact(n)) {
                    kernels::axpy(1.0, &grow[..na], drow);
                }
            }
            if let Some(db) = slot(nodes, grads, *b) {
                for (drow, grow) in db.chunks_exact_mut(nb.max(1)).zip(g.chunks_exact(n)) {
                    kernels::axpy(1.0, &grow[na..], drow);
                }
            }
        }
        Op::SliceCols { x, start } => {
            let n = nodes[x.0].value.cols();
            let len = node.value.cols();
            if let Some(dx) = slot(nodes, grads, *x) {
                for (drow, grow) in dx.chunks_exact_mut(n).zip(g.chunks_exact(len.max(1))) {
                    kernels::axpy(1.0, grow, &mut drow[*start..*start + len]);
                }
            }
        }
        Op::Sum(a) => {
            if let Some(da) = slot(nodes, grads, *a) {
                for d in da.iter_mut() {
                    *d += g[0];
                }
            }
        }
        Op::Fused { x, grad } => {
            if let Some(dx) = slot(nodes, grads, *x) {
                kernels::axpy(g[0], grad, dx);
            }
        }
    }
}
