//! Tape-style reverse-mode automatic differentiation.
//!
//! A [`Graph`] owns every intermediate value produced during a forward pass.
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order and [`Graph::backward`] simply walks it in reverse.

use crate::error::{MimError, Result};
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub const LAYERNORM_EPS: f64 = 1e-5;
pub const L2_NORM_EPS: f64 = 1e-12;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Softmax { x: Var, axis: usize },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Gelu(Var),
    Sigmoid(Var),
    MeanAxis { x: Var, axis: usize },
    Sum(Var),
    Mean(Var),
    Concat { parts: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    GatherRows { x: Var, rows: Vec<usize> },
    Index { x: Var, at: usize },
    L2Normalize { x: Var, norms: Vec<f64> },
    SumNormalize { x: Var, total: f64 },
    Conv2d { x: Var, kernel: Var },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | AddRow(a, b) | MulRow(a, b) | ScaleBy(a, b)
            | MatMul(a, b) => vec![*a, *b],
            Scale(a, _) | Transpose(a) | Reshape(a) | Gelu(a) | Sigmoid(a) | Sum(a) | Mean(a) => {
                vec![*a]
            }
            Softmax { x, .. }
            | MeanAxis { x, .. }
            | Slice { x, .. }
            | GatherRows { x, .. }
            | Index { x, .. }
            | L2Normalize { x, .. }
            | SumNormalize { x, .. } => vec![*x],
            LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Concat { parts, .. } => parts.clone(),
            Conv2d { x, kernel } => vec![*x, *kernel],
        }
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

/// Splits `shape` around `axis` into `(outer, extent, inner)` block sizes.
fn axis_blocks(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Row-major `[m,k] x [k,n]` product accumulated into `out`.
fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

fn transpose_data(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = x[i * cols + j];
        }
    }
    out
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let th = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Computation graph recording a single forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    requires: Vec<bool>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        let requires = match &op {
            Op::Leaf => value.requires_grad(),
            other => other.inputs().iter().any(|v| self.requires[v.0]),
        };
        let mut value = value;
        value.set_requires_grad(requires);
        self.nodes.push(Node { op, value });
        self.requires.push(requires);
        Var(self.nodes.len() - 1)
    }

    /// Inserts a leaf. Its gradient is tracked iff `requires_grad`.
    pub fn leaf(&mut self, mut value: Tensor, requires_grad: bool) -> Var {
        value.zero_grad();
        value.set_requires_grad(requires_grad);
        self.push(Op::Leaf, value)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.requires[v.0]
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(MimError::dim(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(self.shape(a).to_vec(), data).expect("shape preserved")
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let data = self.data(a).iter().map(|&x| f(x)).collect();
        Tensor::new(self.shape(a).to_vec(), data).expect("shape preserved")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push(Op::Add(a, b), out))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_with(a, b, |x, y| x - y);
        Ok(self.push(Op::Sub(a, b), out))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push(Op::Mul(a, b), out))
    }

    fn row_operand(&self, op: &'static str, x: Var, row: Var) -> Result<usize> {
        let d = *self.shape(x).last().expect("rank >= 1");
        if self.value(row).numel() != d {
            return Err(MimError::dim(
                op,
                format!("row operand {:?} does not match last axis of {:?}", self.shape(row), self.shape(x)),
            ));
        }
        Ok(d)
    }

    /// `x[..., d] + b[d]`, broadcasting `b` over every leading index.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let d = self.row_operand("add_row", x, b)?;
        let bias = self.data(b);
        let data = self.data(x).iter().enumerate().map(|(i, &v)| v + bias[i % d]).collect();
        let out = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push(Op::AddRow(x, b), out))
    }

    /// `x[..., d] * s[d]`, broadcasting `s` over every leading index.
    pub fn mul_row(&mut self, x: Var, s: Var) -> Result<Var> {
        let d = self.row_operand("mul_row", x, s)?;
        let scale = self.data(s);
        let data = self.data(x).iter().enumerate().map(|(i, &v)| v * scale[i % d]).collect();
        let out = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push(Op::MulRow(x, s), out))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.map(x, |v| v * c);
        self.push(Op::Scale(x, c), out)
    }

    /// Multiplies every element of `x` by the single element of `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(MimError::dim("scale_by", format!("scalar expected, got {:?}", self.shape(s))));
        }
        let c = self.data(s)[0];
        let out = self.map(x, |v| v * c);
        Ok(self.push(Op::ScaleBy(x, s), out))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(MimError::dim("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        matmul_into(self.data(a), self.data(b), &mut out, m, k, n);
        let out = Tensor::new(vec![m, n], out)?;
        Ok(self.push(Op::MatMul(a, b), out))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(MimError::dim("transpose", format!("rank-2 tensor expected, got {s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        let out = Tensor::new(vec![c, r], transpose_data(self.data(x), r, c))?;
        Ok(self.push(Op::Transpose(x), out))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshaped(shape)?;
        Ok(self.push(Op::Reshape(x), out))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(MimError::dim("softmax", format!("axis {axis} out of range for {shape:?}")));
        }
        let (outer, n, inner) = axis_blocks(&shape, axis);
        let src = self.data(x);
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * n * inner + j * inner + i;
                let max = (0..n).map(|j| src[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..n {
                    let e = (src[at(j)] - max).exp();
                    out[at(j)] = e;
                    total += e;
                }
                for j in 0..n {
                    out[at(j)] /= total;
                }
            }
        }
        let out = Tensor::new(shape, out)?;
        Ok(self.push(Op::Softmax { x, axis }, out))
    }

    /// Normalizes over the last axis with `LAYERNORM_EPS` inside the root, then applies `gain`/`bias`.
    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().expect("rank >= 1");
        if self.value(gain).numel() != d || self.value(bias).numel() != d {
            return Err(MimError::dim(
                "layernorm",
                format!("input {shape:?} with gain {:?} and bias {:?}", self.shape(gain), self.shape(bias)),
            ));
        }
        let src = self.data(x);
        let (g, b) = (self.data(gain), self.data(bias));
        let rows = src.len() / d;
        let mut xhat = vec![0.0; src.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + LAYERNORM_EPS).sqrt();
            rstd[r] = inv;
            for j in 0..d {
                let h = (row[j] - mean) * inv;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let out = Tensor::new(shape, out)?;
        Ok(self.push(Op::LayerNorm { x, gain, bias, xhat, rstd }, out))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.map(x, gelu);
        self.push(Op::Gelu(x), out)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.map(x, sigmoid);
        self.push(Op::Sigmoid(x), out)
    }

    /// Mean over `axis`, keeping it as an extent-1 axis.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(MimError::dim("mean_axis", format!("axis {axis} out of range for {shape:?}")));
        }
        let (outer, n, inner) = axis_blocks(&shape, axis);
        let src = self.data(x);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                for i in 0..inner {
                    out[o * inner + i] += src[o * n * inner + j * inner + i];
                }
            }
        }
        out.iter_mut().for_each(|v| *v /= n as f64);
        let mut out_shape = shape;
        out_shape[axis] = 1;
        let out = Tensor::new(out_shape, out)?;
        Ok(self.push(Op::MeanAxis { x, axis }, out))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        self.push(Op::Sum(x), Tensor::scalar(s))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.data(x).iter().sum::<f64>() / n;
        self.push(Op::Mean(x), Tensor::scalar(s))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| MimError::dim("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(MimError::dim("concat", format!("axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(MimError::dim("concat", format!("{base:?} vs {s:?} along axis {axis}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_blocks(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let n = self.shape(p)[axis];
                out.extend_from_slice(&self.data(p)[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let out = Tensor::new(shape, out)?;
        Ok(self.push(Op::Concat { parts: parts.to_vec(), axis }, out))
    }

    /// Extracts `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(MimError::dim(
                "slice",
                format!("[{start}, {}) along axis {axis} of {shape:?}", start + len),
            ));
        }
        let (outer, n, inner) = axis_blocks(&shape, axis);
        let src = self.data(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = o * n * inner + start * inner;
            out.extend_from_slice(&src[from..from + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let out = Tensor::new(out_shape, out)?;
        Ok(self.push(Op::Slice { x, axis, start }, out))
    }

    /// Splits `x` along `axis` into consecutive pieces of the given extents.
    pub fn split(&mut self, x: Var, axis: usize, extents: &[usize]) -> Result<Vec<Var>> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || extents.iter().sum::<usize>() != shape[axis] {
            return Err(MimError::dim(
                "split",
                format!("extents {extents:?} do not tile axis {axis} of {shape:?}"),
            ));
        }
        let mut start = 0;
        let mut out = Vec::with_capacity(extents.len());
        for &len in extents {
            out.push(self.slice(x, axis, start, len)?);
            start += len;
        }
        Ok(out)
    }

    /// Output row `i` is input row `rows[i]` of a rank-2 tensor.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 || rows.is_empty() || rows.iter().any(|&r| r >= shape[0]) {
            return Err(MimError::dim("gather_rows", format!("rows {rows:?} from {shape:?}")));
        }
        let c = shape[1];
        let src = self.data(x);
        let mut out = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            out.extend_from_slice(&src[r * c..(r + 1) * c]);
        }
        let out = Tensor::new(vec![rows.len(), c], out)?;
        Ok(self.push(Op::GatherRows { x, rows: rows.to_vec() }, out))
    }

    /// The flat element `at` of `x` as a one-element tensor.
    pub fn index(&mut self, x: Var, at: usize) -> Result<Var> {
        let n = self.value(x).numel();
        if at >= n {
            return Err(MimError::dim("index", format!("element {at} of {n}")));
        }
        let v = self.data(x)[at];
        Ok(self.push(Op::Index { x, at }, Tensor::scalar(v)))
    }

    /// Scales each last-axis row to unit L2 norm (`L2_NORM_EPS` added under the root).
    pub fn l2_normalize(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().expect("rank >= 1");
        let src = self.data(x);
        let rows = src.len() / d;
        let mut norms = Vec::with_capacity(rows);
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let norm = (row.iter().map(|v| v * v).sum::<f64>() + L2_NORM_EPS).sqrt();
            norms.push(norm);
            for j in 0..d {
                out[r * d + j] = row[j] / norm;
            }
        }
        let out = Tensor::new(shape, out).expect("shape preserved");
        self.push(Op::L2Normalize { x, norms }, out)
    }

    /// Divides every element by the sum of all elements.
    pub fn sum_normalize(&mut self, x: Var) -> Result<Var> {
        let total: f64 = self.data(x).iter().sum();
        if total == 0.0 || !total.is_finite() {
            return Err(MimError::Numerical {
                step: 0,
                detail: format!("cannot normalize by sum {total}"),
            });
        }
        let out = self.map(x, |v| v / total);
        Ok(self.push(Op::SumNormalize { x, total }, out))
    }

    /// Depthwise 2-D convolution of `x[C,H,W]` with one odd `kernel[kh,kw]`
    /// shared across channels; borders replicate the nearest edge pixel.
    pub fn conv2d(&mut self, x: Var, kernel: Var) -> Result<Var> {
        let (xs, ks) = (self.shape(x).to_vec(), self.shape(kernel).to_vec());
        if xs.len() != 3 || ks.len() != 2 || ks[0] % 2 == 0 || ks[1] % 2 == 0 {
            return Err(MimError::dim("conv2d", format!("input {xs:?} with kernel {ks:?}")));
        }
        let out = conv2d_forward(self.data(x), self.data(kernel), &xs, &ks);
        let out = Tensor::new(xs, out)?;
        Ok(self.push(Op::Conv2d { x, kernel }, out))
    }

    /// Reverse pass from a one-element `loss`. Gradients are added into the
    /// grad slot of every node that requires them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(MimError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.requires[loss.0] {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.requires[id] {
                continue;
            }
            self.propagate(id, &g, &mut grads);
            self.nodes[id].value.accumulate_grad(&g);
        }
        Ok(())
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let mut acc = |v: Var, delta: Vec<f64>| {
            if !self.requires[v.0] {
                return;
            }
            match &mut grads[v.0] {
                Some(slot) => slot.iter_mut().zip(&delta).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (da, db) = (self.data(*a), self.data(*b));
                acc(*a, g.iter().zip(db).map(|(g, y)| g * y).collect());
                acc(*b, g.iter().zip(da).map(|(g, x)| g * x).collect());
            }
            Op::AddRow(x, b) => {
                let d = self.value(*b).numel();
                let mut gb = vec![0.0; d];
                g.iter().enumerate().for_each(|(i, v)| gb[i % d] += v);
                acc(*x, g.to_vec());
                acc(*b, gb);
            }
            Op::MulRow(x, s) => {
                let d = self.value(*s).numel();
                let (dx, ds) = (self.data(*x), self.data(*s));
                let mut gs = vec![0.0; d];
                let mut gx = vec![0.0; g.len()];
                for i in 0..g.len() {
                    gs[i % d] += g[i] * dx[i];
                    gx[i] = g[i] * ds[i % d];
                }
                acc(*x, gx);
                acc(*s, gs);
            }
            Op::Scale(x, c) => acc(*x, g.iter().map(|v| v * c).collect()),
            Op::ScaleBy(x, s) => {
                let c = self.data(*s)[0];
                let dot = g.iter().zip(self.data(*x)).map(|(g, x)| g * x).sum();
                acc(*x, g.iter().map(|v| v * c).collect());
                acc(*s, vec![dot]);
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.requires[a.0] {
                    let bt = transpose_data(self.data(*b), k, n);
                    let mut ga = vec![0.0; m * k];
                    matmul_into(g, &bt, &mut ga, m, n, k);
                    acc(*a, ga);
                }
                if self.requires[b.0] {
                    let at = transpose_data(self.data(*a), m, k);
                    let mut gb = vec![0.0; k * n];
                    matmul_into(&at, g, &mut gb, k, m, n);
                    acc(*b, gb);
                }
            }
            Op::Transpose(x) => {
                let s = node.value.shape();
                acc(*x, transpose_data(g, s[0], s[1]));
            }
            Op::Reshape(x) => acc(*x, g.to_vec()),
            Op::Softmax { x, axis } => {
                let y = node.value.data();
                let (outer, n, inner) = axis_blocks(node.value.shape(), *axis);
                let mut gx = vec![0.0; g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| o * n * inner + j * inner + i;
                        let dot: f64 = (0..n).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..n {
                            gx[at(j)] = y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
                acc(*x, gx);
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let gn = self.data(*gain);
                let d = gn.len();
                let rows = g.len() / d;
                let mut ggain = vec![0.0; d];
                let mut gbias = vec![0.0; d];
                let mut gx = vec![0.0; g.len()];
                for r in 0..rows {
                    let (gr, hr) = (&g[r * d..(r + 1) * d], &xhat[r * d..(r + 1) * d]);
                    let mut mean_dh = 0.0;
                    let mut mean_dh_h = 0.0;
                    for j in 0..d {
                        ggain[j] += gr[j] * hr[j];
                        gbias[j] += gr[j];
                        let dh = gr[j] * gn[j];
                        mean_dh += dh;
                        mean_dh_h += dh * hr[j];
                    }
                    mean_dh /= d as f64;
                    mean_dh_h /= d as f64;
                    for j in 0..d {
                        let dh = gr[j] * gn[j];
                        gx[r * d + j] = rstd[r] * (dh - mean_dh - hr[j] * mean_dh_h);
                    }
                }
                acc(*x, gx);
                acc(*gain, ggain);
                acc(*bias, gbias);
            }
            Op::Gelu(x) => {
                acc(*x, g.iter().zip(self.data(*x)).map(|(g, &v)| g * gelu_grad(v)).collect())
            }
            Op::Sigmoid(x) => {
                acc(*x, g.iter().zip(node.value.data()).map(|(g, y)| g * y * (1.0 - y)).collect())
            }
            Op::MeanAxis { x, axis } => {
                let shape = self.shape(*x);
                let (outer, n, inner) = axis_blocks(shape, *axis);
                let mut gx = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    for j in 0..n {
                        for i in 0..inner {
                            gx[o * n * inner + j * inner + i] = g[o * inner + i] / n as f64;
                        }
                    }
                }
                acc(*x, gx);
            }
            Op::Sum(x) => acc(*x, vec![g[0]; self.value(*x).numel()]),
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                acc(*x, vec![g[0] / n as f64; n]);
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = axis_blocks(node.value.shape(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let n = self.shape(p)[*axis];
                    let mut gp = Vec::with_capacity(outer * n * inner);
                    for o in 0..outer {
                        let from = o * total * inner + offset * inner;
                        gp.extend_from_slice(&g[from..from + n * inner]);
                    }
                    offset += n;
                    acc(p, gp);
                }
            }
            Op::Slice { x, axis, start } => {
                let shape = self.shape(*x);
                let (outer, n, inner) = axis_blocks(shape, *axis);
                let len = node.value.shape()[*axis];
                let mut gx = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    let to = o * n * inner + start * inner;
                    gx[to..to + len * inner]
                        .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                acc(*x, gx);
            }
            Op::GatherRows { x, rows } => {
                let c = self.shape(*x)[1];
                let mut gx = vec![0.0; self.value(*x).numel()];
                for (i, &r) in rows.iter().enumerate() {
                    for j in 0..c {
                        gx[r * c + j] += g[i * c + j];
                    }
                }
                acc(*x, gx);
            }
            Op::Index { x, at } => {
                let mut gx = vec![0.0; self.value(*x).numel()];
                gx[*at] = g[0];
                acc(*x, gx);
            }
            Op::L2Normalize { x, norms } => {
                let y = node.value.data();
                let d = *node.value.shape().last().expect("rank >= 1");
                let mut gx = vec![0.0; g.len()];
                for (r, norm) in norms.iter().enumerate() {
                    let span = r * d..(r + 1) * d;
                    let dot: f64 = g[span.clone()].iter().zip(&y[span.clone()]).map(|(a, b)| a * b).sum();
                    for j in span {
                        gx[j] = (g[j] - y[j] * dot) / norm;
                    }
                }
                acc(*x, gx);
            }
            Op::SumNormalize { x, total } => {
                let y = node.value.data();
                let dot: f64 = g.iter().zip(y).map(|(a, b)| a * b).sum();
                acc(*x, g.iter().map(|v| (v - dot) / total).collect());
            }
            Op::Conv2d { x, kernel } => {
                let (xs, ks) = (self.shape(*x), self.shape(*kernel));
                let (gx, gk) = conv2d_backward(self.data(*x), self.data(*kernel), g, xs, ks);
                acc(*x, gx);
                acc(*kernel, gk);
            }
        }
    }
}

fn conv_taps(xs: &[usize], ks: &[usize]) -> impl Iterator<Item = (usize, usize, usize)> {
    let (c, h, w) = (xs[0], xs[1], xs[2]);
    let (kh, kw) = (ks[0], ks[1]);
    let (ph, pw) = ((kh / 2) as isize, (kw / 2) as isize);
    (0..c).flat_map(move |ch| {
        (0..h).flat_map(move |i| {
            (0..w).flat_map(move |j| {
                (0..kh).flat_map(move |a| {
                    (0..kw).map(move |b| {
                        let si = (i as isize + a as isize - ph).clamp(0, h as isize - 1) as usize;
                        let sj = (j as isize + b as isize - pw).clamp(0, w as isize - 1) as usize;
                        let out = (ch * h + i) * w + j;
                        let src = (ch * h + si) * w + sj;
                        (out, src, a * kw + b)
                    })
                })
            })
        })
    })
}

/// Tensor-level form of [`Graph::conv2d`].
pub fn conv2d(x: &Tensor, kernel: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let (xv, kv) = (g.constant(x.clone()), g.constant(kernel.clone()));
    let y = g.conv2d(xv, kv)?;
    Ok(g.value(y).clone())
}

fn conv2d_forward(x: &[f64], k: &[f64], xs: &[usize], ks: &[usize]) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (o, s, t) in conv_taps(xs, ks) {
        out[o] += k[t] * x[s];
    }
    out
}

fn conv2d_backward(x: &[f64], k: &[f64], g: &[f64], xs: &[usize], ks: &[usize]) -> (Vec<f64>, Vec<f64>) {
    let mut gx = vec![0.0; x.len()];
    let mut gk = vec![0.0; k.len()];
    for (o, s, t) in conv_taps(xs, ks) {
        gx[s] += g[o] * k[t];
        gk[t] += g[o] * x[s];
    }
    (gx, gk)
}

/// Indices of the `k` largest entries in descending order, ties broken by lowest index.
pub fn topk(values: &[f64], k: usize) -> Result<(Vec<usize>, Vec<f64>)> {
    if k == 0 || k > values.len() {
        return Err(MimError::Parameter(format!(
            "top-k needs 1 <= k <= {}, got k = {k}",
            values.len()
        )));
    }
    let mut order: Vec<usize> = (0..values.len()).collect();
    // Stable sort keeps equal values in index order.
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    order.truncate(k);
    let picked = order.iter().map(|&i| values[i]).collect();
    Ok((order, picked))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t2(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_identity_and_permutation() {
        let mut g = Graph::new();
        let b = t2(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]]);
        let i3 = g.constant(Tensor::eye(3));
        let bv = g.constant(b.clone());
        let y = g.matmul(i3, bv).unwrap();
        assert_eq!(g.value(y), &b);

        let a = g.constant(t2(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let p = g.constant(t2(&[&[0.0, 1.0], &[1.0, 0.0]]));
        let y = g.matmul(a, p).unwrap();
        assert_eq!(g.data(y), &[2.0, 1.0, 4.0, 3.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = Tensor::uniform(&[3, 4], -2.0, 2.0, &mut rng);
        let b = Tensor::uniform(&[4, 2], -2.0, 2.0, &mut rng);
        let mut expected = [0.0; 6];
        for i in 0..3 {
            for j in 0..2 {
                for p in 0..4 {
                    expected[i * 2 + j] += a.get(&[i, p]) * b.get(&[p, j]);
                }
            }
        }
        let mut g = Graph::new();
        let (av, bv) = (g.constant(a), g.constant(b));
        let y = g.matmul(av, bv).unwrap();
        for (got, want) in g.data(y).iter().zip(expected) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let msg = g.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3] x [2, 3]"), "{msg}");
    }

    #[test]
    fn softmax_uniform_and_stabilized() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec(vec![0.0; 4]));
        let y = g.softmax(x, 0).unwrap();
        assert_eq!(g.data(y), &[0.25; 4]);
        let x = g.constant(Tensor::from_vec(vec![1000.0, 0.0]));
        let y = g.softmax(x, 0).unwrap();
        assert_eq!(g.data(y)[0], 1.0);
        assert!(g.data(y)[1] < 1e-300);
        assert!(g.softmax(x, 1).is_err());
    }

    #[test]
    fn softmax_over_leading_axis() {
        let mut g = Graph::new();
        let x = g.constant(t2(&[&[0.0, 1.0], &[0.0, 3.0]]));
        let y = g.softmax(x, 0).unwrap();
        let d = g.data(y);
        assert_eq!(d[0], 0.5);
        assert_eq!(d[2], 0.5);
        assert!((d[1] + d[3] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn topk_cases() {
        assert_eq!(topk(&[0.1, 0.7, 0.2], 1).unwrap().0, vec![1]);
        assert_eq!(topk(&[0.1, 0.7, 0.2], 3).unwrap().0, vec![1, 2, 0]);
        assert_eq!(topk(&[0.5, 0.5, 0.1], 1).unwrap().0, vec![0]);
        assert_eq!(topk(&[0.5, 0.5, 0.5], 2).unwrap().0, vec![0, 1]);
        assert!(matches!(topk(&[1.0], 0), Err(MimError::Parameter(_))));
        assert!(matches!(topk(&[1.0], 2), Err(MimError::Parameter(_))));
    }

    #[test]
    fn layernorm_cases() {
        let mut g = Graph::new();
        let gain = g.constant(Tensor::full(&[3], 1.0));
        let bias = g.constant(Tensor::zeros(&[3]));
        let x = g.constant(Tensor::full(&[3], 4.2));
        let y = g.layernorm(x, gain, bias).unwrap();
        assert!(g.data(y).iter().all(|&v| v == 0.0));

        let gain = g.constant(Tensor::full(&[2], 1.0));
        let bias = g.constant(Tensor::zeros(&[2]));
        let x = g.constant(Tensor::from_vec(vec![1.0, 3.0]));
        let y = g.layernorm(x, gain, bias).unwrap();
        // mean 2, variance 1: (x - 2) / sqrt(1 + 1e-5)
        let expect = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((g.data(y)[0] + expect).abs() < 1e-12);
        assert!((g.data(y)[1] - 1.0).abs() < 1e-4);

        let bad = g.constant(Tensor::zeros(&[3]));
        assert!(g.layernorm(x, bad, bias).is_err());
    }

    #[test]
    fn backward_basic_rules() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_vec(vec![1.0, 2.0]));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0]);

        let mut g = Graph::new();
        let x = g.param(Tensor::from_vec(vec![1.0, 2.0]));
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(&[2]));
        assert!(matches!(g.backward(x), Err(MimError::Contract(_))));
    }

    #[test]
    fn fan_out_accumulates() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_vec(vec![3.0]));
        let a = g.scale(x, 2.0);
        let b = g.scale(x, 5.0);
        let c = g.add(a, b).unwrap();
        let s = g.sum(c);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[7.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_vec(vec![1.0]));
        let c = g.constant(Tensor::from_vec(vec![2.0]));
        let y = g.mul(x, c).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert!(g.grad(c).is_none());
        assert_eq!(g.grad(x).unwrap(), &[2.0]);
    }

    #[test]
    fn concat_split_roundtrip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = Graph::new();
        let parts: Vec<Var> = [2, 4, 3]
            .iter()
            .map(|&n| g.constant(Tensor::randn(&[n, 5], 1.0, &mut rng)))
            .collect();
        let cat = g.concat(&parts, 0).unwrap();
        let back = g.split(cat, 0, &[2, 4, 3]).unwrap();
        for (p, b) in parts.iter().zip(back) {
            assert_eq!(g.value(*p).data(), g.value(b).data());
        }
        let cols: Vec<Var> = [1, 3]
            .iter()
            .map(|&n| g.constant(Tensor::randn(&[2, n], 1.0, &mut rng)))
            .collect();
        let cat = g.concat(&cols, 1).unwrap();
        let back = g.split(cat, 1, &[1, 3]).unwrap();
        for (p, b) in cols.iter().zip(back) {
            assert_eq!(g.value(*p), g.value(b));
        }
        assert!(g.split(cat, 1, &[1, 2]).is_err());
    }

    #[test]
    fn conv_with_delta_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let img = Tensor::uniform(&[1, 5, 5], 0.0, 1.0, &mut rng);
        let mut k = Tensor::zeros(&[3, 3]);
        k.data_mut()[4] = 1.0;
        let mut g = Graph::new();
        let (x, kv) = (g.constant(img.clone()), g.constant(k));
        let y = g.conv2d(x, kv).unwrap();
        assert_eq!(g.value(y), &img);
    }
}
