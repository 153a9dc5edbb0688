use std::cell::Cell;

use super::dense::{strides_of, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation kinds, used for diagnostics and fault injection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    Constant,
    Add,
    Sub,
    Mul,
    Scale,
    Sigmoid,
    Relu,
    Conv2d,
    MatMul,
    Transpose,
    Reshape,
    Concat,
    Softmax,
    Mean,
    Max,
    Sum,
    Upsample,
    Bce,
}

impl OpKind {
    pub fn parse(name: &str) -> Option<Self> {
        let kind = match name {
            "add" => OpKind::Add,
            "sub" => OpKind::Sub,
            "mul" => OpKind::Mul,
            "scale" => OpKind::Scale,
            "sigmoid" => OpKind::Sigmoid,
            "relu" => OpKind::Relu,
            "conv2d" => OpKind::Conv2d,
            "matmul" => OpKind::MatMul,
            "transpose" => OpKind::Transpose,
            "reshape" => OpKind::Reshape,
            "concat" => OpKind::Concat,
            "softmax" => OpKind::Softmax,
            "mean" => OpKind::Mean,
            "max" => OpKind::Max,
            "sum" => OpKind::Sum,
            "upsample" => OpKind::Upsample,
            "bce" => OpKind::Bce,
            _ => return None,
        };
        Some(kind)
    }
}

thread_local! {
    static FAULT: Cell<Option<OpKind>> = const { Cell::new(None) };
}

/// Corrupts the backward rule of one op kind on the current thread.
///
/// Negative-control hook for the gradient-check suite: every gradient the
/// chosen op sends to its parents is scaled by 1.5.
#[doc(hidden)]
pub fn inject_backward_fault(kind: Option<OpKind>) {
    FAULT.with(|f| f.set(kind));
}

fn fault_scale(kind: OpKind) -> f64 {
    if FAULT.with(|f| f.get()) == Some(kind) {
        1.5
    } else {
        1.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dArgs {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl Default for Conv2dArgs {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: 0,
            dilation: 1,
        }
    }
}

impl Conv2dArgs {
    /// Stride-1 arguments that preserve spatial extent for an odd kernel.
    pub fn same(kernel: usize, dilation: usize) -> Self {
        Self {
            stride: 1,
            padding: dilation * (kernel - 1) / 2,
            dilation,
        }
    }

    pub fn strided(kernel: usize, stride: usize) -> Self {
        Self {
            stride,
            padding: (kernel - 1) / 2,
            dilation: 1,
        }
    }

    pub fn output_extent(&self, input: usize, kernel: usize) -> Option<usize> {
        let span = self.dilation * (kernel - 1) + 1;
        let padded = input + 2 * self.padding;
        if padded < span {
            return None;
        }
        Some((padded - span) / self.stride + 1)
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Relu(Var),
    Conv2d {
        input: Var,
        kernel: Var,
        args: Conv2dArgs,
    },
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Softmax {
        input: Var,
        axes: Vec<usize>,
    },
    Mean {
        input: Var,
        axes: Vec<usize>,
    },
    Max {
        input: Var,
        argmax: Vec<usize>,
    },
    Sum(Var),
    Upsample {
        input: Var,
        factor: usize,
    },
    Bce {
        pred: Var,
        target: Tensor,
        weight: Tensor,
        eps: f64,
    },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Constant => OpKind::Constant,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::Sigmoid(_) => OpKind::Sigmoid,
            Op::Relu(_) => OpKind::Relu,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Transpose(_) => OpKind::Transpose,
            Op::Reshape(_) => OpKind::Reshape,
            Op::Concat { .. } => OpKind::Concat,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::Mean { .. } => OpKind::Mean,
            Op::Max { .. } => OpKind::Max,
            Op::Sum(_) => OpKind::Sum,
            Op::Upsample { .. } => OpKind::Upsample,
            Op::Bce { .. } => OpKind::Bce,
        }
    }

    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf | Op::Constant => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Sigmoid(a)
            | Op::Relu(a)
            | Op::Transpose(a)
            | Op::Reshape(a)
            | Op::Sum(a) => vec![*a],
            Op::Conv2d { input, kernel, .. } => vec![*input, *kernel],
            Op::Concat { parts, .. } => parts.clone(),
            Op::Softmax { input, .. }
            | Op::Mean { input, .. }
            | Op::Max { input, .. }
            | Op::Upsample { input, .. } => vec![*input],
            Op::Bce { pred, .. } => vec![*pred],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Arena of recorded operations, in creation (hence topological) order.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    consumed: bool,
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

    /// Records a tracked leaf whose gradient is kept after backward.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Hash of every branch taken by non-smooth ops: ReLU input signs, max
    /// winners, and which predictions the log clip engaged. Two evaluations
    /// with equal signatures lie on the same smooth piece.
    pub fn branch_signature(&self) -> u64 {
        use std::hash::{DefaultHasher, Hash, Hasher};
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(a) => {
                    for &v in self.value(*a).data() {
                        (v > 0.0).hash(&mut h);
                    }
                }
                Op::Max { argmax, .. } => argmax.hash(&mut h),
                Op::Bce { pred, eps, .. } => {
                    for &v in self.value(*pred).data() {
                        (v < *eps, v > 1.0 - *eps).hash(&mut h);
                    }
                }
                _ => {}
            }
        }
        h.finish()
    }

    /// Records an untracked input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    pub fn parents(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].op.parents()
    }

    /// Gradient of the last backward pass with respect to a tracked leaf.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        debug_assert!(op.parents().iter().all(|p| p.0 < self.nodes.len()));
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor, op: Op) -> Var {
        let tracked = op.parents().iter().any(|p| self.nodes[p.0].tracked);
        self.push(value, op, tracked)
    }

    // ---- elementwise -------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = broadcast_binary("add", self.value(a), self.value(b), |x, y| x + y)?;
        Ok(self.push_op(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = broadcast_binary("sub", self.value(a), self.value(b), |x, y| x - y)?;
        Ok(self.push_op(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = broadcast_binary("mul", self.value(a), self.value(b), |x, y| x * y)?;
        Ok(self.push_op(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a).map(|v| v * factor);
        self.push_op(out, Op::Scale(a, factor))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push_op(out, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.max(0.0));
        self.push_op(out, Op::Relu(a))
    }

    // ---- structural ----------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape.to_vec())?;
        Ok(self.push_op(out, Op::Reshape(a)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let &[m, n] = t.shape() else {
            return Err(Error::shape("transpose", format!("expected rank 2, got {:?}", t.shape())));
        };
        let src = t.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let out = Tensor::new(vec![n, m], out)?;
        Ok(self.push_op(out, Op::Transpose(a)))
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat", "no operands"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::invalid("concat", format!("axis {axis} for rank {}", base.len())));
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Error::shape("concat", format!("{base:?} vs {s:?} along axis {axis}")));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let t = self.value(*p);
                let block = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
            }
        }
        let out = Tensor::new(out_shape, data)?;
        Ok(self.push_op(
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    // ---- reductions ----------------------------------------------------

    /// Softmax over the flattened set of `axes`, stabilized by max-subtraction.
    pub fn softmax(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let axes = normalize_axes("softmax", axes, self.shape(a).len())?;
        let t = self.value(a);
        let groups = ReduceMap::new(t.shape(), &axes);
        let mut maxes = vec![f64::NEG_INFINITY; groups.count];
        groups.for_each(|i, g| maxes[g] = maxes[g].max(t.data()[i]));
        let mut out = vec![0.0; t.len()];
        let mut sums = vec![0.0; groups.count];
        groups.for_each(|i, g| {
            let e = (t.data()[i] - maxes[g]).exp();
            out[i] = e;
            sums[g] += e;
        });
        groups.for_each(|i, g| out[i] /= sums[g]);
        let out = Tensor::new(t.shape().to_vec(), out)?;
        Ok(self.push_op(out, Op::Softmax { input: a, axes }))
    }

    /// Mean over `axes`, keeping reduced axes as singletons.
    pub fn mean_axes(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let axes = normalize_axes("mean", axes, self.shape(a).len())?;
        let t = self.value(a);
        let groups = ReduceMap::new(t.shape(), &axes);
        let mut out = vec![0.0; groups.count];
        groups.for_each(|i, g| out[g] += t.data()[i]);
        let denom = groups.group_size as f64;
        out.iter_mut().for_each(|v| *v /= denom);
        let out = Tensor::new(groups.out_shape.clone(), out)?;
        Ok(self.push_op(out, Op::Mean { input: a, axes }))
    }

    /// Max over `axes`, keeping reduced axes as singletons. Ties go to the
    /// first element in row-major order.
    pub fn max_axes(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let axes = normalize_axes("max", axes, self.shape(a).len())?;
        let t = self.value(a);
        let groups = ReduceMap::new(t.shape(), &axes);
        let mut out = vec![f64::NEG_INFINITY; groups.count];
        let mut argmax = vec![usize::MAX; groups.count];
        groups.for_each(|i, g| {
            if t.data()[i] > out[g] || argmax[g] == usize::MAX {
                out[g] = t.data()[i];
                argmax[g] = i;
            }
        });
        let out = Tensor::new(groups.out_shape.clone(), out)?;
        Ok(self.push_op(out, Op::Max { input: a, argmax }))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push_op(out, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    // ---- linear algebra ------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (&[m, k], &[k2, n]) = (ta.shape(), tb.shape()) else {
            return Err(Error::shape(
                "matmul",
                format!("expected rank-2 operands, got {:?} and {:?}", ta.shape(), tb.shape()),
            ));
        };
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("inner extents differ: {:?} x {:?}", ta.shape(), tb.shape()),
            ));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(ta.data(), tb.data(), &mut out, m, k, n);
        let out = Tensor::new(vec![m, n], out)?;
        Ok(self.push_op(out, Op::MatMul(a, b)))
    }

    /// Cross-correlation of `[N,C,H,W]` input with `[K,C,kh,kw]` kernel.
    pub fn conv2d(&mut self, input: Var, kernel: Var, args: Conv2dArgs) -> Result<Var> {
        let (x, w) = (self.value(input), self.value(kernel));
        let geom = ConvGeom::new(x.shape(), w.shape(), args)?;
        let mut out = vec![0.0; geom.n * geom.k * geom.oh * geom.ow];
        geom.forward(x.data(), w.data(), &mut out);
        let out = Tensor::new(vec![geom.n, geom.k, geom.oh, geom.ow], out)?;
        Ok(self.push_op(
            out,
            Op::Conv2d {
                input,
                kernel,
                args,
            },
        ))
    }

    /// Bilinear upsampling of `[N,C,H,W]` by an integer factor, align-corners false.
    pub fn upsample_bilinear(&mut self, input: Var, factor: usize) -> Result<Var> {
        if factor < 1 {
            return Err(Error::invalid("upsample_bilinear", "factor must be >= 1"));
        }
        let x = self.value(input);
        let &[n, c, h, w] = x.shape() else {
            return Err(Error::shape("upsample_bilinear", format!("expected rank 4, got {:?}", x.shape())));
        };
        let (oh, ow) = (h * factor, w * factor);
        let rows = interp_table(h, factor);
        let cols = interp_table(w, factor);
        let mut out = vec![0.0; n * c * oh * ow];
        let src = x.data();
        for plane in 0..n * c {
            let s = &src[plane * h * w..(plane + 1) * h * w];
            let o = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
            for (oy, &(y0, y1, ly)) in rows.iter().enumerate() {
                for (ox, &(x0, x1, lx)) in cols.iter().enumerate() {
                    let top = s[y0 * w + x0] * (1.0 - lx) + s[y0 * w + x1] * lx;
                    let bot = s[y1 * w + x0] * (1.0 - lx) + s[y1 * w + x1] * lx;
                    o[oy * ow + ox] = top * (1.0 - ly) + bot * ly;
                }
            }
        }
        let out = Tensor::new(vec![n, c, oh, ow], out)?;
        Ok(self.push_op(out, Op::Upsample { input, factor }))
    }

    /// Weighted binary cross-entropy averaged over all entries.
    ///
    /// Predictions are clipped to `[eps, 1 - eps]` before the logarithms;
    /// the clip has zero derivative outside that interval.
    pub fn bce(&mut self, pred: Var, target: &Tensor, weight: &Tensor, eps: f64) -> Result<Var> {
        let p = self.value(pred);
        if p.shape() != target.shape() || p.shape() != weight.shape() {
            return Err(Error::shape(
                "bce",
                format!(
                    "prediction {:?}, target {:?}, weight {:?}",
                    p.shape(),
                    target.shape(),
                    weight.shape()
                ),
            ));
        }
        let n = p.len() as f64;
        let mut total = 0.0;
        for ((&m, &t), &w) in p.data().iter().zip(target.data()).zip(weight.data()) {
            let m = m.clamp(eps, 1.0 - eps);
            total -= w * (t * m.ln() + (1.0 - t) * (1.0 - m).ln());
        }
        let out = Tensor::scalar(total / n);
        Ok(self.push_op(
            out,
            Op::Bce {
                pred,
                target: target.clone(),
                weight: weight.clone(),
                eps,
            },
        ))
    }

    // ---- reverse mode --------------------------------------------------

    /// Reverse-mode sweep from a scalar `loss`; fills gradients of tracked leaves.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let shape = self.shape(loss);
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(shape.to_vec()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.tracked {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            self.backward_node(idx, &g, &mut grads);
        }
        self.grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| match (g, &node.op) {
                (Some(g), Op::Leaf) => Tensor::new(node.value.shape().to_vec(), g).ok(),
                (None, Op::Leaf) if node.tracked => Some(Tensor::zeros(node.value.shape().to_vec())),
                _ => None,
            })
            .collect();
        Ok(())
    }

    fn backward_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let scale = fault_scale(node.op.kind());
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].tracked {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
            if scale == 1.0 {
                f(buf);
            } else {
                let mut tmp = vec![0.0; buf.len()];
                f(&mut tmp);
                buf.iter_mut().zip(tmp).for_each(|(b, t)| *b += scale * t);
            }
        };
        let out = &node.value;
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                let (sa, sb) = (self.shape(*a).to_vec(), self.shape(*b).to_vec());
                acc(*a, &mut |buf| reduce_broadcast(g, out.shape(), &sa, buf, |x, _| x));
                acc(*b, &mut |buf| reduce_broadcast(g, out.shape(), &sb, buf, |x, _| sign * x));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                // d(a*b)/da = b, broadcast both to the output shape.
                acc(*a, &mut |buf| {
                    let gb = broadcast_binary_raw(g, out.shape(), tb, |x, y| x * y);
                    reduce_broadcast(&gb, out.shape(), ta.shape(), buf, |x, _| x)
                });
                acc(*b, &mut |buf| {
                    let ga = broadcast_binary_raw(g, out.shape(), ta, |x, y| x * y);
                    reduce_broadcast(&ga, out.shape(), tb.shape(), buf, |x, _| x)
                });
            }
            Op::Scale(a, factor) => acc(*a, &mut |buf| {
                buf.iter_mut().zip(g).for_each(|(b, &x)| *b += factor * x)
            }),
            Op::Sigmoid(a) => acc(*a, &mut |buf| {
                for ((b, &x), &y) in buf.iter_mut().zip(g).zip(out.data()) {
                    *b += x * y * (1.0 - y);
                }
            }),
            Op::Relu(a) => {
                let input = self.value(*a);
                acc(*a, &mut |buf| {
                    for ((b, &x), &v) in buf.iter_mut().zip(g).zip(input.data()) {
                        if v > 0.0 {
                            *b += x;
                        }
                    }
                })
            }
            Op::Reshape(a) => acc(*a, &mut |buf| buf.iter_mut().zip(g).for_each(|(b, &x)| *b += x)),
            Op::Transpose(a) => {
                let (m, n) = (self.shape(*a)[0], self.shape(*a)[1]);
                acc(*a, &mut |buf| {
                    for i in 0..m {
                        for j in 0..n {
                            buf[i * n + j] += g[j * m + i];
                        }
                    }
                })
            }
            Op::Concat { parts, axis } => {
                let shape = out.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for p in parts {
                    let block = self.shape(*p)[*axis] * inner;
                    acc(*p, &mut |buf| {
                        for o in 0..outer {
                            let src = &g[o * total + offset..o * total + offset + block];
                            buf[o * block..(o + 1) * block]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(b, &x)| *b += x);
                        }
                    });
                    offset += block;
                }
            }
            Op::Softmax { input, axes } => {
                let groups = ReduceMap::new(out.shape(), axes);
                let y = out.data();
                let mut dots = vec![0.0; groups.count];
                groups.for_each(|i, grp| dots[grp] += g[i] * y[i]);
                acc(*input, &mut |buf| {
                    groups.for_each(|i, grp| buf[i] += y[i] * (g[i] - dots[grp]))
                });
            }
            Op::Mean { input, axes } => {
                let groups = ReduceMap::new(self.shape(*input), axes);
                let denom = groups.group_size as f64;
                acc(*input, &mut |buf| groups.for_each(|i, grp| buf[i] += g[grp] / denom));
            }
            Op::Max { input, argmax } => acc(*input, &mut |buf| {
                for (grp, &i) in argmax.iter().enumerate() {
                    buf[i] += g[grp];
                }
            }),
            Op::Sum(a) => acc(*a, &mut |buf| buf.iter_mut().for_each(|b| *b += g[0])),
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                acc(*a, &mut |buf| {
                    // dA = dC * B^T
                    for i in 0..m {
                        let gi = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let bp = &tb.data()[p * n..(p + 1) * n];
                            buf[i * k + p] += dot(gi, bp);
                        }
                    }
                });
                acc(*b, &mut |buf| {
                    // dB = A^T * dC
                    for i in 0..m {
                        let gi = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let a_ip = ta.data()[i * k + p];
                            if a_ip == 0.0 {
                                continue;
                            }
                            buf[p * n..(p + 1) * n]
                                .iter_mut()
                                .zip(gi)
                                .for_each(|(o, &x)| *o += a_ip * x);
                        }
                    }
                });
            }
            Op::Conv2d {
                input,
                kernel,
                args,
            } => {
                let (x, w) = (self.value(*input), self.value(*kernel));
                let geom = ConvGeom::new(x.shape(), w.shape(), *args)
                    .expect("shapes validated at forward time");
                acc(*input, &mut |buf| geom.backward_input(g, w.data(), buf));
                acc(*kernel, &mut |buf| geom.backward_kernel(g, x.data(), buf));
            }
            Op::Upsample { input, factor } => {
                let shape = self.shape(*input);
                let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
                let (oh, ow) = (h * factor, w * factor);
                let rows = interp_table(h, *factor);
                let cols = interp_table(w, *factor);
                acc(*input, &mut |buf| {
                    for plane in 0..n * c {
                        let gs = &g[plane * oh * ow..(plane + 1) * oh * ow];
                        let b = &mut buf[plane * h * w..(plane + 1) * h * w];
                        for (oy, &(y0, y1, ly)) in rows.iter().enumerate() {
                            for (ox, &(x0, x1, lx)) in cols.iter().enumerate() {
                                let v = gs[oy * ow + ox];
                                b[y0 * w + x0] += v * (1.0 - ly) * (1.0 - lx);
                                b[y0 * w + x1] += v * (1.0 - ly) * lx;
                                b[y1 * w + x0] += v * ly * (1.0 - lx);
                                b[y1 * w + x1] += v * ly * lx;
                            }
                        }
                    }
                })
            }
            Op::Bce {
                pred,
                target,
                weight,
                eps,
            } => {
                let p = self.value(*pred);
                let n = p.len() as f64;
                acc(*pred, &mut |buf| {
                    for (((b, &m), &t), &w) in
                        buf.iter_mut().zip(p.data()).zip(target.data()).zip(weight.data())
                    {
                        if m > *eps && m < 1.0 - eps {
                            *b -= g[0] * w * (t / m - (1.0 - t) / (1.0 - m)) / n;
                        }
                    }
                })
            }
        }
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let a_ip = a[i * k + p];
            if a_ip == 0.0 {
                continue;
            }
            row.iter_mut()
                .zip(&b[p * n..(p + 1) * n])
                .for_each(|(o, &x)| *o += a_ip * x);
        }
    }
}

fn normalize_axes(op: &'static str, axes: &[usize], rank: usize) -> Result<Vec<usize>> {
    if axes.is_empty() {
        return Err(Error::invalid(op, "empty axis set"));
    }
    let mut sorted = axes.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if let Some(&bad) = sorted.iter().find(|&&a| a >= rank) {
        return Err(Error::invalid(op, format!("axis {bad} out of range for rank {rank}")));
    }
    Ok(sorted)
}

/// Maps every element of `shape` to its group when `axes` are reduced.
struct ReduceMap {
    shape: Vec<usize>,
    group_strides: Vec<usize>,
    out_shape: Vec<usize>,
    count: usize,
    group_size: usize,
}

impl ReduceMap {
    fn new(shape: &[usize], axes: &[usize]) -> Self {
        let mut out_shape = shape.to_vec();
        for &a in axes {
            out_shape[a] = 1;
        }
        let out_strides = strides_of(&out_shape);
        let group_strides = out_strides
            .iter()
            .enumerate()
            .map(|(i, &s)| if axes.contains(&i) { 0 } else { s })
            .collect();
        let count = out_shape.iter().product();
        let group_size = axes.iter().map(|&a| shape[a]).product();
        Self {
            shape: shape.to_vec(),
            group_strides,
            out_shape,
            count,
            group_size,
        }
    }

    fn for_each(&self, mut f: impl FnMut(usize, usize)) {
        let mut flat = 0;
        for_each_offset(&self.shape, &self.group_strides, |g| {
            f(flat, g);
            flat += 1;
        });
    }
}

/// Visits the shape in row-major order, passing the offset under `strides`.
fn for_each_offset(shape: &[usize], strides: &[usize], mut f: impl FnMut(usize)) {
    let rank = shape.len();
    if rank == 0 {
        f(0);
        return;
    }
    let last = shape[rank - 1];
    let last_stride = strides[rank - 1];
    let outer: usize = shape[..rank - 1].iter().product();
    let mut idx = vec![0usize; rank - 1];
    let mut base = 0usize;
    for _ in 0..outer {
        for j in 0..last {
            f(base + j * last_stride);
        }
        for ax in (0..rank - 1).rev() {
            idx[ax] += 1;
            base += strides[ax];
            if idx[ax] < shape[ax] {
                break;
            }
            base -= strides[ax] * shape[ax];
            idx[ax] = 0;
        }
    }
}

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(Error::shape(op, format!("rank differs: {a:?} vs {b:?}")));
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Ok(x),
            (1, _) => Ok(y),
            (_, 1) => Ok(x),
            _ => Err(Error::shape(op, format!("cannot broadcast {a:?} with {b:?}"))),
        })
        .collect()
}

fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let strides = strides_of(shape);
    shape
        .iter()
        .zip(out)
        .zip(strides)
        .map(|((&s, &o), st)| if s == 1 && o != 1 { 0 } else { st })
        .collect()
}

fn broadcast_binary(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    let out_shape = broadcast_shape(op, a.shape(), b.shape())?;
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Tensor::new(out_shape, data);
    }
    let sa = broadcast_strides(a.shape(), &out_shape);
    let sb = broadcast_strides(b.shape(), &out_shape);
    let mut ia = Vec::with_capacity(out_shape.iter().product());
    for_each_offset(&out_shape, &sa, |i| ia.push(i));
    let mut k = 0;
    let mut data = vec![0.0; ia.len()];
    for_each_offset(&out_shape, &sb, |j| {
        data[k] = f(a.data()[ia[k]], b.data()[j]);
        k += 1;
    });
    Tensor::new(out_shape, data)
}

/// `g` has the output shape; `t` broadcasts to it.
fn broadcast_binary_raw(
    g: &[f64],
    out_shape: &[usize],
    t: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Vec<f64> {
    if t.shape() == out_shape {
        return g.iter().zip(t.data()).map(|(&x, &y)| f(x, y)).collect();
    }
    let st = broadcast_strides(t.shape(), out_shape);
    let mut out = Vec::with_capacity(g.len());
    let mut k = 0;
    for_each_offset(out_shape, &st, |j| {
        out.push(f(g[k], t.data()[j]));
        k += 1;
    });
    out
}

/// Sums `g` (output shape) over the axes along which `target` was broadcast.
fn reduce_broadcast(
    g: &[f64],
    out_shape: &[usize],
    target: &[usize],
    buf: &mut [f64],
    f: impl Fn(f64, usize) -> f64,
) {
    if target == out_shape {
        buf.iter_mut().zip(g).enumerate().for_each(|(i, (b, &x))| *b += f(x, i));
        return;
    }
    let st = broadcast_strides(target, out_shape);
    let mut k = 0;
    for_each_offset(out_shape, &st, |j| {
        buf[j] += f(g[k], j);
        k += 1;
    });
}

/// Source rows (lo, hi, weight of hi) for align-corners-false upsampling.
fn interp_table(len: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    (0..len * factor)
        .map(|o| {
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(len - 1);
            let hi = (lo + 1).min(len - 1);
            let frac = if hi == lo { 0.0 } else { src - lo as f64 };
            (lo, hi, frac)
        })
        .collect()
}

struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    args: Conv2dArgs,
}

impl ConvGeom {
    fn new(input: &[usize], kernel: &[usize], args: Conv2dArgs) -> Result<Self> {
        let (&[n, c, h, w], &[k, kc, kh, kw]) = (input, kernel) else {
            return Err(Error::shape(
                "conv2d",
                format!("expected rank-4 input and kernel, got {input:?} and {kernel:?}"),
            ));
        };
        if c != kc {
            return Err(Error::shape(
                "conv2d",
                format!("input {input:?} has {c} channels but kernel {kernel:?} expects {kc}"),
            ));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::invalid("conv2d", format!("kernel extents must be odd, got {kernel:?}")));
        }
        if args.stride == 0 || args.dilation == 0 {
            return Err(Error::invalid("conv2d", "stride and dilation must be >= 1"));
        }
        let (Some(oh), Some(ow)) = (args.output_extent(h, kh), args.output_extent(w, kw)) else {
            return Err(Error::shape("conv2d", format!("kernel {kernel:?} larger than padded input {input:?}")));
        };
        Ok(Self {
            n,
            c,
            h,
            w,
            k,
            kh,
            kw,
            oh,
            ow,
            args,
        })
    }

    /// Output indices `o` with `0 <= o*stride + offset < len`.
    fn valid(&self, offset: isize, len: usize, out_len: usize) -> std::ops::Range<usize> {
        let s = self.args.stride as isize;
        let lo = if offset >= 0 { 0 } else { ((-offset) + s - 1) / s };
        let last = len as isize - 1 - offset;
        if last < 0 {
            return 0..0;
        }
        let hi = ((last / s) + 1).min(out_len as isize);
        (lo as usize)..(hi.max(lo) as usize)
    }

    fn taps(&self) -> impl Iterator<Item = (usize, usize, isize, isize)> + '_ {
        let (p, d) = (self.args.padding as isize, self.args.dilation as isize);
        (0..self.kh).flat_map(move |i| {
            (0..self.kw).map(move |j| (i, j, i as isize * d - p, j as isize * d - p))
        })
    }

    fn forward(&self, x: &[f64], w: &[f64], out: &mut [f64]) {
        let s = self.args.stride;
        for n in 0..self.n {
            for k in 0..self.k {
                let o = &mut out[(n * self.k + k) * self.oh * self.ow..][..self.oh * self.ow];
                for c in 0..self.c {
                    let xin = &x[(n * self.c + c) * self.h * self.w..][..self.h * self.w];
                    let wk = &w[(k * self.c + c) * self.kh * self.kw..][..self.kh * self.kw];
                    for (i, j, dy, dx) in self.taps() {
                        let wv = wk[i * self.kw + j];
                        if wv == 0.0 {
                            continue;
                        }
                        let cols = self.valid(dx, self.w, self.ow);
                        for oy in self.valid(dy, self.h, self.oh) {
                            let iy = (oy * s) as isize + dy;
                            let row = &xin[iy as usize * self.w..][..self.w];
                            let orow = &mut o[oy * self.ow..][..self.ow];
                            for ox in cols.clone() {
                                orow[ox] += wv * row[((ox * s) as isize + dx) as usize];
                            }
                        }
                    }
                }
            }
        }
    }

    fn backward_input(&self, g: &[f64], w: &[f64], buf: &mut [f64]) {
        let s = self.args.stride;
        for n in 0..self.n {
            for k in 0..self.k {
                let go = &g[(n * self.k + k) * self.oh * self.ow..][..self.oh * self.ow];
                for c in 0..self.c {
                    let gx = &mut buf[(n * self.c + c) * self.h * self.w..][..self.h * self.w];
                    let wk = &w[(k * self.c + c) * self.kh * self.kw..][..self.kh * self.kw];
                    for (i, j, dy, dx) in self.taps() {
                        let wv = wk[i * self.kw + j];
                        let cols = self.valid(dx, self.w, self.ow);
                        for oy in self.valid(dy, self.h, self.oh) {
                            let iy = ((oy * s) as isize + dy) as usize;
                            let grow = &go[oy * self.ow..][..self.ow];
                            for ox in cols.clone() {
                                gx[iy * self.w + ((ox * s) as isize + dx) as usize] += wv * grow[ox];
                            }
                        }
                    }
                }
            }
        }
    }

    fn backward_kernel(&self, g: &[f64], x: &[f64], buf: &mut [f64]) {
        let s = self.args.stride;
        for n in 0..self.n {
            for k in 0..self.k {
                let go = &g[(n * self.k + k) * self.oh * self.ow..][..self.oh * self.ow];
                for c in 0..self.c {
                    let xin = &x[(n * self.c + c) * self.h * self.w..][..self.h * self.w];
                    let gw = &mut buf[(k * self.c + c) * self.kh * self.kw..][..self.kh * self.kw];
                    for (i, j, dy, dx) in self.taps() {
                        let cols = self.valid(dx, self.w, self.ow);
                        let mut total = 0.0;
                        for oy in self.valid(dy, self.h, self.oh) {
                            let iy = ((oy * s) as isize + dy) as usize;
                            let row = &xin[iy * self.w..][..self.w];
                            let grow = &go[oy * self.ow..][..self.ow];
                            for ox in cols.clone() {
                                total += grow[ox] * row[((ox * s) as isize + dx) as usize];
                            }
                        }
                        gw[i * self.kw + j] += total;
                    }
                }
            }
        }
    }
}
