//! Reverse-mode differentiation over dense tensors.
//!
//! A [`Tape`] records every operation in execution order. Each recorded node
//! owns its forward value; [`Tape::backward`] walks the nodes in reverse and
//! accumulates adjoints into per-node gradient buffers. Gradients are summed
//! across calls until [`Tape::zero_grad`] is invoked, so a parameter used at
//! many timesteps collects the contribution of each use.
//!
//! There is no implicit broadcasting. Operations that combine a matrix with a
//! vector ([`Tape::add_bias`], [`Tape::diag_mul`]) say so in their name.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Sub,
    Hadamard,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Tanh,
    Relu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Max,
    Sum,
    Mean,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum GatherKind {
    /// Argmax routing of a max reduction or max pooling; part of the kink signature.
    Max,
    Transpose,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Hadamard(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    DiagMul(Var, Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Sum { input: Var, axis: usize, mean: bool },
    Gather { input: Var, index: Vec<usize>, kind: GatherKind },
    Slice { input: Var, offset: usize },
    Conv1d { input: Var, kernel: Var, bias: Var },
    SoftmaxXent { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Constant => "constant",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Hadamard(..) => "hadamard",
            Op::Scale(..) => "scale",
            Op::AddBias(..) => "add_bias",
            Op::DiagMul(..) => "diag_mul",
            Op::Sigmoid(..) => "sigmoid",
            Op::Tanh(..) => "tanh",
            Op::Relu(..) => "relu",
            Op::Sum { .. } => "reduce",
            Op::Gather { .. } => "gather",
            Op::Slice { .. } => "select",
            Op::Conv1d { .. } => "conv1d",
            Op::SoftmaxXent { .. } => "softmax_cross_entropy",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match *self {
            Op::Leaf | Op::Constant => vec![],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Hadamard(a, b)
            | Op::AddBias(a, b)
            | Op::DiagMul(a, b) => vec![a, b],
            Op::Scale(a, _) | Op::Sigmoid(a) | Op::Tanh(a) | Op::Relu(a) => vec![a],
            Op::Sum { input, .. } | Op::Gather { input, .. } | Op::Slice { input, .. } => {
                vec![input]
            }
            Op::Conv1d {
                input,
                kernel,
                bias,
            } => vec![input, kernel, bias],
            Op::SoftmaxXent { logits, .. } => vec![logits],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of a forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
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

    /// Records a trainable input whose gradient is tracked.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_unchecked(value, Op::Leaf, true)
    }

    /// Records an input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_unchecked(value, Op::Constant, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of `v`, or `None` if no backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Accumulated gradient of `v` as a tensor, zeros if never reached.
    pub fn grad_tensor(&self, v: Var) -> Tensor {
        let shape = self.shape(v).clone();
        let data = match self.grad(v) {
            Some(g) => g.to_vec(),
            None => vec![0.0; shape.numel()],
        };
        Tensor::from_parts(shape, data)
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    fn push_unchecked(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_unchecked(value, op, requires_grad))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op,
                left: sa.clone(),
                right: sb.clone(),
            });
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_parts(va.shape().clone(), data)
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let va = self.value(a);
        Tensor::from_parts(va.shape().clone(), va.data().iter().map(|&x| f(x)).collect())
    }

    /// Matrix product of `[m, k]` and `[k, p]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.rank() != 2 || sb.rank() != 2 || sa.dims()[1] != sb.dims()[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: sa.clone(),
                right: sb.clone(),
            });
        }
        let (m, k, p) = (sa.dims()[0], sa.dims()[1], sb.dims()[1]);
        let mut out = vec![0.0; m * p];
        gemm(
            m,
            k,
            p,
            Strided::row_major(self.value(a).data(), k),
            Strided::row_major(self.value(b).data(), p),
            &mut out,
        );
        self.push(Tensor::new(&[m, p], out)?, Op::MatMul(a, b))
    }

    pub fn elementwise(&mut self, op: Elementwise, a: Var, b: Var) -> Result<Var> {
        match op {
            Elementwise::Add => self.add(a, b),
            Elementwise::Sub => self.sub(a, b),
            Elementwise::Hadamard => self.hadamard(a, b),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip_with(a, b, |x, y| x + y);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip_with(a, b, |x, y| x - y);
        self.push(v, Op::Sub(a, b))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("hadamard", a, b)?;
        let v = self.zip_with(a, b, |x, y| x * y);
        self.push(v, Op::Hadamard(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let v = self.map(a, |x| c * x);
        self.push(v, Op::Scale(a, c))
    }

    /// `1 - a`, elementwise.
    pub fn one_minus(&mut self, a: Var) -> Result<Var> {
        let ones = Tensor::from_parts(self.shape(a).clone(), vec![1.0; self.shape(a).numel()]);
        let ones = self.constant(ones);
        self.sub(ones, a)
    }

    /// Adds a length-`r` bias to every column of an `[r, c]` matrix.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(bias));
        if sa.rank() != 2 || sb.rank() != 1 || sa.dims()[0] != sb.dims()[0] {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                left: sa.clone(),
                right: sb.clone(),
            });
        }
        let cols = sa.dims()[1];
        let b = self.value(bias).data();
        let va = self.value(a);
        let data = va
            .data()
            .chunks(cols)
            .zip(b)
            .flat_map(|(row, &bi)| row.iter().map(move |&x| x + bi))
            .collect();
        let v = Tensor::from_parts(va.shape().clone(), data);
        self.push(v, Op::AddBias(a, bias))
    }

    /// `diag(d) · a` for a length-`r` vector `d` and an `[r]` or `[r, c]` tensor `a`.
    pub fn diag_mul(&mut self, d: Var, a: Var) -> Result<Var> {
        let (sd, sa) = (self.shape(d), self.shape(a));
        if sd.rank() != 1 || sa.rank() > 2 || sa.dims()[0] != sd.dims()[0] {
            return Err(Error::ShapeMismatch {
                op: "diag_mul",
                left: sd.clone(),
                right: sa.clone(),
            });
        }
        let cols = sa.numel() / sa.dims()[0];
        let dv = self.value(d).data();
        let va = self.value(a);
        let data = va
            .data()
            .chunks(cols)
            .zip(dv)
            .flat_map(|(row, &di)| row.iter().map(move |&x| di * x))
            .collect();
        let v = Tensor::from_parts(va.shape().clone(), data);
        self.push(v, Op::DiagMul(d, a))
    }

    pub fn activation(&mut self, kind: Activation, a: Var) -> Result<Var> {
        match kind {
            Activation::Sigmoid => self.sigmoid(a),
            Activation::Tanh => self.tanh(a),
            Activation::Relu => self.relu(a),
        }
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let v = self.map(a, sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let v = self.map(a, f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let v = self.map(a, |x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    /// Reduces along `axis`. The reduced axis is removed from the shape.
    pub fn reduce(&mut self, kind: Reduction, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).clone();
        if axis >= shape.rank() {
            return Err(Error::AxisOutOfRange {
                op: "reduce",
                axis,
                rank: shape.rank(),
            });
        }
        let (outer, len, inner) = shape.split_at_axis(axis);
        let out_shape = shape.without_axis(axis);
        let x = self.value(a).data();
        match kind {
            Reduction::Max => {
                let mut index = Vec::with_capacity(outer * inner);
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        index.push(argmax_strided(x, base, len, inner));
                    }
                }
                self.gather(a, out_shape, index, GatherKind::Max)
            }
            Reduction::Sum | Reduction::Mean => {
                let mean = kind == Reduction::Mean;
                let mut out = vec![0.0; outer * inner];
                for o in 0..outer {
                    for k in 0..len {
                        let row = &x[(o * len + k) * inner..(o * len + k + 1) * inner];
                        for (acc, &xv) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                            *acc += xv;
                        }
                    }
                }
                if mean {
                    out.iter_mut().for_each(|v| *v /= len as f64);
                }
                let v = Tensor::from_parts(out_shape, out);
                self.push(v, Op::Sum { input: a, axis, mean })
            }
        }
    }

    /// Sum of every element, as a scalar.
    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let mut v = a;
        while self.shape(v).rank() > 1 {
            v = self.reduce(Reduction::Sum, v, 0)?;
        }
        if self.shape(v).numel() > 1 {
            v = self.reduce(Reduction::Sum, v, 0)?;
        }
        Ok(v)
    }

    /// Non-overlapping max pooling along axis 0 with window and stride `window`.
    /// Trailing frames that do not fill a window are dropped.
    pub fn max_pool(&mut self, a: Var, window: usize) -> Result<Var> {
        if window == 0 {
            return Err(Error::InvalidArgument("pooling window must be positive".into()));
        }
        let shape = self.shape(a).clone();
        let (_, frames, inner) = shape.split_at_axis(0);
        let pooled = frames / window;
        if pooled == 0 {
            return Err(Error::InvalidArgument(format!(
                "pooling window {window} exceeds {frames} frames"
            )));
        }
        let x = self.value(a).data();
        let mut index = Vec::with_capacity(pooled * inner);
        for p in 0..pooled {
            for i in 0..inner {
                index.push(argmax_strided(x, p * window * inner + i, window, inner));
            }
        }
        self.gather(a, shape.with_dim(0, pooled), index, GatherKind::Max)
    }

    /// Slice `index` along axis 0; the axis is removed.
    pub fn select(&mut self, a: Var, index: usize) -> Result<Var> {
        let shape = self.shape(a).clone();
        let (_, len, inner) = shape.split_at_axis(0);
        if index >= len {
            return Err(Error::InvalidArgument(format!(
                "select index {index} out of range for {shape}"
            )));
        }
        let offset = index * inner;
        let data = self.value(a).data()[offset..offset + inner].to_vec();
        let v = Tensor::from_parts(shape.without_axis(0), data);
        self.push(v, Op::Slice { input: a, offset })
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).clone();
        if shape.rank() != 2 {
            return Err(Error::AxisOutOfRange {
                op: "transpose",
                axis: 1,
                rank: shape.rank(),
            });
        }
        let (r, c) = (shape.dims()[0], shape.dims()[1]);
        let index = (0..c).flat_map(|j| (0..r).map(move |i| i * c + j)).collect();
        self.gather(a, Shape::new(&[c, r])?, index, GatherKind::Transpose)
    }

    fn gather(&mut self, a: Var, shape: Shape, index: Vec<usize>, kind: GatherKind) -> Result<Var> {
        let x = self.value(a).data();
        let data = index.iter().map(|&i| x[i]).collect();
        let v = Tensor::from_parts(shape, data);
        self.push(v, Op::Gather { input: a, index, kind })
    }

    /// Valid cross-correlation along the time axis with stride 1.
    ///
    /// `input` is `[n, A]` or `[B, n, A]`, `kernel` is `[F, K, A]` and `bias` is `[F]`.
    /// The output is `[n-K+1, F]` or `[n-K+1, F, B]` (time-major, batch last).
    pub fn conv1d(&mut self, input: Var, kernel: Var, bias: Var) -> Result<Var> {
        let (si, sk, sb) = (self.shape(input), self.shape(kernel), self.shape(bias));
        let mismatch = |l: &Shape, r: &Shape| Error::ShapeMismatch {
            op: "conv1d",
            left: l.clone(),
            right: r.clone(),
        };
        if sk.rank() != 3 || si.rank() < 2 {
            return Err(mismatch(si, sk));
        }
        let geo = ConvGeometry::new(si, sk).ok_or_else(|| mismatch(si, sk))?;
        if sb.dims() != [geo.filters] {
            return Err(mismatch(sk, sb));
        }
        let x = self.value(input).data();
        let w = self.value(kernel).data();
        let b = self.value(bias).data();
        let mut out = vec![0.0; geo.frames * geo.filters * geo.batch];
        for t in 0..geo.frames {
            for f in 0..geo.filters {
                for s in 0..geo.batch {
                    out[geo.out_index(t, f, s)] = b[f];
                }
            }
        }
        for s in 0..geo.batch {
            let rows = geo.nonzero_rows(x, s);
            for t in 0..geo.frames {
                for j in 0..geo.width {
                    for &(c, xv) in &rows[t + j] {
                        for f in 0..geo.filters {
                            out[geo.out_index(t, f, s)] += xv * w[geo.kernel_index(f, j, c)];
                        }
                    }
                }
            }
        }
        let dims = if si.rank() == 2 {
            vec![geo.frames, geo.filters]
        } else {
            vec![geo.frames, geo.filters, geo.batch]
        };
        let v = Tensor::new(&dims, out)?;
        self.push(
            v,
            Op::Conv1d {
                input,
                kernel,
                bias,
            },
        )
    }

    /// Mean softmax cross-entropy of `[C]` logits, or of each column of `[C, B]` logits.
    ///
    /// Returns the scalar loss node and the class probabilities (same layout as the logits).
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<(Var, Tensor)> {
        let shape = self.shape(logits).clone();
        let classes = shape.dims()[0];
        let batch = shape.numel() / classes;
        if shape.rank() > 2 || classes < 2 {
            return Err(Error::InvalidArgument(format!(
                "softmax_cross_entropy needs [C] or [C, B] logits with C >= 2, got {shape}"
            )));
        }
        if targets.len() != batch {
            return Err(Error::InvalidArgument(format!(
                "{} targets for a batch of {batch}",
                targets.len()
            )));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= classes) {
            return Err(Error::TargetOutOfRange { target: t, classes });
        }
        let z = self.value(logits).data();
        let mut probs = vec![0.0; z.len()];
        let mut loss = 0.0;
        for (col, &target) in targets.iter().enumerate() {
            let at = |c: usize| c * batch + col;
            let max = (0..classes).map(|c| z[at(c)]).fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = (0..classes).map(|c| (z[at(c)] - max).exp()).sum();
            let log_norm = max + sum.ln();
            for c in 0..classes {
                probs[at(c)] = (z[at(c)] - log_norm).exp();
            }
            loss -= z[at(target)] - log_norm;
        }
        loss /= batch as f64;
        let probs_tensor = Tensor::from_parts(shape, probs.clone());
        let node = self.push(
            Tensor::scalar(loss),
            Op::SoftmaxXent {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        )?;
        Ok((node, probs_tensor))
    }

    /// Propagates `d loss / d node` to every node that requires a gradient,
    /// adding into the existing gradient buffers.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss);
        if !shape.is_scalar() {
            return Err(Error::NotScalar(shape.clone()));
        }
        let n = loss.0 + 1;
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; n];
        adj[loss.0] = Some(vec![1.0]);
        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            let (before, _) = adj.split_at_mut(i);
            self.propagate(node, &g, before);
            adj[i] = Some(g);
        }
        for (i, a) in adj.into_iter().enumerate() {
            let Some(a) = a else { continue };
            match &mut self.grads[i] {
                Some(g) => g.iter_mut().zip(&a).for_each(|(g, a)| *g += a),
                slot @ None => *slot = Some(a),
            }
        }
        Ok(())
    }

    fn propagate(&self, node: &Node, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| nodes[v.0].value.data();
        let wants = |v: Var| nodes[v.0].requires_grad;
        macro_rules! acc {
            ($v:expr) => {{
                let v: Var = $v;
                let len = nodes[v.0].value.numel();
                adj[v.0].get_or_insert_with(|| vec![0.0; len])
            }};
        }
        match &node.op {
            Op::Leaf | Op::Constant => {}
            &Op::MatMul(a, b) => {
                let (m, k) = (nodes[a.0].value.dims()[0], nodes[a.0].value.dims()[1]);
                let p = nodes[b.0].value.dims()[1];
                if wants(a) {
                    // dA += G · Bᵀ
                    let gb = val(b);
                    let da = acc!(a);
                    gemm(m, p, k, Strided::row_major(g, p), Strided::transposed(gb, p), da);
                }
                if wants(b) {
                    // dB += Aᵀ · G
                    let ga = val(a);
                    let db = acc!(b);
                    gemm(k, m, p, Strided::transposed(ga, k), Strided::row_major(g, p), db);
                }
            }
            &Op::Add(a, b) => {
                if wants(a) {
                    add_into(acc!(a), g);
                }
                if wants(b) {
                    add_into(acc!(b), g);
                }
            }
            &Op::Sub(a, b) => {
                if wants(a) {
                    add_into(acc!(a), g);
                }
                if wants(b) {
                    acc!(b).iter_mut().zip(g).for_each(|(d, g)| *d -= g);
                }
            }
            &Op::Hadamard(a, b) => {
                if wants(a) {
                    let vb = val(b);
                    let da = acc!(a);
                    for ((d, g), y) in da.iter_mut().zip(g).zip(vb) {
                        *d += g * y;
                    }
                }
                if wants(b) {
                    let va = val(a);
                    let db = acc!(b);
                    for ((d, g), x) in db.iter_mut().zip(g).zip(va) {
                        *d += g * x;
                    }
                }
            }
            &Op::Scale(a, c) => {
                if wants(a) {
                    acc!(a).iter_mut().zip(g).for_each(|(d, g)| *d += c * g);
                }
            }
            &Op::AddBias(a, bias) => {
                if wants(a) {
                    add_into(acc!(a), g);
                }
                if wants(bias) {
                    let cols = nodes[a.0].value.dims()[1];
                    let db = acc!(bias);
                    for (d, row) in db.iter_mut().zip(g.chunks(cols)) {
                        *d += row.iter().sum::<f64>();
                    }
                }
            }
            &Op::DiagMul(d, a) => {
                let cols = nodes[a.0].value.numel() / nodes[d.0].value.numel();
                if wants(d) {
                    let va = val(a);
                    let dd = acc!(d);
                    for ((dv, grow), arow) in dd.iter_mut().zip(g.chunks(cols)).zip(va.chunks(cols)) {
                        *dv += grow.iter().zip(arow).map(|(g, x)| g * x).sum::<f64>();
                    }
                }
                if wants(a) {
                    let vd = val(d);
                    let da = acc!(a);
                    for ((drow, grow), &di) in da.chunks_mut(cols).zip(g.chunks(cols)).zip(vd) {
                        drow.iter_mut().zip(grow).for_each(|(d, g)| *d += di * g);
                    }
                }
            }
            &Op::Sigmoid(a) => {
                let y = node.value.data();
                let da = acc!(a);
                for ((d, g), y) in da.iter_mut().zip(g).zip(y) {
                    *d += g * y * (1.0 - y);
                }
            }
            &Op::Tanh(a) => {
                let y = node.value.data();
                let da = acc!(a);
                for ((d, g), y) in da.iter_mut().zip(g).zip(y) {
                    *d += g * (1.0 - y * y);
                }
            }
            &Op::Relu(a) => {
                let x = val(a);
                let da = acc!(a);
                for ((d, g), x) in da.iter_mut().zip(g).zip(x) {
                    if *x > 0.0 {
                        *d += g;
                    }
                }
            }
            &Op::Sum { input, axis, mean } => {
                let (outer, len, inner) = nodes[input.0].value.shape().split_at_axis(axis);
                let c = if mean { 1.0 / len as f64 } else { 1.0 };
                let da = acc!(input);
                for o in 0..outer {
                    let grow = &g[o * inner..(o + 1) * inner];
                    for k in 0..len {
                        let drow = &mut da[(o * len + k) * inner..(o * len + k + 1) * inner];
                        drow.iter_mut().zip(grow).for_each(|(d, g)| *d += c * g);
                    }
                }
            }
            Op::Gather { input, index, .. } => {
                let da = acc!(*input);
                for (&i, g) in index.iter().zip(g) {
                    da[i] += g;
                }
            }
            &Op::Slice { input, offset } => {
                let da = acc!(input);
                add_into(&mut da[offset..offset + g.len()], g);
            }
            &Op::Conv1d {
                input,
                kernel,
                bias,
            } => {
                let geo = ConvGeometry::new(nodes[input.0].value.shape(), nodes[kernel.0].value.shape())
                    .expect("shapes validated in forward");
                let x = val(input);
                if wants(bias) {
                    let db = acc!(bias);
                    for t in 0..geo.frames {
                        for (f, d) in db.iter_mut().enumerate() {
                            for s in 0..geo.batch {
                                *d += g[geo.out_index(t, f, s)];
                            }
                        }
                    }
                }
                if wants(kernel) {
                    let dk = acc!(kernel);
                    for s in 0..geo.batch {
                        let rows = geo.nonzero_rows(x, s);
                        for t in 0..geo.frames {
                            for j in 0..geo.width {
                                for &(c, xv) in &rows[t + j] {
                                    for f in 0..geo.filters {
                                        dk[geo.kernel_index(f, j, c)] += xv * g[geo.out_index(t, f, s)];
                                    }
                                }
                            }
                        }
                    }
                }
                if wants(input) {
                    let w = val(kernel);
                    let dx = acc!(input);
                    for s in 0..geo.batch {
                        for t in 0..geo.frames {
                            for j in 0..geo.width {
                                for c in 0..geo.alphabet {
                                    let mut sum = 0.0;
                                    for f in 0..geo.filters {
                                        sum += g[geo.out_index(t, f, s)] * w[geo.kernel_index(f, j, c)];
                                    }
                                    dx[geo.input_index(s, t + j, c)] += sum;
                                }
                            }
                        }
                    }
                }
            }
            Op::SoftmaxXent {
                logits,
                targets,
                probs,
            } => {
                let batch = targets.len();
                let scale = g[0] / batch as f64;
                let dz = acc!(*logits);
                for (i, (d, p)) in dz.iter_mut().zip(probs).enumerate() {
                    let (c, col) = (i / batch, i % batch);
                    let onehot = if targets[col] == c { 1.0 } else { 0.0 };
                    *d += scale * (p - onehot);
                }
            }
        }
    }

    /// Hash of every piecewise choice made in the forward pass: the sign pattern
    /// of each ReLU input and the routing of each max reduction or pooling.
    ///
    /// Two evaluations with the same signature lie on the same smooth piece of the
    /// computed function, so a finite difference between them is meaningful.
    pub fn kink_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for (i, node) in self.nodes.iter().enumerate() {
            match &node.op {
                &Op::Relu(a) => {
                    i.hash(&mut h);
                    for &x in self.value(a).data() {
                        (x > 0.0).hash(&mut h);
                    }
                }
                Op::Gather {
                    index,
                    kind: GatherKind::Max,
                    ..
                } => {
                    i.hash(&mut h);
                    index.hash(&mut h);
                }
                _ => {}
            }
        }
        h.finish()
    }
}

/// First index of the maximum among `len` elements starting at `base` with `stride`.
fn argmax_strided(x: &[f64], base: usize, len: usize, stride: usize) -> usize {
    let mut best = base;
    for k in 1..len {
        let i = base + k * stride;
        if x[i] > x[best] {
            best = i;
        }
    }
    best
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

struct Strided<'a> {
    data: &'a [f64],
    row_stride: isize,
    col_stride: isize,
}

impl<'a> Strided<'a> {
    /// Row-major matrix with `cols` columns.
    fn row_major(data: &'a [f64], cols: usize) -> Self {
        Strided {
            data,
            row_stride: cols as isize,
            col_stride: 1,
        }
    }

    /// Transposed view of a row-major matrix that has `cols` columns.
    fn transposed(data: &'a [f64], cols: usize) -> Self {
        Strided {
            data,
            row_stride: 1,
            col_stride: cols as isize,
        }
    }
}

/// `c[m, n] += a[m, k] · b[k, n]` with `c` row-major.
fn gemm(m: usize, k: usize, n: usize, a: Strided<'_>, b: Strided<'_>, c: &mut [f64]) {
    debug_assert!(a.data.len() >= m * k && b.data.len() >= k * n && c.len() >= m * n);
    // SAFETY: the strides describe views that lie within the given slices, as
    // asserted above, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.row_stride,
            a.col_stride,
            b.data.as_ptr(),
            b.row_stride,
            b.col_stride,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

struct ConvGeometry {
    batch: usize,
    length: usize,
    alphabet: usize,
    filters: usize,
    width: usize,
    frames: usize,
}

impl ConvGeometry {
    fn new(input: &Shape, kernel: &Shape) -> Option<Self> {
        let (batch, length, alphabet) = match *input.dims() {
            [n, a] => (1, n, a),
            [b, n, a] => (b, n, a),
            _ => return None,
        };
        let [filters, width, ka] = *kernel.dims() else {
            return None;
        };
        if ka != alphabet || width > length {
            return None;
        }
        Some(ConvGeometry {
            batch,
            length,
            alphabet,
            filters,
            width,
            frames: length - width + 1,
        })
    }

    fn out_index(&self, t: usize, f: usize, s: usize) -> usize {
        (t * self.filters + f) * self.batch + s
    }

    fn kernel_index(&self, f: usize, j: usize, c: usize) -> usize {
        (f * self.width + j) * self.alphabet + c
    }

    fn input_index(&self, s: usize, row: usize, c: usize) -> usize {
        (s * self.length + row) * self.alphabet + c
    }

    /// Nonzero `(column, value)` pairs of every input row of sample `s`.
    fn nonzero_rows(&self, x: &[f64], s: usize) -> Vec<Vec<(usize, f64)>> {
        (0..self.length)
            .map(|row| {
                let start = self.input_index(s, row, 0);
                x[start..start + self.alphabet]
                    .iter()
                    .enumerate()
                    .filter(|(_, &v)| v != 0.0)
                    .map(|(c, &v)| (c, v))
                    .collect()
            })
            .collect()
    }
}
