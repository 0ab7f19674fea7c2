//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] records every operation evaluated during a forward pass. Nodes
//! are appended in creation order, so parents always precede children and a
//! reverse sweep over the node list is a valid topological order.
//!
//! [`Tape::stop_gradient`] returns a node whose value is bitwise identical to
//! its input but which never propagates gradient to it. Objectives use it to
//! freeze one branch of an expression that appears both live and frozen.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Identifier of a trainable parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Gradient per parameter; every entry has its parameter's shape.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradientMap<S: Scalar = f64> {
    grads: BTreeMap<ParamId, Tensor<S>>,
}

impl<S: Scalar> GradientMap<S> {
    pub fn new() -> Self {
        Self { grads: BTreeMap::new() }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor<S>> {
        self.grads.get(&id)
    }

    pub fn insert(&mut self, id: ParamId, grad: Tensor<S>) {
        self.grads.insert(id, grad);
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor<S>)> {
        self.grads.iter().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Adds `other` entrywise; missing entries are taken over as-is.
    pub fn accumulate(&mut self, other: &GradientMap<S>) -> Result<()> {
        for (id, g) in other.iter() {
            match self.grads.get_mut(&id) {
                Some(acc) => {
                    if acc.shape() != g.shape() {
                        return Err(Error::dim(
                            "GradientMap::accumulate",
                            format!("{id:?}: {:?} vs {:?}", acc.shape(), g.shape()),
                        ));
                    }
                    for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
                None => {
                    self.grads.insert(id, g.clone());
                }
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: S) {
        for g in self.grads.values_mut() {
            for v in g.data_mut() {
                *v *= factor;
            }
        }
    }

    /// Largest entry over all gradients of `|self - other| / max(1, |self|)`.
    pub fn max_rel_diff(&self, other: &GradientMap<S>) -> S {
        let mut worst = S::zero();
        for (id, a) in self.iter() {
            let Some(b) = other.get(id) else { return S::infinity() };
            if a.shape() != b.shape() {
                return S::infinity();
            }
            for (&x, &y) in a.data().iter().zip(b.data()) {
                let d = (x - y).abs() / S::one().max(x.abs());
                worst = worst.max(d);
            }
        }
        worst
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    Same,
    /// Right operand repeats with this period over the flat left data.
    Suffix(usize),
}

#[derive(Clone, Debug)]
enum Op<S: Scalar> {
    Leaf,
    Param(ParamId),
    Add(Var, Var, Broadcast),
    Sub(Var, Var, Broadcast),
    Mul(Var, Var, Broadcast),
    Div(Var, Var, Broadcast),
    AddScalar(Var),
    MulScalar(Var, S),
    RSubScalar(Var),
    Neg(Var),
    Log(Var),
    Exp(Var),
    Relu(Var),
    Tanh(Var),
    Square(Var),
    Matmul(Var, Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    SoftmaxRows(Var),
    SoftmaxCrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<S> },
    MeanRows { x: Var, groups: usize },
    ExpandGroups { x: Var, reps: usize },
    SumAll(Var),
    MeanAll(Var),
    RowSums(Var),
    Column(Var, usize),
    Reshape(Var),
    SpatialRows(Var),
    AvgPool2d { x: Var, win: PoolWindow },
    MaxPool2d { x: Var, argmax: Vec<usize> },
    Conv2d { x: Var, w: Var, b: Var, stride: usize, padding: usize },
    BatchNormTrain { x: Var, gamma: Var, beta: Var, xhat: Vec<S>, inv_std: Vec<S>, floored: Vec<bool> },
    BatchNormEval { x: Var, gamma: Var, beta: Var, mean: Vec<S>, inv_std: Vec<S> },
    StopGradient(Var),
}

impl<S: Scalar> Op<S> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param(_) => "param",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::AddScalar(..) => "add_scalar",
            Op::MulScalar(..) => "mul_scalar",
            Op::RSubScalar(..) => "rsub_scalar",
            Op::Neg(..) => "neg",
            Op::Log(..) => "log",
            Op::Exp(..) => "exp",
            Op::Relu(..) => "relu",
            Op::Tanh(..) => "tanh",
            Op::Square(..) => "square",
            Op::Matmul(..) => "matmul",
            Op::Linear { .. } => "linear",
            Op::SoftmaxRows(..) => "softmax_rows",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
            Op::MeanRows { .. } => "mean_rows",
            Op::ExpandGroups { .. } => "expand_groups",
            Op::SumAll(..) => "sum_all",
            Op::MeanAll(..) => "mean_all",
            Op::RowSums(..) => "row_sums",
            Op::Column(..) => "column",
            Op::Reshape(..) => "reshape",
            Op::SpatialRows(..) => "spatial_rows",
            Op::AvgPool2d { .. } => "avg_pool2d",
            Op::MaxPool2d { .. } => "max_pool2d",
            Op::Conv2d { .. } => "conv2d",
            Op::BatchNormTrain { .. } => "batch_norm_train",
            Op::BatchNormEval { .. } => "batch_norm_eval",
            Op::StopGradient(..) => "stop_gradient",
        }
    }

    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf | Op::Param(_) => vec![],
            Op::Add(a, b, _) | Op::Sub(a, b, _) | Op::Mul(a, b, _) | Op::Div(a, b, _) | Op::Matmul(a, b) => {
                vec![*a, *b]
            }
            Op::AddScalar(x)
            | Op::MulScalar(x, _)
            | Op::RSubScalar(x)
            | Op::Neg(x)
            | Op::Log(x)
            | Op::Exp(x)
            | Op::Relu(x)
            | Op::Tanh(x)
            | Op::Square(x)
            | Op::SoftmaxRows(x)
            | Op::SumAll(x)
            | Op::MeanAll(x)
            | Op::RowSums(x)
            | Op::Column(x, _)
            | Op::Reshape(x)
            | Op::SpatialRows(x)
            | Op::StopGradient(x) => vec![*x],
            Op::Linear { x, w, b } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::SoftmaxCrossEntropy { logits, .. } => vec![*logits],
            Op::MeanRows { x, .. } | Op::ExpandGroups { x, .. } => vec![*x],
            Op::AvgPool2d { x, .. } | Op::MaxPool2d { x, .. } => vec![*x],
            Op::Conv2d { x, w, b, .. } => vec![*x, *w, *b],
            Op::BatchNormTrain { x, gamma, beta, .. } | Op::BatchNormEval { x, gamma, beta, .. } => {
                vec![*x, *gamma, *beta]
            }
        }
    }
}

/// One record entry: operation, parents, value and stop-gradient flag.
#[derive(Clone, Debug)]
pub struct TapeNode<S: Scalar = f64> {
    op: Op<S>,
    value: Tensor<S>,
    stop_grad: bool,
    needs_grad: bool,
}

impl<S: Scalar> TapeNode<S> {
    pub fn op_name(&self) -> &'static str {
        self.op.name()
    }

    pub fn parents(&self) -> Vec<Var> {
        self.op.parents()
    }

    pub fn value(&self) -> &Tensor<S> {
        &self.value
    }

    pub fn stop_grad(&self) -> bool {
        self.stop_grad
    }
}

/// Pooling window after the "window larger than input" rule is applied.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolWindow {
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
}

impl PoolWindow {
    /// A window that does not fit along an axis shrinks to that axis' size.
    pub fn fit(kernel: usize, stride: usize, h: usize, w: usize) -> Self {
        Self { kh: kernel.min(h), kw: kernel.min(w), stride: stride.max(1) }
    }

    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        ((h - self.kh) / self.stride + 1, (w - self.kw) / self.stride + 1)
    }
}

/// Batch statistics observed by a training-mode batch norm node.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<S: Scalar = f64> {
    pub mean: Vec<S>,
    /// Unbiased variance, as used for running estimates.
    pub var: Vec<S>,
}

/// Dynamic computation record.
#[derive(Clone, Debug, Default)]
pub struct Tape<S: Scalar = f64> {
    nodes: Vec<TapeNode<S>>,
}

fn broadcast(op: &'static str, a: &[usize], b: &[usize]) -> Result<Broadcast> {
    if a == b {
        return Ok(Broadcast::Same);
    }
    let bn: usize = b.iter().product();
    let an: usize = a.iter().product();
    if bn == 1 {
        return Ok(Broadcast::Suffix(1));
    }
    if b.len() < a.len() && a[a.len() - b.len()..] == *b && an.is_multiple_of(bn) {
        return Ok(Broadcast::Suffix(bn));
    }
    Err(Error::dim(op, format!("cannot broadcast {b:?} onto {a:?}")))
}

fn reduce_to_period<S: Scalar>(g: &[S], period: usize) -> Vec<S> {
    let mut out = vec![S::zero(); period];
    for chunk in g.chunks(period) {
        for (o, &v) in out.iter_mut().zip(chunk) {
            *o += v;
        }
    }
    out
}

fn dims4(op: &'static str, t: &Tensor<impl Scalar>) -> Result<(usize, usize, usize, usize)> {
    match t.shape() {
        [b, c, h, w] => Ok((*b, *c, *h, *w)),
        s => Err(Error::dim(op, format!("expected [B, C, H, W], got {s:?}"))),
    }
}

/// Feature axis layout of a batch-norm input: `(batch, features, spatial)`.
fn bn_layout(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize)> {
    match shape {
        [b, f] => Ok((*b, *f, 1)),
        [b, c, h, w] => Ok((*b, *c, h * w)),
        s => Err(Error::dim(op, format!("expected [B, F] or [B, C, H, W], got {s:?}"))),
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, v: Var) -> &TapeNode<S> {
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, op: Op<S>, value: Tensor<S>) -> Var {
        let stop_grad = matches!(op, Op::StopGradient(_));
        let needs_grad = match &op {
            Op::Param(_) => true,
            Op::StopGradient(_) | Op::Leaf => false,
            other => other.parents().iter().any(|p| self.nodes[p.0].needs_grad),
        };
        self.nodes.push(TapeNode { op, value, stop_grad, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Records a constant input.
    pub fn constant(&mut self, t: Tensor<S>) -> Var {
        self.push(Op::Leaf, t)
    }

    pub fn scalar(&mut self, v: S) -> Var {
        self.constant(Tensor::scalar(v))
    }

    /// Records a trainable parameter. Several nodes may share one id; their
    /// gradients are summed.
    pub fn param(&mut self, t: Tensor<S>, id: ParamId) -> Var {
        self.push(Op::Param(id), t)
    }

    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let v = self.value(x).clone();
        self.push(Op::StopGradient(x), v)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(S, S) -> S,
        make: impl Fn(Var, Var, Broadcast) -> Op<S>,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let bc = broadcast(name, ta.shape(), tb.shape())?;
        let data: Vec<S> = match bc {
            Broadcast::Same => ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect(),
            Broadcast::Suffix(p) => {
                let bd = tb.data();
                ta.data().iter().enumerate().map(|(i, &x)| f(x, bd[i % p])).collect()
            }
        };
        let out = Tensor::from_parts(ta.shape().to_vec(), data);
        Ok(self.push(make(a, b, bc), out))
    }

    /// Elementwise sum; `b` may broadcast over leading axes of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(b).data().iter().any(|v| v.is_zero()) {
            return Err(Error::domain("div", "division by zero"));
        }
        self.binary("div", a, b, |x, y| x / y, Op::Div)
    }

    fn unary(&mut self, x: Var, f: impl Fn(S) -> S, op: Op<S>) -> Var {
        let out = self.value(x).map(f);
        self.push(op, out)
    }

    pub fn add_scalar(&mut self, x: Var, c: S) -> Var {
        self.unary(x, |v| v + c, Op::AddScalar(x))
    }

    pub fn mul_scalar(&mut self, x: Var, c: S) -> Var {
        self.unary(x, |v| v * c, Op::MulScalar(x, c))
    }

    /// `c - x`.
    pub fn rsub_scalar(&mut self, c: S, x: Var) -> Var {
        self.unary(x, |v| c - v, Op::RSubScalar(x))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(x, |v| -v, Op::Neg(x))
    }

    /// Natural log; every input must be strictly positive.
    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some(i) = self.value(x).data().iter().position(|&v| v <= S::zero()) {
            return Err(Error::domain(
                "log",
                format!("non-positive input {} at flat index {i}", self.value(x).data()[i]),
            ));
        }
        Ok(self.unary(x, S::ln, Op::Log(x)))
    }

    /// `log(x + guard)` with a caller-chosen guard constant.
    pub fn log_guarded(&mut self, x: Var, guard: S) -> Result<Var> {
        let shifted = self.add_scalar(x, guard);
        self.log(shifted)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, S::exp, Op::Exp(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(S::zero()), Op::Relu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, S::tanh, Op::Tanh(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    /// `[B, m] x [m, k] -> [B, k]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(Op::Matmul(a, b), out))
    }

    /// Dense layer `x · wᵀ + b` with `w` stored as `[out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (bsz, fin) = self.value(x).matrix_dims("linear")?;
        let (fout, win) = self.value(w).matrix_dims("linear")?;
        if fin != win {
            return Err(Error::dim("linear", format!("input width {fin}, weight expects {win}")));
        }
        let mut out = vec![S::zero(); bsz * fout];
        if let Some(b) = b {
            let bias = self.value(b);
            if bias.len() != fout {
                return Err(Error::dim("linear", format!("bias has {} entries for {fout} outputs", bias.len())));
            }
            for row in out.chunks_mut(fout) {
                row.copy_from_slice(bias.data());
            }
        }
        S::gemm(
            bsz,
            fin,
            fout,
            S::one(),
            self.value(x).data(),
            (fin as isize, 1),
            self.value(w).data(),
            (1, fin as isize),
            S::one(),
            &mut out,
            (fout as isize, 1),
        );
        Ok(self.push(Op::Linear { x, w, b }, Tensor::from_parts(vec![bsz, fout], out)))
    }

    /// Row-wise softmax of a matrix, computed with max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (_, k) = t.matrix_dims("softmax_rows")?;
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(k) {
            softmax_in_place(row);
        }
        let out = Tensor::from_parts(t.shape().to_vec(), data);
        Ok(self.push(Op::SoftmaxRows(x), out))
    }

    /// Mean softmax cross-entropy of `[B, K]` logits against class labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let (b, k) = t.matrix_dims("softmax_cross_entropy")?;
        if labels.len() != b {
            return Err(Error::dim("softmax_cross_entropy", format!("{} labels for {b} rows", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::arg(format!("label {bad} out of range for {k} classes")));
        }
        let mut probs = t.data().to_vec();
        let mut loss = S::zero();
        for (row, &l) in probs.chunks_mut(k).zip(labels) {
            softmax_in_place(row);
            loss -= row[l].max(S::min_positive_value()).ln();
        }
        let loss = loss / S::of(b as f64);
        Ok(self.push(
            Op::SoftmaxCrossEntropy { logits, labels: labels.to_vec(), probs },
            Tensor::scalar(loss),
        ))
    }

    /// Arithmetic mean over the batch axis: `[B, K] -> [K]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        self.mean_rows_grouped(x, 1)
    }

    /// Means over `groups` consecutive row blocks of equal size:
    /// `[G*B, K] -> [G, K]` (or `[K]` when `groups == 1`).
    pub fn mean_rows_grouped(&mut self, x: Var, groups: usize) -> Result<Var> {
        let t = self.value(x);
        let (rows, k) = t.matrix_dims("mean_rows")?;
        if rows == 0 || groups == 0 || rows % groups != 0 {
            return Err(Error::arg(format!("mean_rows: {rows} rows cannot form {groups} groups")));
        }
        let per = rows / groups;
        let inv = S::one() / S::of(per as f64);
        let mut out = vec![S::zero(); groups * k];
        for (g, block) in t.data().chunks(per * k).enumerate() {
            let acc = &mut out[g * k..(g + 1) * k];
            for row in block.chunks(k) {
                for (a, &v) in acc.iter_mut().zip(row) {
                    *a += v;
                }
            }
            for a in acc.iter_mut() {
                *a *= inv;
            }
        }
        let shape = if groups == 1 { vec![k] } else { vec![groups, k] };
        Ok(self.push(Op::MeanRows { x, groups }, Tensor::from_parts(shape, out)))
    }

    /// Repeats each row of `[G, K]` (or a `[K]` vector) `reps` times:
    /// `-> [G*reps, K]`.
    pub fn expand_groups(&mut self, x: Var, reps: usize) -> Result<Var> {
        let t = self.value(x);
        let (g, k) = match t.shape() {
            [k] => (1, *k),
            [g, k] => (*g, *k),
            s => return Err(Error::dim("expand_groups", format!("expected [K] or [G, K], got {s:?}"))),
        };
        let mut out = Vec::with_capacity(g * reps * k);
        for row in t.data().chunks(k) {
            for _ in 0..reps {
                out.extend_from_slice(row);
            }
        }
        Ok(self.push(Op::ExpandGroups { x, reps }, Tensor::from_parts(vec![g * reps, k], out)))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Op::SumAll(x), Tensor::scalar(s))
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let s = self.value(x).mean();
        self.push(Op::MeanAll(x), Tensor::scalar(s))
    }

    /// Sum over the trailing axis of a matrix: `[B, K] -> [B]`.
    pub fn row_sums(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (b, k) = t.matrix_dims("row_sums")?;
        let data = t.data().chunks(k).map(|r| r.iter().copied().sum()).collect();
        Ok(self.push(Op::RowSums(x), Tensor::from_parts(vec![b], data)))
    }

    /// Column `j` of a matrix: `[B, K] -> [B]`.
    pub fn column(&mut self, x: Var, j: usize) -> Result<Var> {
        let t = self.value(x);
        let (b, k) = t.matrix_dims("column")?;
        if j >= k {
            return Err(Error::dim("column", format!("column {j} of {k}")));
        }
        let data = (0..b).map(|i| t.data()[i * k + j]).collect();
        Ok(self.push(Op::Column(x, j), Tensor::from_parts(vec![b], data)))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        Ok(self.push(Op::Reshape(x), out))
    }

    /// `[B, C, H, W] -> [H*W*B, C]`, location-major: rows `l*B .. (l+1)*B`
    /// hold the batch at spatial location `l = h*W + w`.
    pub fn spatial_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (b, c, h, w) = dims4("spatial_rows", t)?;
        let hw = h * w;
        let src = t.data();
        let mut out = vec![S::zero(); b * c * hw];
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * hw;
                for l in 0..hw {
                    out[(l * b + bi) * c + ci] = src[base + l];
                }
            }
        }
        Ok(self.push(Op::SpatialRows(x), Tensor::from_parts(vec![hw * b, c], out)))
    }

    /// Average pooling over `[B, C, H, W]`; a kernel larger than an axis
    /// shrinks to the axis length.
    pub fn avg_pool2d(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let t = self.value(x);
        let (b, c, h, w) = dims4("avg_pool2d", t)?;
        let win = PoolWindow::fit(kernel, stride, h, w);
        let (oh, ow) = win.output_hw(h, w);
        let inv = S::one() / S::of((win.kh * win.kw) as f64);
        let src = t.data();
        let mut out = Vec::with_capacity(b * c * oh * ow);
        for plane in src.chunks(h * w) {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = S::zero();
                    for dy in 0..win.kh {
                        let row = (oy * win.stride + dy) * w + ox * win.stride;
                        for dx in 0..win.kw {
                            acc += plane[row + dx];
                        }
                    }
                    out.push(acc * inv);
                }
            }
        }
        Ok(self.push(Op::AvgPool2d { x, win }, Tensor::from_parts(vec![b, c, oh, ow], out)))
    }

    pub fn max_pool2d(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let t = self.value(x);
        let (b, c, h, w) = dims4("max_pool2d", t)?;
        let win = PoolWindow::fit(kernel, stride, h, w);
        let (oh, ow) = win.output_hw(h, w);
        let src = t.data();
        let mut out = Vec::with_capacity(b * c * oh * ow);
        let mut argmax = Vec::with_capacity(b * c * oh * ow);
        for (p, plane) in src.chunks(h * w).enumerate() {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = (S::neg_infinity(), 0);
                    for dy in 0..win.kh {
                        for dx in 0..win.kw {
                            let idx = (oy * win.stride + dy) * w + ox * win.stride + dx;
                            if plane[idx] > best.0 {
                                best = (plane[idx], idx);
                            }
                        }
                    }
                    out.push(best.0);
                    argmax.push(p * h * w + best.1);
                }
            }
        }
        Ok(self.push(Op::MaxPool2d { x, argmax }, Tensor::from_parts(vec![b, c, oh, ow], out)))
    }

    /// 2-D convolution (cross-correlation) with square kernels
    /// `w: [C_out, C_in, k, k]`, `b: [C_out]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, padding: usize) -> Result<Var> {
        let (bsz, cin, h, wd) = dims4("conv2d", self.value(x))?;
        let (cout, wcin, k, k2) = dims4("conv2d", self.value(w))?;
        if wcin != cin || k != k2 {
            return Err(Error::dim(
                "conv2d",
                format!("input has {cin} channels, kernels {:?}", self.value(w).shape()),
            ));
        }
        if self.value(b).len() != cout {
            return Err(Error::dim("conv2d", "bias length differs from filter count"));
        }
        let geo = ConvGeometry::new(cin, h, wd, k, stride, padding)?;
        let (oh, ow) = (geo.oh, geo.ow);
        let ncol = oh * ow;
        let krows = cin * k * k;
        let mut out = vec![S::zero(); bsz * cout * ncol];
        let mut cols = vec![S::zero(); krows * ncol];
        let xd = self.value(x).data();
        let wdata = self.value(w).data();
        let bias = self.value(b).data();
        for bi in 0..bsz {
            geo.im2col(&xd[bi * cin * h * wd..(bi + 1) * cin * h * wd], &mut cols);
            let dst = &mut out[bi * cout * ncol..(bi + 1) * cout * ncol];
            for (co, row) in dst.chunks_mut(ncol).enumerate() {
                row.fill(bias[co]);
            }
            S::gemm(
                cout,
                krows,
                ncol,
                S::one(),
                wdata,
                (krows as isize, 1),
                &cols,
                (ncol as isize, 1),
                S::one(),
                dst,
                (ncol as isize, 1),
            );
        }
        let value = Tensor::from_parts(vec![bsz, cout, oh, ow], out);
        Ok(self.push(Op::Conv2d { x, w, b, stride, padding }, value))
    }

    /// Batch normalization with batch statistics. Variance is floored at
    /// `var_floor` so constant features map to `beta`.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        var_floor: S,
    ) -> Result<(Var, BatchStats<S>)> {
        let t = self.value(x);
        let (b, f, sp) = bn_layout("batch_norm", t.shape())?;
        if b < 2 {
            return Err(Error::arg("batch norm in training mode needs a batch of at least 2"));
        }
        if self.value(gamma).len() != f || self.value(beta).len() != f {
            return Err(Error::dim("batch_norm", "scale/shift length differs from feature count"));
        }
        let n = S::of((b * sp) as f64);
        let src = t.data();
        let mut mean = vec![S::zero(); f];
        let mut var = vec![S::zero(); f];
        for bi in 0..b {
            for fi in 0..f {
                let base = (bi * f + fi) * sp;
                for &v in &src[base..base + sp] {
                    mean[fi] += v;
                }
            }
        }
        for m in &mut mean {
            *m /= n;
        }
        for bi in 0..b {
            for fi in 0..f {
                let base = (bi * f + fi) * sp;
                for &v in &src[base..base + sp] {
                    let d = v - mean[fi];
                    var[fi] += d * d;
                }
            }
        }
        for v in &mut var {
            *v /= n;
        }
        let floored: Vec<bool> = var.iter().map(|&v| v < var_floor).collect();
        let inv_std: Vec<S> = var.iter().map(|&v| S::one() / v.max(var_floor).sqrt()).collect();
        let g = self.value(gamma).data();
        let be = self.value(beta).data();
        let mut xhat = vec![S::zero(); src.len()];
        let mut out = vec![S::zero(); src.len()];
        for bi in 0..b {
            for fi in 0..f {
                let base = (bi * f + fi) * sp;
                for j in base..base + sp {
                    let xh = (src[j] - mean[fi]) * inv_std[fi];
                    xhat[j] = xh;
                    out[j] = g[fi] * xh + be[fi];
                }
            }
        }
        let unbias = if b * sp > 1 { n / (n - S::one()) } else { S::one() };
        let stats = BatchStats { mean: mean.clone(), var: var.iter().map(|&v| v * unbias).collect() };
        let value = Tensor::from_parts(t.shape().to_vec(), out);
        let v = self.push(Op::BatchNormTrain { x, gamma, beta, xhat, inv_std, floored }, value);
        Ok((v, stats))
    }

    /// Batch normalization with fixed statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[S],
        running_var: &[S],
        var_floor: S,
    ) -> Result<Var> {
        let t = self.value(x);
        let (b, f, sp) = bn_layout("batch_norm", t.shape())?;
        if running_mean.len() != f || running_var.len() != f {
            return Err(Error::dim("batch_norm", "running statistics length differs from feature count"));
        }
        let inv_std: Vec<S> = running_var.iter().map(|&v| S::one() / v.max(var_floor).sqrt()).collect();
        let g = self.value(gamma).data();
        let be = self.value(beta).data();
        let src = t.data();
        let mut out = vec![S::zero(); src.len()];
        for bi in 0..b {
            for fi in 0..f {
                let base = (bi * f + fi) * sp;
                for j in base..base + sp {
                    out[j] = g[fi] * (src[j] - running_mean[fi]) * inv_std[fi] + be[fi];
                }
            }
        }
        let value = Tensor::from_parts(t.shape().to_vec(), out);
        Ok(self.push(
            Op::BatchNormEval { x, gamma, beta, mean: running_mean.to_vec(), inv_std },
            value,
        ))
    }

    /// Reverse sweep from a scalar loss. Every parameter recorded on the tape
    /// receives an entry, zero when it does not influence the loss.
    pub fn backward(&self, loss: Var) -> Result<GradientMap<S>> {
        let grads = self.sweep(loss)?;
        let mut map = GradientMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Param(id) = node.op {
                let g = grads[i].clone().unwrap_or_else(|| Tensor::zeros(node.value.shape().to_vec()));
                let single = GradientMap { grads: BTreeMap::from([(id, g)]) };
                map.accumulate(&single)?;
            }
        }
        Ok(map)
    }

    fn sweep(&self, loss: Var) -> Result<Vec<Option<Tensor<S>>>> {
        if self.value(loss).len() != 1 {
            return Err(Error::arg(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor<S>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::ones(self.shape(loss).to_vec()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if node.stop_grad || !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(node.op, Op::Param(_)) {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut grads)?;
        }
        Ok(grads)
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, node: &TapeNode<S>, g: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) -> Result<()> {
        let gd = g.data();
        let y = &node.value;
        match &node.op {
            Op::Leaf | Op::Param(_) | Op::StopGradient(_) => {}
            Op::Add(a, b, bc) => {
                if self.wants(*a) {
                    acc(grads, *a, g.clone());
                }
                if self.wants(*b) {
                    let gb = self.reduce_rhs(*b, gd, *bc, |v, _| v);
                    acc(grads, *b, gb);
                }
            }
            Op::Sub(a, b, bc) => {
                if self.wants(*a) {
                    acc(grads, *a, g.clone());
                }
                if self.wants(*b) {
                    let gb = self.reduce_rhs(*b, gd, *bc, |v, _| -v);
                    acc(grads, *b, gb);
                }
            }
            Op::Mul(a, b, bc) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let ga = zip_bcast(gd, tb.data(), *bc, |gv, bv| gv * bv);
                    acc(grads, *a, Tensor::from_parts(ta.shape().to_vec(), ga));
                }
                if self.wants(*b) {
                    let prod: Vec<S> = gd.iter().zip(ta.data()).map(|(&gv, &av)| gv * av).collect();
                    let gb = self.reduce_rhs(*b, &prod, *bc, |v, _| v);
                    acc(grads, *b, gb);
                }
            }
            Op::Div(a, b, bc) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let ga = zip_bcast(gd, tb.data(), *bc, |gv, bv| gv / bv);
                    acc(grads, *a, Tensor::from_parts(ta.shape().to_vec(), ga));
                }
                if self.wants(*b) {
                    // d(a/b)/db = -y/b
                    let t: Vec<S> = zip_bcast(gd, tb.data(), *bc, |gv, bv| gv / bv)
                        .into_iter()
                        .zip(y.data())
                        .map(|(v, &yv)| -v * yv)
                        .collect();
                    let gb = self.reduce_rhs(*b, &t, *bc, |v, _| v);
                    acc(grads, *b, gb);
                }
            }
            Op::AddScalar(x) => acc(grads, *x, g.clone()),
            Op::MulScalar(x, c) => acc(grads, *x, g.map(|v| v * *c)),
            Op::RSubScalar(x) | Op::Neg(x) => acc(grads, *x, g.map(|v| -v)),
            Op::Log(x) => {
                let gx = g.zip_map(self.value(*x), |gv, xv| gv / xv)?;
                acc(grads, *x, gx);
            }
            Op::Exp(x) => acc(grads, *x, g.zip_map(y, |gv, yv| gv * yv)?),
            Op::Relu(x) => {
                let gx = g.zip_map(self.value(*x), |gv, xv| if xv > S::zero() { gv } else { S::zero() })?;
                acc(grads, *x, gx);
            }
            Op::Tanh(x) => acc(grads, *x, g.zip_map(y, |gv, yv| gv * (S::one() - yv * yv))?),
            Op::Square(x) => {
                let two = S::of(2.0);
                acc(grads, *x, g.zip_map(self.value(*x), |gv, xv| two * gv * xv)?);
            }
            Op::Matmul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = ta.matrix_dims("matmul")?;
                let n = tb.shape()[1];
                if self.wants(*a) {
                    let mut ga = vec![S::zero(); m * k];
                    S::gemm(m, n, k, S::one(), gd, (n as isize, 1), tb.data(), (1, n as isize), S::zero(), &mut ga, (k as isize, 1));
                    acc(grads, *a, Tensor::from_parts(vec![m, k], ga));
                }
                if self.wants(*b) {
                    let mut gb = vec![S::zero(); k * n];
                    S::gemm(k, m, n, S::one(), ta.data(), (1, k as isize), gd, (n as isize, 1), S::zero(), &mut gb, (n as isize, 1));
                    acc(grads, *b, Tensor::from_parts(vec![k, n], gb));
                }
            }
            Op::Linear { x, w, b } => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let (bsz, fin) = tx.matrix_dims("linear")?;
                let fout = tw.shape()[0];
                if self.wants(*x) {
                    let mut gx = vec![S::zero(); bsz * fin];
                    S::gemm(bsz, fout, fin, S::one(), gd, (fout as isize, 1), tw.data(), (fin as isize, 1), S::zero(), &mut gx, (fin as isize, 1));
                    acc(grads, *x, Tensor::from_parts(vec![bsz, fin], gx));
                }
                if self.wants(*w) {
                    let mut gw = vec![S::zero(); fout * fin];
                    S::gemm(fout, bsz, fin, S::one(), gd, (1, fout as isize), tx.data(), (fin as isize, 1), S::zero(), &mut gw, (fin as isize, 1));
                    acc(grads, *w, Tensor::from_parts(vec![fout, fin], gw));
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        acc(grads, *b, Tensor::from_parts(vec![fout], reduce_to_period(gd, fout)));
                    }
                }
            }
            Op::SoftmaxRows(x) => {
                let k = y.shape()[1];
                let mut gx = Vec::with_capacity(gd.len());
                for (grow, yrow) in gd.chunks(k).zip(y.data().chunks(k)) {
                    let dot: S = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                    gx.extend(grow.iter().zip(yrow).map(|(&gv, &yv)| yv * (gv - dot)));
                }
                acc(grads, *x, Tensor::from_parts(y.shape().to_vec(), gx));
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                let shape = self.shape(*logits).to_vec();
                let k = shape[1];
                let scale = gd[0] / S::of(labels.len() as f64);
                let mut gx = probs.clone();
                for (row, &l) in gx.chunks_mut(k).zip(labels) {
                    row[l] -= S::one();
                    for v in row.iter_mut() {
                        *v *= scale;
                    }
                }
                acc(grads, *logits, Tensor::from_parts(shape, gx));
            }
            Op::MeanRows { x, groups } => {
                let shape = self.shape(*x).to_vec();
                let (rows, k) = (shape[0], shape[1]);
                let per = rows / groups;
                let inv = S::one() / S::of(per as f64);
                let mut gx = Vec::with_capacity(rows * k);
                for grow in gd.chunks(k) {
                    for _ in 0..per {
                        gx.extend(grow.iter().map(|&v| v * inv));
                    }
                }
                acc(grads, *x, Tensor::from_parts(shape, gx));
            }
            Op::ExpandGroups { x, reps } => {
                let shape = self.shape(*x).to_vec();
                let k = *shape.last().unwrap_or(&1);
                let mut gx = vec![S::zero(); self.value(*x).len()];
                for (r, grow) in gd.chunks(k).enumerate() {
                    let dst = &mut gx[(r / reps) * k..(r / reps + 1) * k];
                    for (d, &v) in dst.iter_mut().zip(grow) {
                        *d += v;
                    }
                }
                acc(grads, *x, Tensor::from_parts(shape, gx));
            }
            Op::SumAll(x) => acc(grads, *x, Tensor::full(self.shape(*x).to_vec(), gd[0])),
            Op::MeanAll(x) => {
                let n = S::of(self.value(*x).len() as f64);
                acc(grads, *x, Tensor::full(self.shape(*x).to_vec(), gd[0] / n));
            }
            Op::RowSums(x) => {
                let shape = self.shape(*x).to_vec();
                let k = shape[1];
                let gx = gd.iter().flat_map(|&v| std::iter::repeat_n(v, k)).collect();
                acc(grads, *x, Tensor::from_parts(shape, gx));
            }
            Op::Column(x, j) => {
                let shape = self.shape(*x).to_vec();
                let k = shape[1];
                let mut gx = vec![S::zero(); self.value(*x).len()];
                for (i, &v) in gd.iter().enumerate() {
                    gx[i * k + j] = v;
                }
                acc(grads, *x, Tensor::from_parts(shape, gx));
            }
            Op::Reshape(x) => acc(grads, *x, Tensor::from_parts(self.shape(*x).to_vec(), gd.to_vec())),
            Op::SpatialRows(x) => {
                let shape = self.shape(*x).to_vec();
                let (b, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
                let mut gx = vec![S::zero(); gd.len()];
                for bi in 0..b {
                    for ci in 0..c {
                        let base = (bi * c + ci) * hw;
                        for l in 0..hw {
                            gx[base + l] = gd[(l * b + bi) * c + ci];
                        }
                    }
                }
                acc(grads, *x, Tensor::from_parts(shape, gx));
            }
            Op::AvgPool2d { x, win } => {
                let shape = self.shape(*x).to_vec();
                let (h, w) = (shape[2], shape[3]);
                let (oh, ow) = win.output_hw(h, w);
                let inv = S::one() / S::of((win.kh * win.kw) as f64);
                let mut gx = vec![S::zero(); self.value(*x).len()];
                for (plane, gplane) in gx.chunks_mut(h * w).zip(gd.chunks(oh * ow)) {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let gv = gplane[oy * ow + ox] * inv;
                            for dy in 0..win.kh {
                                let row = (oy * win.stride + dy) * w + ox * win.stride;
                                for dx in 0..win.kw {
                                    plane[row + dx] += gv;
                                }
                            }
                        }
                    }
                }
                acc(grads, *x, Tensor::from_parts(shape, gx));
            }
            Op::MaxPool2d { x, argmax } => {
                let mut gx = vec![S::zero(); self.value(*x).len()];
                for (&src, &gv) in argmax.iter().zip(gd) {
                    gx[src] += gv;
                }
                acc(grads, *x, Tensor::from_parts(self.shape(*x).to_vec(), gx));
            }
            Op::Conv2d { x, w, b, stride, padding } => {
                let (bsz, cin, h, wd) = dims4("conv2d", self.value(*x))?;
                let (cout, _, k, _) = dims4("conv2d", self.value(*w))?;
                let geo = ConvGeometry::new(cin, h, wd, k, *stride, *padding)?;
                let ncol = geo.oh * geo.ow;
                let krows = cin * k * k;
                let xd = self.value(*x).data();
                let wdata = self.value(*w).data();
                let (want_x, want_w, want_b) = (self.wants(*x), self.wants(*w), self.wants(*b));
                let mut gx = if want_x { vec![S::zero(); xd.len()] } else { Vec::new() };
                let mut gw = vec![S::zero(); if want_w { wdata.len() } else { 0 }];
                let mut gb = vec![S::zero(); cout];
                let mut cols = vec![S::zero(); krows * ncol];
                let mut gcols = vec![S::zero(); krows * ncol];
                for bi in 0..bsz {
                    let gy = &gd[bi * cout * ncol..(bi + 1) * cout * ncol];
                    if want_b {
                        for (co, row) in gy.chunks(ncol).enumerate() {
                            gb[co] += row.iter().copied().sum::<S>();
                        }
                    }
                    if want_w {
                        geo.im2col(&xd[bi * cin * h * wd..(bi + 1) * cin * h * wd], &mut cols);
                        S::gemm(cout, ncol, krows, S::one(), gy, (ncol as isize, 1), &cols, (1, ncol as isize), S::one(), &mut gw, (krows as isize, 1));
                    }
                    if want_x {
                        S::gemm(krows, cout, ncol, S::one(), wdata, (1, krows as isize), gy, (ncol as isize, 1), S::zero(), &mut gcols, (ncol as isize, 1));
                        geo.col2im(&gcols, &mut gx[bi * cin * h * wd..(bi + 1) * cin * h * wd]);
                    }
                }
                if want_x {
                    acc(grads, *x, Tensor::from_parts(self.shape(*x).to_vec(), gx));
                }
                if want_w {
                    acc(grads, *w, Tensor::from_parts(self.shape(*w).to_vec(), gw));
                }
                if want_b {
                    acc(grads, *b, Tensor::from_parts(vec![cout], gb));
                }
            }
            Op::BatchNormTrain { x, gamma, beta, xhat, inv_std, floored } => {
                let shape = self.shape(*x).to_vec();
                let (b, f, sp) = bn_layout("batch_norm", &shape)?;
                let gam = self.value(*gamma).data();
                let mut sum_g = vec![S::zero(); f];
                let mut sum_gx = vec![S::zero(); f];
                for bi in 0..b {
                    for fi in 0..f {
                        let base = (bi * f + fi) * sp;
                        for j in base..base + sp {
                            sum_g[fi] += gd[j];
                            sum_gx[fi] += gd[j] * xhat[j];
                        }
                    }
                }
                if self.wants(*gamma) {
                    acc(grads, *gamma, Tensor::from_parts(vec![f], sum_gx.clone()));
                }
                if self.wants(*beta) {
                    acc(grads, *beta, Tensor::from_parts(vec![f], sum_g.clone()));
                }
                if self.wants(*x) {
                    let n = S::of((b * sp) as f64);
                    let mut gx = vec![S::zero(); gd.len()];
                    for bi in 0..b {
                        for fi in 0..f {
                            let base = (bi * f + fi) * sp;
                            let (mg, mgx) = (sum_g[fi] * gam[fi] / n, sum_gx[fi] * gam[fi] / n);
                            for j in base..base + sp {
                                let gh = gd[j] * gam[fi];
                                gx[j] = if floored[fi] {
                                    inv_std[fi] * (gh - mg)
                                } else {
                                    inv_std[fi] * (gh - mg - xhat[j] * mgx)
                                };
                            }
                        }
                    }
                    acc(grads, *x, Tensor::from_parts(shape, gx));
                }
            }
            Op::BatchNormEval { x, gamma, beta, mean, inv_std } => {
                let shape = self.shape(*x).to_vec();
                let (b, f, sp) = bn_layout("batch_norm", &shape)?;
                let xd = self.value(*x).data();
                let gam = self.value(*gamma).data();
                let mut sum_g = vec![S::zero(); f];
                let mut sum_gx = vec![S::zero(); f];
                let mut gx = vec![S::zero(); gd.len()];
                for bi in 0..b {
                    for fi in 0..f {
                        let base = (bi * f + fi) * sp;
                        for j in base..base + sp {
                            sum_g[fi] += gd[j];
                            sum_gx[fi] += gd[j] * (xd[j] - mean[fi]) * inv_std[fi];
                            gx[j] = gd[j] * gam[fi] * inv_std[fi];
                        }
                    }
                }
                if self.wants(*gamma) {
                    acc(grads, *gamma, Tensor::from_parts(vec![f], sum_gx));
                }
                if self.wants(*beta) {
                    acc(grads, *beta, Tensor::from_parts(vec![f], sum_g));
                }
                if self.wants(*x) {
                    acc(grads, *x, Tensor::from_parts(shape, gx));
                }
            }
        }
        Ok(())
    }

    fn reduce_rhs(&self, b: Var, g: &[S], bc: Broadcast, f: impl Fn(S, usize) -> S) -> Tensor<S> {
        let shape = self.shape(b).to_vec();
        let mapped: Vec<S> = g.iter().enumerate().map(|(i, &v)| f(v, i)).collect();
        match bc {
            Broadcast::Same => Tensor::from_parts(shape, mapped),
            Broadcast::Suffix(p) => Tensor::from_parts(shape, reduce_to_period(&mapped, p)),
        }
    }
}

fn zip_bcast<S: Scalar>(g: &[S], b: &[S], bc: Broadcast, f: impl Fn(S, S) -> S) -> Vec<S> {
    match bc {
        Broadcast::Same => g.iter().zip(b).map(|(&x, &y)| f(x, y)).collect(),
        Broadcast::Suffix(p) => g.iter().enumerate().map(|(i, &x)| f(x, b[i % p])).collect(),
    }
}

fn acc<S: Scalar>(grads: &mut [Option<Tensor<S>>], v: Var, g: Tensor<S>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (a, &b) in existing.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

pub(crate) fn softmax_in_place<S: Scalar>(row: &mut [S]) {
    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
    let mut total = S::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// im2col geometry for a single image.
#[derive(Clone, Copy, Debug)]
struct ConvGeometry {
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeometry {
    fn new(cin: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Result<Self> {
        if stride == 0 {
            return Err(Error::arg("conv2d stride must be positive"));
        }
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(Error::dim("conv2d", format!("kernel {k} larger than padded input {h}x{w}")));
        }
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (w + 2 * pad - k) / stride + 1;
        Ok(Self { cin, h, w, k, stride, pad, oh, ow })
    }

    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let y = (oy * self.stride + ky) as isize - self.pad as isize;
        let x = (ox * self.stride + kx) as isize - self.pad as isize;
        (y >= 0 && x >= 0 && (y as usize) < self.h && (x as usize) < self.w).then_some((y as usize, x as usize))
    }

    fn im2col<S: Scalar>(&self, img: &[S], cols: &mut [S]) {
        let ncol = self.oh * self.ow;
        for c in 0..self.cin {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = ((c * self.k + ky) * self.k + kx) * ncol;
                    for oy in 0..self.oh {
                        for ox in 0..self.ow {
                            cols[row + oy * self.ow + ox] = match self.source(oy, ox, ky, kx) {
                                Some((y, x)) => img[(c * self.h + y) * self.w + x],
                                None => S::zero(),
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im<S: Scalar>(&self, cols: &[S], img: &mut [S]) {
        let ncol = self.oh * self.ow;
        for c in 0..self.cin {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = ((c * self.k + ky) * self.k + kx) * ncol;
                    for oy in 0..self.oh {
                        for ox in 0..self.ow {
                            if let Some((y, x)) = self.source(oy, ox, ky, kx) {
                                img[(c * self.h + y) * self.w + x] += cols[row + oy * self.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}
