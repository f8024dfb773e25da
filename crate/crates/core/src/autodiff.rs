//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] is an append-only arena of recorded operations. Every value
//! produced while a tape is live is a [`Var`], a cheap copyable handle into
//! that arena. Because nodes can only reference earlier nodes, the arena order
//! is already a topological order and the backward sweep is a single reverse
//! pass.
//!
//! Plain [`Tensor`]s carry no provenance. They are the currency for
//! parameters, datasets and results, and they are freely shareable across
//! threads. A tape (and every `Var` borrowed from it) stays on one thread.
//!
//! Misuse that indicates a programming error (shape mismatches, `ln` of a
//! non-positive value, a non-scalar backward root) panics.

use std::cell::{Ref, RefCell};
use std::fmt;
use std::ops;

/// Dense row-major array of `f64`.
#[derive(Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        let numel: usize = shape.iter().product();
        assert_eq!(numel, data.len(), "shape {shape:?} needs {numel} values, got {}", data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self { shape, data: vec![0.0; numel] }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let numel = shape.iter().product();
        Self { shape, data: vec![value; numel] }
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: vec![], data: vec![value] }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self { shape: vec![data.len()], data }
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        let data = rows.iter().flatten().copied().collect();
        Self { shape: vec![rows.len(), cols], data }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    /// Element `(i, j)` of a matrix.
    pub fn at(&self, i: usize, j: usize) -> f64 {
        assert_eq!(self.shape.len(), 2);
        self.data[i * self.shape[1] + j]
    }

    pub fn reshaped(mut self, shape: Vec<usize>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), self.data.len());
        self.shape = shape;
        self
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    /// Largest absolute element-wise difference; shapes must agree.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}{:?}", self.shape, self.data)
    }
}

/// How the right operand of a binary op maps onto the left operand's shape.
#[derive(Clone, Copy, Debug)]
enum Broadcast {
    Same,
    Scalar,
    /// `b` matches the trailing extents of `a`; `b[i % len]`.
    Trailing(usize),
    /// `b` is `[m, 1]` against `a` of `[m, n]`; `b[i / n]`.
    Column(usize),
}

impl Broadcast {
    fn resolve(a: &[usize], b: &[usize]) -> Self {
        let b_numel: usize = b.iter().product();
        if a == b {
            Broadcast::Same
        } else if b_numel == 1 {
            Broadcast::Scalar
        } else if b.len() < a.len() && a.ends_with(b) {
            Broadcast::Trailing(b_numel)
        } else if a.len() == 2 && b.len() == 2 && b[0] == a[0] && b[1] == 1 {
            Broadcast::Column(a[1])
        } else {
            panic!("cannot broadcast {b:?} onto {a:?}")
        }
    }

    #[inline]
    fn index(self, i: usize) -> usize {
        match self {
            Broadcast::Same => i,
            Broadcast::Scalar => 0,
            Broadcast::Trailing(len) => i % len,
            Broadcast::Column(n) => i / n,
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug)]
enum UnaryKind {
    Ln,
    Exp,
    Logistic,
    LnLogistic,
    Relu,
    Square,
    Recip,
    Scale(f64),
    Shift(f64),
    ClampMin(f64),
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Binary(BinaryKind, usize, usize, Broadcast),
    Unary(UnaryKind, usize),
    SumAll(usize),
    /// Sum over one axis, viewed as `[outer, extent, inner]`.
    SumAxis {
        input: usize,
        outer: usize,
        extent: usize,
        inner: usize,
    },
    MeanAll(usize),
    MaxAll {
        input: usize,
        index: usize,
    },
    Reshape(usize),
    /// Stack equally shaped inputs along a new axis, viewed as `[outer, inner]` per input.
    Stack {
        inputs: Vec<usize>,
        outer: usize,
        inner: usize,
    },
    /// Pick one slice along an axis, viewed as `[outer, extent, inner]`.
    Select {
        input: usize,
        outer: usize,
        extent: usize,
        inner: usize,
        index: usize,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recording arena for one differentiable computation.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<Vec<Option<Vec<f64>>>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.value())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, requires_grad });
        self.grads.borrow_mut().push(None);
        Var { tape: self, id: nodes.len() - 1 }
    }

    /// A differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// A constant input; no gradient is tracked for it.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Accumulated gradient of `v`, if any backward pass reached it.
    pub fn grad(&self, v: Var<'_>) -> Option<Tensor> {
        let grads = self.grads.borrow();
        let nodes = self.nodes.borrow();
        grads[v.id].as_ref().map(|g| Tensor::new(nodes[v.id].value.shape.clone(), g.clone()))
    }

    /// Clears every accumulated gradient.
    pub fn zero_grad(&self) {
        for g in self.grads.borrow_mut().iter_mut() {
            *g = None;
        }
    }

    /// Accumulates `d root / d v` into the gradient of every reachable
    /// `requires_grad` node.
    pub fn backward(&self, root: Var<'_>) {
        let nodes = self.nodes.borrow();
        let root_node = &nodes[root.id];
        assert_eq!(root_node.value.numel(), 1, "backward root must be scalar, got shape {:?}", root_node.value.shape);
        assert!(root_node.requires_grad, "backward root does not require grad");

        let mut local: Vec<Option<Vec<f64>>> = vec![None; root.id + 1];
        local[root.id] = Some(vec![1.0]);
        for id in (0..=root.id).rev() {
            let Some(g) = local[id].take() else { continue };
            let node = &nodes[id];
            if node.requires_grad {
                propagate(&nodes, node, &g, &mut local);
            }
            local[id] = Some(g);
        }

        let mut grads = self.grads.borrow_mut();
        for (id, g) in local.into_iter().enumerate() {
            let Some(g) = g else { continue };
            if !nodes[id].requires_grad {
                continue;
            }
            match &mut grads[id] {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                slot => *slot = Some(g),
            }
        }
    }
}

fn accumulate(local: &mut [Option<Vec<f64>>], id: usize, len: usize) -> &mut [f64] {
    local[id].get_or_insert_with(|| vec![0.0; len])
}

/// Pushes the output gradient `g` of `node` into its inputs.
fn propagate(nodes: &[Node], node: &Node, g: &[f64], local: &mut [Option<Vec<f64>>]) {
    let needs = |id: usize| nodes[id].requires_grad;
    match &node.op {
        Op::Leaf => {}
        &Op::MatMul(a, b) => {
            let av = &nodes[a].value;
            let bv = &nodes[b].value;
            let (m, k, n) = (av.shape[0], av.shape[1], bv.shape[1]);
            if needs(a) {
                // ga[i][p] += sum_j g[i][j] * b[p][j]
                let ga = accumulate(local, a, m * k);
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let brow = &bv.data[p * n..(p + 1) * n];
                        ga[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                    }
                }
            }
            if needs(b) {
                // gb[p][j] += sum_i a[i][p] * g[i][j]
                let gb = accumulate(local, b, k * n);
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let aip = av.data[i * k + p];
                        if aip == 0.0 {
                            continue;
                        }
                        let out = &mut gb[p * n..(p + 1) * n];
                        out.iter_mut().zip(grow).for_each(|(o, x)| *o += aip * x);
                    }
                }
            }
        }
        &Op::Binary(kind, a, b, bc) => {
            let av = &nodes[a].value.data;
            let bv = &nodes[b].value.data;
            if needs(a) {
                let ga = accumulate(local, a, av.len());
                for (i, gi) in g.iter().enumerate() {
                    let bj = bv[bc.index(i)];
                    ga[i] += match kind {
                        BinaryKind::Add | BinaryKind::Sub => *gi,
                        BinaryKind::Mul => gi * bj,
                        BinaryKind::Div => gi / bj,
                    };
                }
            }
            if needs(b) {
                let gb = accumulate(local, b, bv.len());
                for (i, gi) in g.iter().enumerate() {
                    let j = bc.index(i);
                    gb[j] += match kind {
                        BinaryKind::Add => *gi,
                        BinaryKind::Sub => -gi,
                        BinaryKind::Mul => gi * av[i],
                        BinaryKind::Div => -gi * av[i] / (bv[j] * bv[j]),
                    };
                }
            }
        }
        &Op::Unary(kind, a) => {
            if !needs(a) {
                return;
            }
            let x = &nodes[a].value.data;
            let y = &node.value.data;
            let ga = accumulate(local, a, x.len());
            for i in 0..g.len() {
                let d = match kind {
                    UnaryKind::Ln => 1.0 / x[i],
                    UnaryKind::Exp => y[i],
                    UnaryKind::Logistic => y[i] * (1.0 - y[i]),
                    UnaryKind::LnLogistic => 1.0 - logistic(x[i]),
                    UnaryKind::Relu => {
                        if x[i] > 0.0 {
                            1.0
                        } else {
                            0.0
                        }
                    }
                    UnaryKind::Square => 2.0 * x[i],
                    UnaryKind::Recip => -y[i] * y[i],
                    UnaryKind::Scale(c) => c,
                    UnaryKind::Shift(_) => 1.0,
                    UnaryKind::ClampMin(lo) => {
                        if x[i] > lo {
                            1.0
                        } else {
                            0.0
                        }
                    }
                };
                ga[i] += g[i] * d;
            }
        }
        &Op::SumAll(a) => {
            if needs(a) {
                let len = nodes[a].value.numel();
                accumulate(local, a, len).iter_mut().for_each(|x| *x += g[0]);
            }
        }
        &Op::MeanAll(a) => {
            if needs(a) {
                let len = nodes[a].value.numel();
                let share = g[0] / len as f64;
                accumulate(local, a, len).iter_mut().for_each(|x| *x += share);
            }
        }
        &Op::SumAxis { input, outer, extent, inner } => {
            if needs(input) {
                let ga = accumulate(local, input, outer * extent * inner);
                for o in 0..outer {
                    for e in 0..extent {
                        for i in 0..inner {
                            ga[(o * extent + e) * inner + i] += g[o * inner + i];
                        }
                    }
                }
            }
        }
        &Op::MaxAll { input, index } => {
            if needs(input) {
                let len = nodes[input].value.numel();
                accumulate(local, input, len)[index] += g[0];
            }
        }
        &Op::Reshape(a) => {
            if needs(a) {
                let ga = accumulate(local, a, g.len());
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
            }
        }
        Op::Stack { inputs, outer, inner } => {
            let count = inputs.len();
            for (s, &id) in inputs.iter().enumerate() {
                if !needs(id) {
                    continue;
                }
                let gs = accumulate(local, id, outer * inner);
                for o in 0..*outer {
                    let src = &g[(o * count + s) * inner..(o * count + s + 1) * inner];
                    gs[o * inner..(o + 1) * inner].iter_mut().zip(src).for_each(|(x, y)| *x += y);
                }
            }
        }
        &Op::Select { input, outer, extent, inner, index } => {
            if needs(input) {
                let ga = accumulate(local, input, outer * extent * inner);
                for o in 0..outer {
                    let dst = &mut ga[(o * extent + index) * inner..(o * extent + index + 1) * inner];
                    dst.iter_mut().zip(&g[o * inner..(o + 1) * inner]).for_each(|(x, y)| *x += y);
                }
            }
        }
    }
}

#[inline]
pub(crate) fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(logistic(x))` without underflow for large negative `x`.
#[inline]
pub(crate) fn ln_logistic(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            orow.iter_mut().zip(brow).for_each(|(o, x)| *o += aip * x);
        }
    }
    out
}

/// Splits `shape` around `axis` into `(outer, extent, inner)`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    assert!(axis < shape.len(), "axis {axis} out of range for shape {shape:?}");
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// Borrow of the recorded value.
    pub fn value(&self) -> Ref<'t, Tensor> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn to_tensor(&self) -> Tensor {
        self.value().clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape.clone()
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    pub fn grad(&self) -> Option<Tensor> {
        self.tape.grad(*self)
    }

    pub fn backward(&self) {
        self.tape.backward(*self)
    }

    fn rg(&self) -> bool {
        self.requires_grad()
    }

    /// The same value, cut off from gradient flow.
    pub fn detach(&self) -> Var<'t> {
        self.tape.constant(self.to_tensor())
    }

    pub fn matmul(&self, other: Var<'t>) -> Var<'t> {
        let (data, shape) = {
            let a = self.value();
            let b = other.value();
            assert!(
                a.shape.len() == 2 && b.shape.len() == 2 && a.shape[1] == b.shape[0],
                "matmul shape mismatch: {:?} x {:?}",
                a.shape,
                b.shape
            );
            let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
            (matmul_raw(&a.data, &b.data, m, k, n), vec![m, n])
        };
        self.tape.push(Tensor::new(shape, data), Op::MatMul(self.id, other.id), self.rg() || other.rg())
    }

    fn binary(&self, other: Var<'t>, kind: BinaryKind) -> Var<'t> {
        let value = {
            let a = self.value();
            let b = other.value();
            let bc = Broadcast::resolve(&a.shape, &b.shape);
            let data = a
                .data
                .iter()
                .enumerate()
                .map(|(i, &x)| {
                    let y = b.data[bc.index(i)];
                    match kind {
                        BinaryKind::Add => x + y,
                        BinaryKind::Sub => x - y,
                        BinaryKind::Mul => x * y,
                        BinaryKind::Div => x / y,
                    }
                })
                .collect();
            (Tensor::new(a.shape.clone(), data), bc)
        };
        self.tape.push(value.0, Op::Binary(kind, self.id, other.id, value.1), self.rg() || other.rg())
    }

    fn unary(&self, kind: UnaryKind) -> Var<'t> {
        let value = {
            let x = self.value();
            if let UnaryKind::Ln = kind {
                if let Some(bad) = x.data.iter().find(|&&v| v <= 0.0) {
                    panic!("ln of non-positive value {bad}");
                }
            }
            x.map(|v| match kind {
                UnaryKind::Ln => v.ln(),
                UnaryKind::Exp => v.exp(),
                UnaryKind::Logistic => logistic(v),
                UnaryKind::LnLogistic => ln_logistic(v),
                UnaryKind::Relu => {
                    if v < 0.0 {
                        0.0
                    } else {
                        v
                    }
                }
                UnaryKind::Square => v * v,
                UnaryKind::Recip => 1.0 / v,
                UnaryKind::Scale(c) => c * v,
                UnaryKind::Shift(c) => v + c,
                UnaryKind::ClampMin(lo) => {
                    if v < lo {
                        lo
                    } else {
                        v
                    }
                }
            })
        };
        self.tape.push(value, Op::Unary(kind, self.id), self.rg())
    }

    pub fn ln(&self) -> Var<'t> {
        self.unary(UnaryKind::Ln)
    }

    pub fn exp(&self) -> Var<'t> {
        self.unary(UnaryKind::Exp)
    }

    pub fn logistic(&self) -> Var<'t> {
        self.unary(UnaryKind::Logistic)
    }

    /// `ln(logistic(x))`, stable for very negative inputs.
    pub fn ln_logistic(&self) -> Var<'t> {
        self.unary(UnaryKind::LnLogistic)
    }

    pub fn relu(&self) -> Var<'t> {
        self.unary(UnaryKind::Relu)
    }

    pub fn square(&self) -> Var<'t> {
        self.unary(UnaryKind::Square)
    }

    pub fn recip(&self) -> Var<'t> {
        self.unary(UnaryKind::Recip)
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        self.unary(UnaryKind::Scale(c))
    }

    pub fn add_scalar(&self, c: f64) -> Var<'t> {
        self.unary(UnaryKind::Shift(c))
    }

    /// `max(x, lo)`; gradient is zero wherever the floor is active.
    pub fn clamp_min(&self, lo: f64) -> Var<'t> {
        self.unary(UnaryKind::ClampMin(lo))
    }

    pub fn sum(&self) -> Var<'t> {
        let s = self.value().data.iter().sum();
        self.tape.push(Tensor::scalar(s), Op::SumAll(self.id), self.rg())
    }

    pub fn mean(&self) -> Var<'t> {
        let m = {
            let v = self.value();
            assert!(v.numel() > 0, "mean of empty tensor");
            v.data.iter().sum::<f64>() / v.numel() as f64
        };
        self.tape.push(Tensor::scalar(m), Op::MeanAll(self.id), self.rg())
    }

    /// Sums out `axis`, removing it from the shape.
    pub fn sum_axis(&self, axis: usize) -> Var<'t> {
        let (value, outer, extent, inner) = {
            let v = self.value();
            let (outer, extent, inner) = split_axis(&v.shape, axis);
            assert!(extent > 0, "empty reduction axis");
            let mut out = vec![0.0; outer * inner];
            for o in 0..outer {
                for e in 0..extent {
                    let src = &v.data[(o * extent + e) * inner..(o * extent + e + 1) * inner];
                    out[o * inner..(o + 1) * inner].iter_mut().zip(src).for_each(|(x, y)| *x += y);
                }
            }
            let mut shape = v.shape.clone();
            shape.remove(axis);
            (Tensor::new(shape, out), outer, extent, inner)
        };
        self.tape.push(value, Op::SumAxis { input: self.id, outer, extent, inner }, self.rg())
    }

    /// Maximum over all elements together with its flat index. Ties resolve to
    /// the lowest index and the gradient goes to the winner only.
    pub fn max_with_argmax(&self) -> (Var<'t>, usize) {
        let (max, index) = {
            let v = self.value();
            assert!(v.numel() > 0, "max of empty tensor");
            argmax(&v.data)
        };
        let out = self.tape.push(Tensor::scalar(max), Op::MaxAll { input: self.id, index }, self.rg());
        (out, index)
    }

    pub fn reshape(&self, shape: &[usize]) -> Var<'t> {
        let value = self.to_tensor().reshaped(shape.to_vec());
        self.tape.push(value, Op::Reshape(self.id), self.rg())
    }

    /// Slice `index` along `axis`; the axis is removed from the shape.
    pub fn select(&self, axis: usize, index: usize) -> Var<'t> {
        let (value, outer, extent, inner) = {
            let v = self.value();
            let (outer, extent, inner) = split_axis(&v.shape, axis);
            assert!(index < extent, "select index {index} out of range {extent}");
            let mut out = Vec::with_capacity(outer * inner);
            for o in 0..outer {
                out.extend_from_slice(&v.data[(o * extent + index) * inner..(o * extent + index + 1) * inner]);
            }
            let mut shape = v.shape.clone();
            shape.remove(axis);
            (Tensor::new(shape, out), outer, extent, inner)
        };
        self.tape.push(value, Op::Select { input: self.id, outer, extent, inner, index }, self.rg())
    }

    /// Elements `0..n` are unnormalised log-weights; returns `x - logsumexp(x)`
    /// along the last axis of a vector or matrix.
    pub fn log_softmax(&self) -> Var<'t> {
        let shape = self.shape();
        match shape.len() {
            1 => {
                let m = self.value().data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let shifted = *self - self.tape.scalar(m);
                let lse = shifted.exp().sum().ln();
                shifted - lse
            }
            2 => {
                let (rows, cols) = (shape[0], shape[1]);
                let maxes: Vec<f64> = {
                    let v = self.value();
                    (0..rows)
                        .map(|r| v.data[r * cols..(r + 1) * cols].iter().copied().fold(f64::NEG_INFINITY, f64::max))
                        .collect()
                };
                let shifted = *self - self.tape.constant(Tensor::new(vec![rows, 1], maxes));
                let lse = shifted.exp().sum_axis(1).ln().reshape(&[rows, 1]);
                shifted - lse
            }
            _ => panic!("log_softmax expects a vector or matrix, got {shape:?}"),
        }
    }
}

/// Stacks equally shaped values along a new `axis`.
pub fn stack<'t>(vars: &[Var<'t>], axis: usize) -> Var<'t> {
    assert!(!vars.is_empty(), "stack of nothing");
    let tape = vars[0].tape;
    let shape = vars[0].shape();
    assert!(axis <= shape.len());
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis..].iter().product();
    let mut data = Vec::with_capacity(outer * inner * vars.len());
    {
        let values: Vec<Ref<'_, Tensor>> = vars.iter().map(|v| v.value()).collect();
        for v in &values {
            assert_eq!(v.shape, shape, "stack shape mismatch");
        }
        for o in 0..outer {
            for v in &values {
                data.extend_from_slice(&v.data[o * inner..(o + 1) * inner]);
            }
        }
    }
    let mut out_shape = shape.clone();
    out_shape.insert(axis, vars.len());
    let rg = vars.iter().any(|v| v.rg());
    tape.push(Tensor::new(out_shape, data), Op::Stack { inputs: vars.iter().map(|v| v.id).collect(), outer, inner }, rg)
}

/// Maximum and lowest index attaining it.
pub fn argmax(values: &[f64]) -> (f64, usize) {
    let mut best = (values[0], 0);
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > best.0 {
            best = (v, i);
        }
    }
    best
}

macro_rules! binary_operator {
    ($trait:ident, $method:ident, $kind:expr) => {
        impl<'t> ops::$trait for Var<'t> {
            type Output = Var<'t>;
            fn $method(self, rhs: Var<'t>) -> Var<'t> {
                self.binary(rhs, $kind)
            }
        }
    };
}

binary_operator!(Add, add, BinaryKind::Add);
binary_operator!(Sub, sub, BinaryKind::Sub);
binary_operator!(Mul, mul, BinaryKind::Mul);
binary_operator!(Div, div, BinaryKind::Div);

impl<'t> ops::Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }
}

/// Central-difference estimate of the gradient of `f` at `x`.
pub fn finite_difference_gradient(f: impl Fn(&Tensor) -> f64, x: &Tensor, h: f64) -> Tensor {
    assert!(h > 0.0, "step must be positive");
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape.clone());
    for i in 0..x.numel() {
        let orig = probe.data[i];
        probe.data[i] = orig + h;
        let up = f(&probe);
        probe.data[i] = orig - h;
        let down = f(&probe);
        probe.data[i] = orig;
        grad.data[i] = (up - down) / (2.0 * h);
    }
    grad
}

/// Gradients whose magnitude is below this are compared absolutely.
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// Largest `|a - n| / max(|a|, |n|, REL_ERR_FLOOR)` over all elements.
pub fn max_relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    assert_eq!(analytic.shape, numeric.shape);
    analytic
        .data
        .iter()
        .zip(&numeric.data)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(REL_ERR_FLOOR))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut out = Tensor::zeros(vec![m, n]);
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a.at(i, p) * b.at(p, j);
                }
                out.data_mut()[i * n + j] = s;
            }
        }
        out
    }

    fn random(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect())
    }

    #[test]
    fn matmul_identity_and_orthogonal() {
        let tape = Tape::new();
        let i2 = tape.constant(Tensor::eye(2));
        let m = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        assert_eq!(i2.matmul(m).to_tensor(), m.to_tensor());

        let r = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0]]));
        let c = tape.constant(Tensor::from_rows(&[vec![0.0], vec![1.0]]));
        assert_eq!(r.matmul(c).to_tensor().data(), &[0.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random(&mut rng, vec![3, 4], -2.0, 2.0);
        let b = random(&mut rng, vec![4, 2], -2.0, 2.0);
        let tape = Tape::new();
        let got = tape.constant(a.clone()).matmul(tape.constant(b.clone())).to_tensor();
        assert!(got.max_abs_diff(&naive_matmul(&a, &b)) < 1e-12);
    }

    #[test]
    #[should_panic(expected = "matmul shape mismatch")]
    fn matmul_rejects_bad_shapes() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(vec![2, 3]));
        let _ = a.matmul(a);
    }

    #[test]
    fn elementwise_examples() {
        let tape = Tape::new();
        assert_eq!(tape.scalar(0.0).logistic().item(), 0.5);
        assert_eq!(tape.scalar(1.0).ln().item(), 0.0);
        assert_eq!(tape.scalar(-3.0).relu().item(), 0.0);
        assert_eq!(tape.scalar(3.0).relu().item(), 3.0);
        assert_abs_diff_eq!(tape.scalar(-800.0).ln_logistic().item(), -800.0, epsilon = 1e-12);
    }

    #[test]
    #[should_panic(expected = "ln of non-positive")]
    fn ln_rejects_zero() {
        let tape = Tape::new();
        let _ = tape.scalar(0.0).ln();
    }

    #[test]
    fn broadcasting_forms() {
        let tape = Tape::new();
        let m = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let row = tape.constant(Tensor::vector(vec![10.0, 20.0]));
        let col = tape.constant(Tensor::new(vec![2, 1], vec![100.0, 200.0]));
        assert_eq!((m + row).to_tensor().data(), &[11.0, 22.0, 13.0, 24.0]);
        assert_eq!((m + col).to_tensor().data(), &[101.0, 102.0, 203.0, 204.0]);
        assert_eq!((m * tape.scalar(2.0)).to_tensor().data(), &[2.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn reductions() {
        let tape = Tape::new();
        let v = tape.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        assert_eq!(v.sum().item(), 6.0);
        let (mx, idx) = tape.constant(Tensor::vector(vec![0.1, 0.7, 0.2])).max_with_argmax();
        assert_eq!((mx.item(), idx), (0.7, 1));
        let c = tape.constant(Tensor::full(vec![2, 3], 4.5));
        assert_eq!(c.mean().item(), 4.5);
        let m = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        assert_eq!(m.sum_axis(0).to_tensor().data(), &[4.0, 6.0]);
        assert_eq!(m.sum_axis(1).to_tensor().data(), &[3.0, 7.0]);
    }

    #[test]
    fn argmax_ties_take_lowest_index() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![0.5, 0.5, 0.1]));
        let (m, idx) = x.max_with_argmax();
        assert_eq!(idx, 0);
        m.backward();
        assert_eq!(x.grad().unwrap().data(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn backward_analytic_examples() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        x.square().sum().backward();
        assert_eq!(x.grad().unwrap().data(), &[2.0, 4.0]);

        let tape = Tape::new();
        let w = tape.leaf(Tensor::scalar(0.3));
        let c = 2.5;
        (w.logistic() * tape.scalar(c)).backward();
        let s = logistic(0.3);
        assert_abs_diff_eq!(w.grad().unwrap().item(), c * s * (1.0 - s), epsilon = 1e-15);
    }

    #[test]
    fn diamond_accumulates_both_paths() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(1.7));
        (x * x).backward();
        assert_abs_diff_eq!(x.grad().unwrap().item(), 3.4, epsilon = 1e-15);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, -1.0]));
        let y = (x * x).sum();
        y.backward();
        y.backward();
        assert_eq!(x.grad().unwrap().data(), &[4.0, -4.0]);
        tape.zero_grad();
        assert!(x.grad().is_none());
    }

    #[test]
    #[should_panic(expected = "backward root must be scalar")]
    fn backward_rejects_vector_root() {
        let tape = Tape::new();
        tape.leaf(Tensor::vector(vec![1.0, 2.0])).backward();
    }

    #[test]
    fn finite_difference_examples() {
        let sq = |t: &Tensor| t.data().iter().map(|x| x * x).sum::<f64>();
        let g = finite_difference_gradient(sq, &Tensor::vector(vec![3.0]), 1e-5);
        assert_abs_diff_eq!(g.item(), 6.0, epsilon = 1e-6);
        let lnsum = |t: &Tensor| t.data().iter().map(|x| x.ln()).sum::<f64>();
        let g = finite_difference_gradient(lnsum, &Tensor::vector(vec![2.0]), 1e-5);
        assert_abs_diff_eq!(g.item(), 0.5, epsilon = 1e-8);
    }

    fn wsum<'t>(v: Var<'t>, weights: &Tensor) -> Var<'t> {
        (v * v.tape().constant(weights.clone())).sum()
    }

    /// Checks the gradient of `f(x).sum()`-style scalars against finite differences.
    fn check<F>(f: F, x: Tensor)
    where
        F: for<'t> Fn(Var<'t>) -> Var<'t>,
    {
        let tape = Tape::new();
        let leaf = tape.leaf(x.clone());
        f(leaf).backward();
        let analytic = leaf.grad().unwrap();
        let numeric = finite_difference_gradient(
            |t| {
                let tape = Tape::new();
                f(tape.constant(t.clone())).item()
            },
            &x,
            1e-5,
        );
        let err = max_relative_error(&analytic, &numeric);
        assert!(err < 1e-4, "relative error {err}: {analytic:?} vs {numeric:?}");
    }

    #[test]
    fn every_op_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let x = random(&mut rng, vec![3, 4], -2.0, 2.0);
            let pos = random(&mut rng, vec![3, 4], 0.2, 2.0);
            let w = random(&mut rng, vec![4, 2], -2.0, 2.0);
            let row = random(&mut rng, vec![4], 0.2, 2.0);
            let col = random(&mut rng, vec![3, 1], 0.2, 2.0);
            let weights = random(&mut rng, vec![3, 4], -2.0, 2.0);

            // Weighted sums make every element's gradient distinct.
            let ws = &weights;
            check(|v| wsum(v.exp(), ws), x.clone());
            check(|v| wsum(v.logistic(), ws), x.clone());
            check(|v| wsum(v.ln_logistic(), ws), x.clone());
            check(|v| wsum(v.relu(), ws), x.clone());
            check(|v| wsum(v.square(), ws), x.clone());
            check(|v| wsum(v.scale(-1.3).add_scalar(0.7), ws), x.clone());
            check(|v| wsum(v.ln(), ws), pos.clone());
            check(|v| wsum(v.recip(), ws), pos.clone());
            check(|v| wsum(v.log_softmax(), ws), x.clone());
            check(|v| wsum(v.clamp_min(0.1), ws), x.clone());

            check(|v| v.matmul(v.tape().constant(w.clone())).square().sum(), x.clone());
            check(|v| v.tape().constant(x.clone()).matmul(v).square().sum(), w.clone());
            check(|v| wsum(v / v.tape().constant(row.clone()), ws), x.clone());
            check(|v| wsum(v.tape().constant(x.clone()) / v, ws), pos.clone());
            check(|v| (v.tape().constant(x.clone()) * v).square().sum(), row.clone());
            check(|v| (v.tape().constant(x.clone()) - v).square().sum(), col.clone());
            check(|v| v.sum_axis(0).square().sum(), x.clone());
            check(|v| v.sum_axis(1).square().sum(), x.clone());
            check(|v| v.select(1, 2).square().sum() + v.mean(), x.clone());
            check(|v| stack(&[v, v.exp()], 1).reshape(&[24]).square().sum(), x.clone());
        }
    }

    #[test]
    fn forward_and_backward_are_deterministic() {
        let run = || {
            let tape = Tape::new();
            let x = tape.leaf(Tensor::from_rows(&[vec![0.3, -1.2], vec![0.8, 0.1]]));
            let y = x.matmul(x).logistic().log_softmax().sum();
            y.backward();
            (y.item().to_bits(), x.grad().unwrap().data().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn nan_propagates_instead_of_being_clamped() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![f64::NAN, 2.0]));
        for y in [x.relu(), x.clamp_min(1e-6), x.ln()] {
            let v = y.to_tensor();
            assert!(v.data()[0].is_nan());
            assert!(v.data()[1].is_finite());
        }
    }
}
