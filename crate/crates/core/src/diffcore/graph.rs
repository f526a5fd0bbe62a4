//! Reverse-mode differentiation tape over [`Tensor`] values.
//!
//! A [`Graph`] records every operation eagerly (forward values are computed on
//! the spot) and [`Graph::backward`] walks the tape in reverse. Nodes that do
//! not depend on a gradient-carrying leaf are never visited on the way back,
//! so detached subgraphs cost nothing during backpropagation.

use std::sync::Arc;

use super::tensor::{matmul_into, Real, Tensor, Trans};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Linear { x: usize, w: usize, b: usize },
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, T),
    Offset(usize),
    Tanh(usize),
    Sigmoid(usize),
    Relu(usize),
    Softplus(usize),
    Exp(usize),
    Ln(usize),
    Square(usize),
    Sqrt(usize),
    ConcatCols(Vec<usize>),
    SliceCols { a: usize, start: usize },
    ConcatRows(Vec<usize>),
    SliceRows { a: usize, start: usize },
    SumCols(usize),
    Sum(usize),
    Min(usize, usize),
    Clamp { a: usize, lo: T, hi: T },
}

struct Node<T> {
    value: Arc<Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

/// Elementwise activation selector shared by the layer types.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Linear,
    Tanh,
    Relu,
    Sigmoid,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

#[inline]
fn bcast_index(r: usize, c: usize, br: usize, bc: usize) -> usize {
    (if br == 1 { 0 } else { r }) * bc + if bc == 1 { 0 } else { c }
}

fn check_broadcast(a: (usize, usize), b: (usize, usize), what: &str) {
    let ok = (b.0 == a.0 || b.0 == 1) && (b.1 == a.1 || b.1 == 1);
    assert!(ok, "{what}: cannot broadcast {b:?} onto {a:?}");
}

fn stable_sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.push_arc(Arc::new(value), op, needs_grad)
    }

    fn push_arc(&mut self, value: Arc<Tensor<T>>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.ng(v)
    }

    /// Scalar value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> T {
        let t = self.value(v);
        assert_eq!(t.shape(), (1, 1), "scalar() on non-scalar node");
        t.data()[0]
    }

    // ---- leaves -------------------------------------------------------

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf that receives a gradient.
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf sharing storage with a parameter array.
    pub fn shared(&mut self, value: Arc<Tensor<T>>, trainable: bool) -> Var {
        self.push_arc(value, Op::Leaf, trainable)
    }

    /// Forward identity whose backward contribution is exactly zero.
    pub fn stop_gradient(&mut self, a: Var) -> Var {
        let v = Arc::clone(&self.nodes[a.0].value);
        self.push_arc(v, Op::Leaf, false)
    }

    // ---- linear algebra ----------------------------------------------

    /// `x W + b` with `b` a `1 x out` row broadcast over the batch.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (n, k) = self.shape(x);
        let (k2, m) = self.shape(w);
        assert_eq!(k, k2, "linear: input width {k} vs weight rows {k2}");
        assert_eq!(self.shape(b), (1, m), "linear: bias shape");
        let mut out = Tensor::zeros(n, m);
        {
            let bias = self.value(b).data();
            for r in 0..n {
                out.row_mut(r).copy_from_slice(bias);
            }
        }
        matmul_into(self.value(x), Trans::No, self.value(w), Trans::No, T::one(), &mut out);
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        self.push(out, Op::Linear { x: x.0, w: w.0, b: b.0 }, ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (n, _) = self.shape(a);
        let (_, m) = self.shape(b);
        let mut out = Tensor::zeros(n, m);
        matmul_into(self.value(a), Trans::No, self.value(b), Trans::No, T::zero(), &mut out);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMul(a.0, b.0), ng)
    }

    // ---- elementwise binary (b broadcasts onto a) ---------------------

    fn binary(&mut self, a: Var, b: Var, what: &str, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let ta = self.value(a);
        let tb = self.value(b);
        check_broadcast(ta.shape(), tb.shape(), what);
        if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            return Tensor::from_vec(ta.rows(), ta.cols(), data);
        }
        let (rows, cols) = ta.shape();
        let (br, bc) = tb.shape();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(ta.get(r, c), tb.data()[bcast_index(r, c, br, bc)]));
            }
        }
        Tensor::from_vec(rows, cols, data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.binary(a, b, "add", |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Add(a.0, b.0), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.binary(a, b, "sub", |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Sub(a.0, b.0), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.binary(a, b, "mul", |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Mul(a.0, b.0), ng)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let out = self.binary(a, b, "div", |x, y| x / y);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Div(a.0, b.0), ng)
    }

    pub fn min(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "min: shapes differ");
        let out = self.binary(a, b, "min", |x, y| if x <= y { x } else { y });
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Min(a.0, b.0), ng)
    }

    // ---- elementwise unary -------------------------------------------

    fn unary(&mut self, a: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let out = self.value(a).map(f);
        let ng = self.ng(a);
        self.push(out, op, ng)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, Op::Neg(a.0), |x| -x)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let s = T::of(s);
        self.unary(a, Op::Scale(a.0, s), move |x| x * s)
    }

    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        let c = T::of(c);
        self.unary(a, Op::Offset(a.0), move |x| x + c)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a.0), |x| x.tanh())
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a.0), stable_sigmoid)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a.0), |x| x.max(T::zero()))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Op::Softplus(a.0), softplus)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a.0), |x| x.exp())
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, Op::Ln(a.0), |x| x.ln())
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a.0), |x| x * x)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sqrt(a.0), |x| x.sqrt())
    }

    /// Elementwise clamp; the gradient is passed only inside `[lo, hi]`.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let (lo, hi) = (T::of(lo), T::of(hi));
        self.unary(a, Op::Clamp { a: a.0, lo, hi }, move |x| x.max(lo).min(hi))
    }

    pub fn activate(&mut self, a: Var, act: Activation) -> Var {
        match act {
            Activation::Linear => a,
            Activation::Tanh => self.tanh(a),
            Activation::Relu => self.relu(a),
            Activation::Sigmoid => self.sigmoid(a),
        }
    }

    // ---- structural ---------------------------------------------------

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols: no inputs");
        let rows = self.shape(parts[0]).0;
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Tensor::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.rows(), rows, "concat_cols: row mismatch");
            let w = t.cols();
            for r in 0..rows {
                out.row_mut(r)[off..off + w].copy_from_slice(t.row(r));
            }
            off += w;
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(out, Op::ConcatCols(parts.iter().map(|p| p.0).collect()), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let t = self.value(a);
        assert!(start + len <= t.cols(), "slice_cols out of range");
        let rows = t.rows();
        let mut out = Tensor::zeros(rows, len);
        for r in 0..rows {
            out.row_mut(r).copy_from_slice(&t.row(r)[start..start + len]);
        }
        let ng = self.ng(a);
        self.push(out, Op::SliceCols { a: a.0, start }, ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows: no inputs");
        let blocks: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::vstack(&blocks);
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(out, Op::ConcatRows(parts.iter().map(|p| p.0).collect()), ng)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let t = self.value(a);
        assert!(start + len <= t.rows(), "slice_rows out of range");
        let cols = t.cols();
        let data = t.data()[start * cols..(start + len) * cols].to_vec();
        let ng = self.ng(a);
        self.push(Tensor::from_vec(len, cols, data), Op::SliceRows { a: a.0, start }, ng)
    }

    /// Row-wise sum: `n x m -> n x 1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let data = (0..t.rows()).map(|r| t.row(r).iter().copied().sum()).collect();
        let out = Tensor::from_vec(t.rows(), 1, data);
        let ng = self.ng(a);
        self.push(out, Op::SumCols(a.0), ng)
    }

    /// Sum of every element: `-> 1 x 1`.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Sum(a.0), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1);
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// `sum(a * mask) / denom`, where `mask` broadcasts onto `a`.
    pub fn masked_mean(&mut self, a: Var, mask: Var, denom: f64) -> Var {
        let m = self.mul(a, mask);
        let s = self.sum(m);
        self.scale(s, 1.0 / denom.max(1.0))
    }

    // ---- backward -------------------------------------------------------

    /// Gradients of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.shape(loss), (1, 1), "backward: loss must be scalar");
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; loss.0 + 1];
        if !self.ng(loss) {
            return Gradients { grads };
        }
        grads[loss.0] = Some(Tensor::scalar(T::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn accum(&self, grads: &mut [Option<Tensor<T>>], idx: usize, g: Tensor<T>) {
        if !self.nodes[idx].needs_grad {
            return;
        }
        match &mut grads[idx] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn accum_with(&self, grads: &mut [Option<Tensor<T>>], idx: usize, shape: (usize, usize), f: impl FnOnce(&mut Tensor<T>)) {
        if !self.nodes[idx].needs_grad {
            return;
        }
        let slot = &mut grads[idx];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(shape.0, shape.1));
        }
        f(slot.as_mut().expect("slot filled"));
    }

    /// Sum `g` (shaped like the output) down to the broadcast shape of `b`.
    fn reduce_to(&self, g: &Tensor<T>, bshape: (usize, usize)) -> Tensor<T> {
        if g.shape() == bshape {
            return g.clone();
        }
        let (br, bc) = bshape;
        let mut out = Tensor::zeros(br, bc);
        let d = out.data_mut();
        for r in 0..g.rows() {
            for (c, &v) in g.row(r).iter().enumerate() {
                d[bcast_index(r, c, br, bc)] += v;
            }
        }
        out
    }

    fn val(&self, idx: usize) -> &Tensor<T> {
        &self.nodes[idx].value
    }

    fn zip_map(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_vec(a.rows(), a.cols(), data)
    }

    /// Elementwise combine of output-shaped `g` with a possibly broadcast `b`.
    fn bzip(g: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
        if g.shape() == b.shape() {
            return Self::zip_map(g, b, f);
        }
        let (br, bc) = b.shape();
        let mut out = Tensor::zeros(g.rows(), g.cols());
        for r in 0..g.rows() {
            for c in 0..g.cols() {
                out.set(r, c, f(g.get(r, c), b.data()[bcast_index(r, c, br, bc)]));
            }
        }
        out
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let (x, w, b) = (*x, *w, *b);
                let xs = self.val(x).shape();
                self.accum_with(grads, x, xs, |dx| {
                    matmul_into(g, Trans::No, self.val(w), Trans::Yes, T::one(), dx)
                });
                let ws = self.val(w).shape();
                self.accum_with(grads, w, ws, |dw| {
                    matmul_into(self.val(x), Trans::Yes, g, Trans::No, T::one(), dw)
                });
                let bs = self.val(b).shape();
                self.accum_with(grads, b, bs, |db| {
                    let d = db.data_mut();
                    for r in 0..g.rows() {
                        for (acc, &v) in d.iter_mut().zip(g.row(r)) {
                            *acc += v;
                        }
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                let sa = self.val(a).shape();
                self.accum_with(grads, a, sa, |da| {
                    matmul_into(g, Trans::No, self.val(b), Trans::Yes, T::one(), da)
                });
                let sb = self.val(b).shape();
                self.accum_with(grads, b, sb, |db| {
                    matmul_into(self.val(a), Trans::Yes, g, Trans::No, T::one(), db)
                });
            }
            Op::Add(a, b) => {
                let bs = self.val(*b).shape();
                self.accum(grads, *a, g.clone());
                if self.nodes[*b].needs_grad {
                    self.accum(grads, *b, self.reduce_to(g, bs));
                }
            }
            Op::Sub(a, b) => {
                let bs = self.val(*b).shape();
                self.accum(grads, *a, g.clone());
                if self.nodes[*b].needs_grad {
                    let r = self.reduce_to(g, bs).map(|v| -v);
                    self.accum(grads, *b, r);
                }
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                if self.nodes[a].needs_grad {
                    let da = Self::bzip(g, self.val(b), |gv, bv| gv * bv);
                    self.accum(grads, a, da);
                }
                if self.nodes[b].needs_grad {
                    let ga = Self::zip_map(g, self.val(a), |gv, av| gv * av);
                    let db = self.reduce_to(&ga, self.val(b).shape());
                    self.accum(grads, b, db);
                }
            }
            Op::Div(a, b) => {
                let (a, b) = (*a, *b);
                if self.nodes[a].needs_grad {
                    let da = Self::bzip(g, self.val(b), |gv, bv| gv / bv);
                    self.accum(grads, a, da);
                }
                if self.nodes[b].needs_grad {
                    // d(a/b)/db = -out / b
                    let go = Self::zip_map(g, out, |gv, ov| gv * ov);
                    let t = Self::bzip(&go, self.val(b), |v, bv| -v / bv);
                    let db = self.reduce_to(&t, self.val(b).shape());
                    self.accum(grads, b, db);
                }
            }
            Op::Neg(a) => self.accum(grads, *a, g.map(|v| -v)),
            Op::Scale(a, s) => {
                let s = *s;
                self.accum(grads, *a, g.map(|v| v * s))
            }
            Op::Offset(a) => self.accum(grads, *a, g.clone()),
            Op::Tanh(a) => {
                let d = Self::zip_map(g, out, |gv, y| gv * (T::one() - y * y));
                self.accum(grads, *a, d)
            }
            Op::Sigmoid(a) => {
                let d = Self::zip_map(g, out, |gv, y| gv * y * (T::one() - y));
                self.accum(grads, *a, d)
            }
            Op::Relu(a) => {
                let d = Self::zip_map(g, self.val(*a), |gv, x| if x > T::zero() { gv } else { T::zero() });
                self.accum(grads, *a, d)
            }
            Op::Softplus(a) => {
                let d = Self::zip_map(g, self.val(*a), |gv, x| gv * stable_sigmoid(x));
                self.accum(grads, *a, d)
            }
            Op::Exp(a) => {
                let d = Self::zip_map(g, out, |gv, y| gv * y);
                self.accum(grads, *a, d)
            }
            Op::Ln(a) => {
                let d = Self::zip_map(g, self.val(*a), |gv, x| gv / x);
                self.accum(grads, *a, d)
            }
            Op::Square(a) => {
                let two = T::of(2.0);
                let d = Self::zip_map(g, self.val(*a), |gv, x| gv * two * x);
                self.accum(grads, *a, d)
            }
            Op::Sqrt(a) => {
                let half = T::of(0.5);
                let d = Self::zip_map(g, out, |gv, y| gv * half / y);
                self.accum(grads, *a, d)
            }
            Op::Clamp { a, lo, hi } => {
                let (lo, hi) = (*lo, *hi);
                let d = Self::zip_map(g, self.val(*a), |gv, x| if x >= lo && x <= hi { gv } else { T::zero() });
                self.accum(grads, *a, d)
            }
            Op::Min(a, b) => {
                let (a, b) = (*a, *b);
                let (ta, tb) = (self.val(a), self.val(b));
                if self.nodes[a].needs_grad {
                    let mut d = g.clone();
                    for ((dv, &x), &y) in d.data_mut().iter_mut().zip(ta.data()).zip(tb.data()) {
                        if x > y {
                            *dv = T::zero();
                        }
                    }
                    self.accum(grads, a, d);
                }
                if self.nodes[b].needs_grad {
                    let mut d = g.clone();
                    for ((dv, &x), &y) in d.data_mut().iter_mut().zip(ta.data()).zip(tb.data()) {
                        if x <= y {
                            *dv = T::zero();
                        }
                    }
                    self.accum(grads, b, d);
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = self.val(p).cols();
                    if self.nodes[p].needs_grad {
                        let mut d = Tensor::zeros(g.rows(), w);
                        for r in 0..g.rows() {
                            d.row_mut(r).copy_from_slice(&g.row(r)[off..off + w]);
                        }
                        self.accum(grads, p, d);
                    }
                    off += w;
                }
            }
            Op::SliceCols { a, start } => {
                let (a, start) = (*a, *start);
                let s = self.val(a).shape();
                self.accum_with(grads, a, s, |da| {
                    for r in 0..g.rows() {
                        for (acc, &v) in da.row_mut(r)[start..start + g.cols()].iter_mut().zip(g.row(r)) {
                            *acc += v;
                        }
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let cols = g.cols();
                let mut off = 0;
                for &p in parts {
                    let rows = self.val(p).rows();
                    if self.nodes[p].needs_grad {
                        let d = g.data()[off * cols..(off + rows) * cols].to_vec();
                        self.accum(grads, p, Tensor::from_vec(rows, cols, d));
                    }
                    off += rows;
                }
            }
            Op::SliceRows { a, start } => {
                let (a, start) = (*a, *start);
                let s = self.val(a).shape();
                let cols = g.cols();
                self.accum_with(grads, a, s, |da| {
                    let d = &mut da.data_mut()[start * cols..(start + g.rows()) * cols];
                    for (acc, &v) in d.iter_mut().zip(g.data()) {
                        *acc += v;
                    }
                });
            }
            Op::SumCols(a) => {
                let s = self.val(*a).shape();
                let mut d = Tensor::zeros(s.0, s.1);
                for r in 0..s.0 {
                    let gv = g.get(r, 0);
                    d.row_mut(r).iter_mut().for_each(|v| *v = gv);
                }
                self.accum(grads, *a, d)
            }
            Op::Sum(a) => {
                let s = self.val(*a).shape();
                self.accum(grads, *a, Tensor::filled(s.0, s.1, g.data()[0]))
            }
        }
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: usize, cols: usize, d: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(rows, cols, d)
    }

    /// Central differences of `f` around every element of `x0`.
    fn numeric_grad(x0: &Tensor<f64>, f: impl Fn(&Tensor<f64>) -> f64) -> Vec<f64> {
        let h = 1e-6;
        (0..x0.len())
            .map(|i| {
                let mut p = x0.clone();
                p.data_mut()[i] += h;
                let mut m = x0.clone();
                m.data_mut()[i] -= h;
                (f(&p) - f(&m)) / (2.0 * h)
            })
            .collect()
    }

    fn check(x0: Tensor<f64>, build: impl Fn(&mut Graph<f64>, Var) -> Var) {
        let mut g = Graph::new();
        let x = g.variable(x0.clone());
        let y = build(&mut g, x);
        let loss = g.sum(y);
        let grads = g.backward(loss);
        let analytic = grads.get(x).expect("grad").to_f64();
        let numeric = numeric_grad(&x0, |xv| {
            let mut g = Graph::new();
            let x = g.variable(xv.clone());
            let y = build(&mut g, x);
            let l = g.sum(y);
            g.scalar(l)
        });
        for (a, n) in analytic.iter().zip(&numeric) {
            assert!((a - n).abs() <= 1e-6 * (1.0 + n.abs()), "analytic {a} vs numeric {n}");
        }
    }

    #[test]
    fn unary_ops_match_finite_differences() {
        let x0 = t(2, 3, &[0.3, -0.7, 1.2, -1.5, 0.1, 0.9]);
        check(x0.clone(), |g, x| g.tanh(x));
        check(x0.clone(), |g, x| g.sigmoid(x));
        check(x0.clone(), |g, x| g.softplus(x));
        check(x0.clone(), |g, x| g.exp(x));
        check(x0.clone(), |g, x| {
            let s = g.square(x);
            g.ln(s)
        });
        check(x0.clone(), |g, x| {
            let e = g.exp(x);
            g.sqrt(e)
        });
        check(x0.clone(), |g, x| g.clamp(x, -1.0, 1.0));
        check(x0.clone(), |g, x| g.relu(x));
        check(x0, |g, x| {
            let s = g.scale(x, 3.0);
            let o = g.offset(s, 1.0);
            g.neg(o)
        });
    }

    #[test]
    fn binary_and_broadcast_ops_match_finite_differences() {
        let x0 = t(2, 3, &[0.3, -0.7, 1.2, -1.5, 0.1, 0.9]);
        let row = t(1, 3, &[0.5, 2.0, -1.0]);
        let col = t(2, 1, &[1.5, -0.5]);
        let one = t(1, 1, &[0.8]);
        for b in [row, col, one] {
            let b1 = b.clone();
            check(x0.clone(), move |g, x| {
                let c = g.constant(b1.clone());
                let m = g.mul(x, c);
                let a = g.add(m, c);
                let s = g.sub(a, c);
                g.div(s, c)
            });
            // gradient with respect to the broadcast operand
            let x1 = x0.clone();
            check(b, move |g, bv| {
                let c = g.constant(x1.clone());
                let m = g.mul(c, bv);
                let a = g.add(m, bv);
                let s = g.sub(a, bv);
                let sq = g.square(bv);
                let d = g.div(s, sq);
                g.square(d)
            });
        }
    }

    #[test]
    fn structural_ops_match_finite_differences() {
        let x0 = t(3, 4, &[0.1, 0.2, -0.3, 0.4, 0.5, -0.6, 0.7, 0.8, 0.9, -1.0, 1.1, 1.2]);
        check(x0.clone(), |g, x| {
            let a = g.slice_cols(x, 1, 2);
            let b = g.slice_cols(x, 0, 1);
            let c = g.concat_cols(&[a, b, a]);
            let sq = g.square(c);
            g.sum_cols(sq)
        });
        check(x0.clone(), |g, x| {
            let a = g.slice_rows(x, 1, 2);
            let b = g.slice_rows(x, 0, 1);
            let c = g.concat_rows(&[a, b, a]);
            let t = g.tanh(c);
            g.mean(t)
        });
        check(x0, |g, x| {
            let a = g.slice_cols(x, 0, 2);
            let b = g.slice_cols(x, 2, 2);
            g.min(a, b)
        });
    }

    #[test]
    fn linear_and_matmul_match_finite_differences() {
        let x0 = t(3, 2, &[0.1, -0.2, 0.3, 0.4, -0.5, 0.6]);
        let w0 = t(2, 4, &[0.5, -0.1, 0.2, 0.3, -0.4, 0.7, 0.1, -0.2]);
        let b0 = t(1, 4, &[0.01, -0.02, 0.03, 0.04]);
        {
            let (w0, b0) = (w0.clone(), b0.clone());
            check(x0.clone(), move |g, x| {
                let w = g.constant(w0.clone());
                let b = g.constant(b0.clone());
                let y = g.linear(x, w, b);
                g.tanh(y)
            });
        }
        {
            let (x0, b0) = (x0.clone(), b0.clone());
            check(w0.clone(), move |g, w| {
                let x = g.constant(x0.clone());
                let b = g.constant(b0.clone());
                let y = g.linear(x, w, b);
                g.square(y)
            });
        }
        {
            let (x0, w0) = (x0.clone(), w0.clone());
            check(b0, move |g, b| {
                let x = g.constant(x0.clone());
                let w = g.constant(w0.clone());
                let y = g.linear(x, w, b);
                g.square(y)
            });
        }
        check(x0, move |g, x| {
            let w = g.constant(w0.clone());
            let y = g.matmul(x, w);
            g.square(y)
        });
    }

    #[test]
    fn stop_gradient_blocks_backward() {
        let mut g = Graph::<f64>::new();
        let w = g.variable(t(1, 2, &[1.0, 2.0]));
        let y = g.square(w);
        let s = g.stop_gradient(y);
        assert_eq!(g.value(s), g.value(y));
        let l = g.sum(s);
        let grads = g.backward(l);
        assert!(grads.get(w).is_none());
    }

    #[test]
    fn shared_use_accumulates() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(t(1, 1, &[3.0]));
        let y = g.mul(x, x);
        let z = g.add(y, x);
        let grads = g.backward(z);
        assert_eq!(grads.get(x).unwrap().data()[0], 7.0);
    }
}
