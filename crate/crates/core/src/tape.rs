//! Reverse-mode automatic differentiation over an append-only arena.
//!
//! Every operation on a [`Var`] appends a node holding its value and the
//! information its gradient rule needs. Nodes only reference earlier nodes,
//! so the arena is always in topological order and [`Tape::backward`] is a
//! single reverse sweep.

use std::cell::RefCell;
use std::collections::HashMap;
use std::fmt;

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, softmax_slice, MatmulPlan, Tensor};

const GELU_COEF: f64 = 0.044715;
// sqrt(2 / pi)
const GELU_SCALE: f64 = 0.797_884_560_802_865_4;

enum Op<S> {
    Leaf,
    Param(ParamId),
    MatMul { a: usize, b: usize, plan: MatmulPlan },
    MatMulT { a: usize, b: usize, m: usize, k: usize, n: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { a: usize, factor: S },
    Identity { a: usize },
    Transpose { a: usize, rows: usize, cols: usize },
    Softmax { a: usize, outer: usize, len: usize, inner: usize },
    Gelu { a: usize },
    LayerNorm { x: usize, gain: usize, bias: usize, xhat: Vec<S>, rstd: Vec<S> },
    Sum { a: usize },
    CrossEntropy { logits: usize, targets: Vec<usize>, weights: Vec<S>, probs: Vec<S> },
    SliceCols { a: usize, start: usize, cols: usize },
    ConcatCols { parts: Vec<(usize, usize)> },
    ConcatRows { parts: Vec<usize> },
    GatherRows { a: usize, index: Vec<usize> },
    Dropout { a: usize, mask: Vec<S> },
}

struct Node<S> {
    shape: Vec<usize>,
    value: Vec<S>,
    op: Op<S>,
    needs_grad: bool,
}

struct Inner<S> {
    nodes: Vec<Node<S>>,
    params: HashMap<ParamId, usize>,
    consumed: bool,
}

/// Records a forward computation so it can be differentiated once.
pub struct Tape<S: Scalar> {
    inner: RefCell<Inner<S>>,
    track: bool,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            inner: RefCell::new(Inner {
                nodes: Vec::new(),
                params: HashMap::new(),
                consumed: false,
            }),
            track: true,
        }
    }

    /// A tape that keeps values but records no gradient information.
    pub fn no_grad() -> Self {
        Tape {
            track: false,
            ..Self::new()
        }
    }

    pub fn is_tracking(&self) -> bool {
        self.track
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, shape: Vec<usize>, value: Vec<S>, op: Op<S>, inputs: &[usize]) -> usize {
        let mut inner = self.inner.borrow_mut();
        assert!(!inner.consumed, "tape already consumed by backward");
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let needs_grad = self.track
            && (matches!(op, Op::Param(_)) || inputs.iter().any(|&i| inner.nodes[i].needs_grad));
        let op = if needs_grad || matches!(op, Op::Param(_)) {
            op
        } else {
            Op::Leaf
        };
        inner.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        inner.nodes.len() - 1
    }

    fn var(&self, id: usize) -> Var<'_, S> {
        Var { tape: self, id }
    }

    /// The same node, borrowed from this tape alone. Frees the parameter
    /// store for `backward` once the forward context is dropped.
    pub fn adopt(&self, v: Var<'_, S>) -> Var<'_, S> {
        assert!(std::ptr::eq(v.tape, self), "variable belongs to another tape");
        self.var(v.id)
    }

    pub fn constant(&self, t: Tensor<S>) -> Var<'_, S> {
        let shape = t.shape().to_vec();
        let id = self.push(shape, t.into_data(), Op::Leaf, &[]);
        self.var(id)
    }

    pub fn constant_from(&self, shape: &[usize], data: Vec<S>) -> Result<Var<'_, S>> {
        Ok(self.constant(Tensor::new(shape, data)?))
    }

    /// Leaf for a trainable tensor. Repeated calls with the same id return
    /// the same node so gradients from every use land in one place.
    pub fn param(&self, store: &ParamStore<S>, id: ParamId) -> Var<'_, S> {
        if let Some(&node) = self.inner.borrow().params.get(&id) {
            return self.var(node);
        }
        let t = store.get(id);
        let node = self.push(t.shape().to_vec(), t.data().to_vec(), Op::Param(id), &[]);
        self.inner.borrow_mut().params.insert(id, node);
        self.var(node)
    }

    /// Propagates gradients from a scalar `loss` into the parameters of
    /// `store` (accumulating), then releases the recorded graph.
    pub fn backward(&self, loss: Var<'_, S>, store: &mut ParamStore<S>) -> Result<()> {
        let mut inner = self.inner.borrow_mut();
        if inner.consumed {
            return Err(Error::Contract(
                "backward already ran on this tape; record a new forward pass".into(),
            ));
        }
        if !self.track {
            return Err(Error::Contract("backward on a no-grad tape".into()));
        }
        let nodes = &inner.nodes;
        if nodes[loss.id].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].shape
            )));
        }
        let mut grads: Vec<Option<Vec<S>>> = Vec::with_capacity(loss.id + 1);
        grads.resize_with(loss.id + 1, || None);
        grads[loss.id] = Some(vec![S::one()]);

        for i in (0..=loss.id).rev() {
            let Some(dy) = grads[i].take() else { continue };
            let node = &nodes[i];
            if !node.needs_grad {
                continue;
            }
            backprop(nodes, i, &dy, &mut grads, store);
        }
        inner.nodes.clear();
        inner.params.clear();
        inner.consumed = true;
        Ok(())
    }
}

fn grad_buf<'g, S: Scalar>(
    grads: &'g mut [Option<Vec<S>>],
    nodes: &[Node<S>],
    id: usize,
) -> Option<&'g mut Vec<S>> {
    if !nodes[id].needs_grad {
        return None;
    }
    let len = nodes[id].value.len();
    Some(grads[id].get_or_insert_with(|| vec![S::zero(); len]))
}

fn add_into<S: Scalar>(dst: &mut [S], src: &[S]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
}

fn backprop<S: Scalar>(
    nodes: &[Node<S>],
    i: usize,
    dy: &[S],
    grads: &mut [Option<Vec<S>>],
    store: &mut ParamStore<S>,
) {
    let node = &nodes[i];
    match &node.op {
        Op::Leaf => {}
        Op::Param(pid) => store.accumulate(*pid, dy),
        Op::MatMul { a, b, plan } => {
            let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
            if a == b {
                let mut tmp = vec![S::zero(); va.len()];
                let mut tmp2 = vec![S::zero(); va.len()];
                plan.backward(va, vb, dy, Some(&mut tmp), Some(&mut tmp2));
                if let Some(g) = grad_buf(grads, nodes, *a) {
                    add_into(g, &tmp);
                    add_into(g, &tmp2);
                }
                return;
            }
            if let Some(g) = grad_buf(grads, nodes, *a) {
                plan.backward(va, vb, dy, Some(g), None);
            }
            if let Some(g) = grad_buf(grads, nodes, *b) {
                plan.backward(va, vb, dy, None, Some(g));
            }
        }
        Op::MatMulT { a, b, m, k, n } => {
            // C[m,n] = A[m,k] · B[n,k]ᵀ ; dA = dC·B ; dB = dCᵀ·A
            let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
            let mut da = vec![S::zero(); m * k];
            gemm_nn(dy, vb, &mut da, *m, *n, *k);
            let mut db = vec![S::zero(); n * k];
            gemm_tn(dy, va, &mut db, *m, *n, *k);
            if let Some(g) = grad_buf(grads, nodes, *a) {
                add_into(g, &da);
            }
            if let Some(g) = grad_buf(grads, nodes, *b) {
                add_into(g, &db);
            }
        }
        Op::Add { a, b } => {
            if let Some(g) = grad_buf(grads, nodes, *a) {
                add_into(g, dy);
            }
            if let Some(g) = grad_buf(grads, nodes, *b) {
                let w = g.len();
                for chunk in dy.chunks(w) {
                    add_into(g, chunk);
                }
            }
        }
        Op::Sub { a, b } => {
            if let Some(g) = grad_buf(grads, nodes, *a) {
                add_into(g, dy);
            }
            if let Some(g) = grad_buf(grads, nodes, *b) {
                g.iter_mut().zip(dy).for_each(|(d, &s)| *d -= s);
            }
        }
        Op::Mul { a, b } => {
            let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
            if let Some(g) = grad_buf(grads, nodes, *a) {
                for ((d, &s), &y) in g.iter_mut().zip(dy).zip(vb) {
                    *d += s * y;
                }
            }
            if let Some(g) = grad_buf(grads, nodes, *b) {
                for ((d, &s), &x) in g.iter_mut().zip(dy).zip(va) {
                    *d += s * x;
                }
            }
        }
        Op::Scale { a, factor } => {
            if let Some(g) = grad_buf(grads, nodes, *a) {
                g.iter_mut().zip(dy).for_each(|(d, &s)| *d += s * *factor);
            }
        }
        Op::Identity { a } => {
            if let Some(g) = grad_buf(grads, nodes, *a) {
                add_into(g, dy);
            }
        }
        Op::Transpose { a, rows, cols } => {
            if let Some(g) = grad_buf(grads, nodes, *a) {
                let plane = rows * cols;
                for (bi, dplane) in dy.chunks(plane).enumerate() {
                    for r in 0..*rows {
                        for c in 0..*cols {
                            g[bi * plane + r * cols + c] += dplane[c * rows + r];
                        }
                    }
                }
            }
        }
        Op::Softmax { a, outer, len, inner } => {
            let y = &node.value;
            if let Some(g) = grad_buf(grads, nodes, *a) {
                for o in 0..*outer {
                    for j in 0..*inner {
                        let base = o * len * inner + j;
                        let mut dot = S::zero();
                        for t in 0..*len {
                            let idx = base + t * inner;
                            dot += y[idx] * dy[idx];
                        }
                        for t in 0..*len {
                            let idx = base + t * inner;
                            g[idx] += y[idx] * (dy[idx] - dot);
                        }
                    }
                }
            }
        }
        Op::Gelu { a } => {
            let x = &nodes[*a].value;
            if let Some(g) = grad_buf(grads, nodes, *a) {
                for ((d, &s), &xv) in g.iter_mut().zip(dy).zip(x) {
                    *d += s * gelu_grad(xv);
                }
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            rstd,
        } => {
            let width = nodes[*gain].value.len();
            let gv = &nodes[*gain].value;
            let rows = xhat.len() / width;
            let w = S::lit(width as f64);
            if nodes[*x].needs_grad {
                let mut dx = vec![S::zero(); xhat.len()];
                for r in 0..rows {
                    let xr = &xhat[r * width..(r + 1) * width];
                    let dr = &dy[r * width..(r + 1) * width];
                    let mut mean_dg = S::zero();
                    let mut mean_dgx = S::zero();
                    for c in 0..width {
                        let dg = dr[c] * gv[c];
                        mean_dg += dg;
                        mean_dgx += dg * xr[c];
                    }
                    mean_dg /= w;
                    mean_dgx /= w;
                    for c in 0..width {
                        let dg = dr[c] * gv[c];
                        dx[r * width + c] = rstd[r] * (dg - mean_dg - xr[c] * mean_dgx);
                    }
                }
                add_into(grad_buf(grads, nodes, *x).unwrap(), &dx);
            }
            if let Some(g) = grad_buf(grads, nodes, *gain) {
                for r in 0..rows {
                    for c in 0..width {
                        g[c] += dy[r * width + c] * xhat[r * width + c];
                    }
                }
            }
            if let Some(g) = grad_buf(grads, nodes, *bias) {
                for chunk in dy.chunks(width) {
                    add_into(g, chunk);
                }
            }
        }
        Op::Sum { a } => {
            if let Some(g) = grad_buf(grads, nodes, *a) {
                g.iter_mut().for_each(|d| *d += dy[0]);
            }
        }
        Op::CrossEntropy {
            logits,
            targets,
            weights,
            probs,
        } => {
            if let Some(g) = grad_buf(grads, nodes, *logits) {
                let classes = probs.len() / targets.len();
                for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                    let scale = dy[0] * w;
                    for c in 0..classes {
                        let onehot = if c == t { S::one() } else { S::zero() };
                        g[r * classes + c] += scale * (probs[r * classes + c] - onehot);
                    }
                }
            }
        }
        Op::SliceCols { a, start, cols } => {
            let width = *nodes[*a].shape.last().unwrap();
            if let Some(g) = grad_buf(grads, nodes, *a) {
                for (r, drow) in dy.chunks(*cols).enumerate() {
                    add_into(&mut g[r * width + start..r * width + start + cols], drow);
                }
            }
        }
        Op::ConcatCols { parts } => {
            let width: usize = parts.iter().map(|p| p.1).sum();
            let mut offset = 0;
            for &(p, w) in parts {
                if let Some(g) = grad_buf(grads, nodes, p) {
                    for (r, grow) in g.chunks_mut(w).enumerate() {
                        add_into(grow, &dy[r * width + offset..r * width + offset + w]);
                    }
                }
                offset += w;
            }
        }
        Op::ConcatRows { parts } => {
            let mut offset = 0;
            for &p in parts {
                let len = nodes[p].value.len();
                if let Some(g) = grad_buf(grads, nodes, p) {
                    add_into(g, &dy[offset..offset + len]);
                }
                offset += len;
            }
        }
        Op::GatherRows { a, index } => {
            let width = *nodes[*a].shape.last().unwrap();
            if let Some(g) = grad_buf(grads, nodes, *a) {
                for (r, &src) in index.iter().enumerate() {
                    add_into(
                        &mut g[src * width..(src + 1) * width],
                        &dy[r * width..(r + 1) * width],
                    );
                }
            }
        }
        Op::Dropout { a, mask } => {
            if let Some(g) = grad_buf(grads, nodes, *a) {
                for ((d, &s), &m) in g.iter_mut().zip(dy).zip(mask) {
                    *d += s * m;
                }
            }
        }
    }
}

pub(crate) fn gelu_value<S: Scalar>(x: S) -> S {
    let half = S::lit(0.5);
    let u = S::lit(GELU_SCALE) * (x + S::lit(GELU_COEF) * x * x * x);
    half * x * (S::one() + u.tanh())
}

fn gelu_grad<S: Scalar>(x: S) -> S {
    let half = S::lit(0.5);
    let c = S::lit(GELU_SCALE);
    let k = S::lit(GELU_COEF);
    let u = c * (x + k * x * x * x);
    let th = u.tanh();
    half * (S::one() + th) + half * x * (S::one() - th * th) * c * (S::one() + S::lit(3.0) * k * x * x)
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, S: Scalar> {
    tape: &'t Tape<S>,
    id: usize,
}

impl<S: Scalar> fmt::Debug for Var<'_, S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl<'t, S: Scalar> Var<'t, S> {
    pub fn tape(&self) -> &'t Tape<S> {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.inner.borrow().nodes[self.id].shape.clone()
    }

    pub fn value(&self) -> Tensor<S> {
        let inner = self.tape.inner.borrow();
        let n = &inner.nodes[self.id];
        Tensor::new(&n.shape, n.value.clone()).expect("node shape")
    }

    pub fn with_data<R>(&self, f: impl FnOnce(&[S]) -> R) -> R {
        f(&self.tape.inner.borrow().nodes[self.id].value)
    }

    pub fn item(&self) -> S {
        self.with_data(|d| d[0])
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.inner.borrow().nodes[self.id].needs_grad
    }

    fn same_tape(&self, other: &Var<'t, S>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "vars from different tapes"
        );
    }

    fn unary(&self, shape: Vec<usize>, value: Vec<S>, op: Op<S>) -> Var<'t, S> {
        let id = self.tape.push(shape, value, op, &[self.id]);
        self.tape.var(id)
    }

    pub fn matmul(&self, other: Var<'t, S>) -> Result<Var<'t, S>> {
        self.same_tape(&other);
        let (sa, sb) = (self.shape(), other.shape());
        let plan = MatmulPlan::new(&sa, &sb)?;
        let mut out = vec![S::zero(); plan.out_len()];
        {
            let inner = self.tape.inner.borrow();
            plan.forward(
                &inner.nodes[self.id].value,
                &inner.nodes[other.id].value,
                &mut out,
            );
        }
        let shape = plan.out_shape.clone();
        let op = Op::MatMul {
            a: self.id,
            b: other.id,
            plan,
        };
        let id = self.tape.push(shape, out, op, &[self.id, other.id]);
        Ok(self.tape.var(id))
    }

    /// `self[m,k] · other[n,k]ᵀ` for plain matrices.
    pub fn matmul_t(&self, other: Var<'t, S>) -> Result<Var<'t, S>> {
        self.same_tape(&other);
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::shape("matmul_t", &sa, &sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let mut out = vec![S::zero(); m * n];
        {
            let inner = self.tape.inner.borrow();
            gemm_nt(
                &inner.nodes[self.id].value,
                &inner.nodes[other.id].value,
                &mut out,
                m,
                k,
                n,
            );
        }
        let op = Op::MatMulT {
            a: self.id,
            b: other.id,
            m,
            k,
            n,
        };
        let id = self.tape.push(vec![m, n], out, op, &[self.id, other.id]);
        Ok(self.tape.var(id))
    }

    /// Elementwise sum. `other` may also be a trailing-suffix shape that is
    /// repeated over the leading dimensions (bias broadcast).
    pub fn add(&self, other: Var<'t, S>) -> Result<Var<'t, S>> {
        self.same_tape(&other);
        let (sa, sb) = (self.shape(), other.shape());
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != sb[..] {
            return Err(Error::shape("add", &sa, &sb));
        }
        let out = {
            let inner = self.tape.inner.borrow();
            let b = &inner.nodes[other.id].value;
            inner.nodes[self.id]
                .value
                .chunks(b.len())
                .flat_map(|chunk| chunk.iter().zip(b).map(|(&x, &y)| x + y))
                .collect()
        };
        let op = Op::Add {
            a: self.id,
            b: other.id,
        };
        let id = self.tape.push(sa, out, op, &[self.id, other.id]);
        Ok(self.tape.var(id))
    }

    fn zip_same(
        &self,
        other: Var<'t, S>,
        name: &'static str,
        f: impl Fn(S, S) -> S,
    ) -> Result<(Vec<usize>, Vec<S>)> {
        self.same_tape(&other);
        let (sa, sb) = (self.shape(), other.shape());
        if sa != sb {
            return Err(Error::shape(name, &sa, &sb));
        }
        let inner = self.tape.inner.borrow();
        let out = inner.nodes[self.id]
            .value
            .iter()
            .zip(&inner.nodes[other.id].value)
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok((sa, out))
    }

    pub fn sub(&self, other: Var<'t, S>) -> Result<Var<'t, S>> {
        let (shape, out) = self.zip_same(other, "sub", |x, y| x - y)?;
        let op = Op::Sub {
            a: self.id,
            b: other.id,
        };
        let id = self.tape.push(shape, out, op, &[self.id, other.id]);
        Ok(self.tape.var(id))
    }

    pub fn mul(&self, other: Var<'t, S>) -> Result<Var<'t, S>> {
        let (shape, out) = self.zip_same(other, "mul", |x, y| x * y)?;
        let op = Op::Mul {
            a: self.id,
            b: other.id,
        };
        let id = self.tape.push(shape, out, op, &[self.id, other.id]);
        Ok(self.tape.var(id))
    }

    pub fn scale(&self, factor: S) -> Var<'t, S> {
        let out = self.with_data(|d| d.iter().map(|&x| x * factor).collect());
        self.unary(self.shape(), out, Op::Scale { a: self.id, factor })
    }

    /// Adds a constant of the same length; the constant receives no gradient.
    pub fn add_const(&self, c: &[S]) -> Result<Var<'t, S>> {
        let shape = self.shape();
        let out: Vec<S> = self.with_data(|d| {
            if d.len() != c.len() {
                return None;
            }
            Some(d.iter().zip(c).map(|(&x, &y)| x + y).collect())
        })
        .ok_or_else(|| Error::shape("add_const", &shape, &[c.len()]))?;
        Ok(self.unary(shape, out, Op::Identity { a: self.id }))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t, S>> {
        let cur = self.shape();
        if shape.iter().product::<usize>() != cur.iter().product::<usize>() || shape.contains(&0) {
            return Err(Error::shape("reshape", &cur, shape));
        }
        let out = self.with_data(<[S]>::to_vec);
        Ok(self.unary(shape.to_vec(), out, Op::Identity { a: self.id }))
    }

    /// Swaps the last two dimensions.
    pub fn transpose(&self) -> Result<Var<'t, S>> {
        let mut shape = self.shape();
        if shape.len() < 2 {
            return Err(Error::shape("transpose", &shape, &[]));
        }
        let (rows, cols) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let plane = rows * cols;
        let out = self.with_data(|d| {
            let mut out = vec![S::zero(); d.len()];
            for (bi, src) in d.chunks(plane).enumerate() {
                for r in 0..rows {
                    for c in 0..cols {
                        out[bi * plane + c * rows + r] = src[r * cols + c];
                    }
                }
            }
            out
        });
        let n = shape.len();
        shape.swap(n - 2, n - 1);
        Ok(self.unary(shape, out, Op::Transpose { a: self.id, rows, cols }))
    }

    pub fn softmax(&self, axis: usize) -> Result<Var<'t, S>> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(Error::Index(format!(
                "softmax axis {axis} for shape {shape:?}"
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let out = self.with_data(|d| {
            let mut out = vec![S::zero(); d.len()];
            if inner == 1 {
                for (src, dst) in d.chunks(len).zip(out.chunks_mut(len)) {
                    softmax_slice(src, dst);
                }
            } else {
                let mut buf = vec![S::zero(); len];
                let mut res = vec![S::zero(); len];
                for o in 0..outer {
                    for j in 0..inner {
                        let base = o * len * inner + j;
                        for t in 0..len {
                            buf[t] = d[base + t * inner];
                        }
                        softmax_slice(&buf, &mut res);
                        for t in 0..len {
                            out[base + t * inner] = res[t];
                        }
                    }
                }
            }
            out
        });
        Ok(self.unary(
            shape,
            out,
            Op::Softmax {
                a: self.id,
                outer,
                len,
                inner,
            },
        ))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&self) -> Var<'t, S> {
        let out = self.with_data(|d| d.iter().map(|&x| gelu_value(x)).collect());
        self.unary(self.shape(), out, Op::Gelu { a: self.id })
    }

    /// Normalizes over the last dimension, then applies `gain` and `bias`.
    pub fn layer_norm(&self, gain: Var<'t, S>, bias: Var<'t, S>, eps: f64) -> Result<Var<'t, S>> {
        self.same_tape(&gain);
        self.same_tape(&bias);
        let shape = self.shape();
        let width = *shape.last().unwrap();
        if gain.shape() != [width] || bias.shape() != [width] {
            return Err(Error::shape("layer_norm", &shape, &gain.shape()));
        }
        let eps = S::lit(eps);
        let w = S::lit(width as f64);
        let (out, xhat, rstd) = {
            let inner = self.tape.inner.borrow();
            let x = &inner.nodes[self.id].value;
            let g = &inner.nodes[gain.id].value;
            let b = &inner.nodes[bias.id].value;
            let rows = x.len() / width;
            let mut out = vec![S::zero(); x.len()];
            let mut xhat = vec![S::zero(); x.len()];
            let mut rstd = vec![S::zero(); rows];
            for r in 0..rows {
                let row = &x[r * width..(r + 1) * width];
                let mean = row.iter().copied().sum::<S>() / w;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / w;
                let rs = S::one() / (var + eps).sqrt();
                rstd[r] = rs;
                for c in 0..width {
                    let xh = if rs.is_finite() {
                        (row[c] - mean) * rs
                    } else {
                        S::zero()
                    };
                    xhat[r * width + c] = xh;
                    out[r * width + c] = xh * g[c] + b[c];
                }
            }
            (out, xhat, rstd)
        };
        let op = Op::LayerNorm {
            x: self.id,
            gain: gain.id,
            bias: bias.id,
            xhat,
            rstd,
        };
        let id = self
            .tape
            .push(shape, out, op, &[self.id, gain.id, bias.id]);
        Ok(self.tape.var(id))
    }

    pub fn sum(&self) -> Var<'t, S> {
        let s = self.with_data(|d| d.iter().copied().sum());
        self.unary(vec![1], vec![s], Op::Sum { a: self.id })
    }

    /// `-log softmax(self)[target]` for a vector of logits.
    pub fn cross_entropy(&self, target: usize) -> Result<Var<'t, S>> {
        let shape = self.shape();
        let classes = *shape.last().unwrap();
        if shape.iter().product::<usize>() != classes {
            return Err(Error::shape("cross_entropy", &shape, &[classes]));
        }
        self.cross_entropy_rows(&[target], &[S::one()])
    }

    /// Weighted sum over rows of `-log softmax(row)[target]`.
    pub fn cross_entropy_rows(&self, targets: &[usize], weights: &[S]) -> Result<Var<'t, S>> {
        let shape = self.shape();
        let classes = *shape.last().unwrap();
        let rows = shape.iter().product::<usize>() / classes;
        if targets.len() != rows || weights.len() != rows {
            return Err(Error::shape("cross_entropy", &shape, &[targets.len()]));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= classes) {
            return Err(Error::Index(format!(
                "target class {t} out of range for {classes} classes"
            )));
        }
        let (loss, probs) = self.with_data(|d| {
            let mut probs = vec![S::zero(); d.len()];
            let mut loss = S::zero();
            for r in 0..rows {
                let row = &d[r * classes..(r + 1) * classes];
                loss += weights[r] * crate::tensor::neg_log_softmax(row, targets[r]);
                softmax_slice(row, &mut probs[r * classes..(r + 1) * classes]);
            }
            (loss, probs)
        });
        let op = Op::CrossEntropy {
            logits: self.id,
            targets: targets.to_vec(),
            weights: weights.to_vec(),
            probs,
        };
        Ok(self.unary(vec![1], vec![loss], op))
    }

    /// Columns `[start, start + len)` of a `[rows, width]` matrix.
    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Var<'t, S>> {
        let shape = self.shape();
        let width = *shape.last().unwrap();
        if shape.len() != 2 || start + len > width || len == 0 {
            return Err(Error::shape("slice_cols", &shape, &[start, len]));
        }
        let out = self.with_data(|d| {
            d.chunks(width)
                .flat_map(|row| row[start..start + len].iter().copied())
                .collect()
        });
        Ok(self.unary(
            vec![shape[0], len],
            out,
            Op::SliceCols {
                a: self.id,
                start,
                cols: len,
            },
        ))
    }

    pub fn rows(&self, start: usize, len: usize) -> Result<Var<'t, S>> {
        let index: Vec<usize> = (start..start + len).collect();
        self.gather_rows(&index)
    }

    /// Selects rows of a `[rows, width]` matrix; indices may repeat.
    pub fn gather_rows(&self, index: &[usize]) -> Result<Var<'t, S>> {
        let shape = self.shape();
        if shape.len() != 2 || index.is_empty() {
            return Err(Error::shape("gather_rows", &shape, &[index.len()]));
        }
        let (rows, width) = (shape[0], shape[1]);
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(Error::Index(format!("row {bad} of {rows}")));
        }
        let out = self.with_data(|d| {
            index
                .iter()
                .flat_map(|&i| d[i * width..(i + 1) * width].iter().copied())
                .collect()
        });
        Ok(self.unary(
            vec![index.len(), width],
            out,
            Op::GatherRows {
                a: self.id,
                index: index.to_vec(),
            },
        ))
    }

    pub fn dropout<R: Rng + ?Sized>(&self, rate: f64, rng: &mut R) -> Var<'t, S> {
        if rate <= 0.0 {
            return *self;
        }
        let keep = S::lit(1.0 / (1.0 - rate));
        let n = self.with_data(<[S]>::len);
        let mask: Vec<S> = (0..n)
            .map(|_| {
                if rng.gen::<f64>() < rate {
                    S::zero()
                } else {
                    keep
                }
            })
            .collect();
        let out = self.with_data(|d| d.iter().zip(&mask).map(|(&x, &m)| x * m).collect());
        self.unary(self.shape(), out, Op::Dropout { a: self.id, mask })
    }

    /// Scalar dot product of two equally shaped tensors.
    pub fn dot(&self, other: Var<'t, S>) -> Result<Var<'t, S>> {
        Ok(self.mul(other)?.sum())
    }
}

/// Concatenates `[rows, w_i]` matrices side by side.
pub fn concat_cols<'t, S: Scalar>(parts: &[Var<'t, S>]) -> Result<Var<'t, S>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Contract("concat_cols of nothing".into()))?;
    let tape = first.tape;
    let rows = first.shape()[0];
    let mut meta = Vec::with_capacity(parts.len());
    for p in parts {
        first.same_tape(p);
        let s = p.shape();
        if s.len() != 2 || s[0] != rows {
            return Err(Error::shape("concat_cols", &first.shape(), &s));
        }
        meta.push((p.id, s[1]));
    }
    let width: usize = meta.iter().map(|m| m.1).sum();
    let out = {
        let inner = tape.inner.borrow();
        let mut out = Vec::with_capacity(rows * width);
        for r in 0..rows {
            for &(id, w) in &meta {
                out.extend_from_slice(&inner.nodes[id].value[r * w..(r + 1) * w]);
            }
        }
        out
    };
    let ids: Vec<usize> = meta.iter().map(|m| m.0).collect();
    let id = tape.push(vec![rows, width], out, Op::ConcatCols { parts: meta }, &ids);
    Ok(tape.var(id))
}

/// Stacks `[r_i, width]` matrices vertically.
pub fn concat_rows<'t, S: Scalar>(parts: &[Var<'t, S>]) -> Result<Var<'t, S>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Contract("concat_rows of nothing".into()))?;
    let tape = first.tape;
    let width = *first.shape().last().unwrap();
    let mut rows = 0;
    for p in parts {
        first.same_tape(p);
        let s = p.shape();
        if s.len() != 2 || s[1] != width {
            return Err(Error::shape("concat_rows", &first.shape(), &s));
        }
        rows += s[0];
    }
    let out = {
        let inner = tape.inner.borrow();
        let mut out = Vec::with_capacity(rows * width);
        for p in parts {
            out.extend_from_slice(&inner.nodes[p.id].value);
        }
        out
    };
    let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
    let id = tape.push(
        vec![rows, width],
        out,
        Op::ConcatRows { parts: ids.clone() },
        &ids,
    );
    Ok(tape.var(id))
}

/// Sum of scalar vars.
pub fn sum_all<'t, S: Scalar>(terms: &[Var<'t, S>]) -> Result<Var<'t, S>> {
    let mut it = terms.iter();
    let mut acc = *it
        .next()
        .ok_or_else(|| Error::Contract("sum of no terms".into()))?;
    for t in it {
        acc = acc.add(*t)?;
    }
    Ok(acc)
}
