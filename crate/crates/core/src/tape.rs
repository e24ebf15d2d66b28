//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every op applied to its [`Var`]s in creation order,
//! which is already a topological order. [`Tape::grad`] walks the record
//! backwards once, visiting each node a single time. Nodes that do not depend
//! on any `requires_grad` leaf carry no backward work at all, so frozen
//! weights cost only their forward pass.

use std::cell::{Ref, RefCell};

use crate::error::{invalid, Error, Result};
use crate::rng::RngState;
use crate::scalar::Scalar;
use crate::tensor::{matmul_nn, matmul_nt, matmul_tn, Tensor};

/// Value subtracted from masked attention scores.
pub const MASK_VALUE: f64 = -1e9;

pub const LAYER_NORM_EPS: f64 = 1e-5;

const L2_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Bcast {
    Same,
    /// rhs has as many elements as the last axis of lhs
    Row,
    Scalar,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize, Bcast),
    Mul(usize, usize, Bcast),
    Transpose(usize),
    Concat {
        parts: Vec<usize>,
        axis: usize,
    },
    Slice {
        src: usize,
        axis: usize,
        start: usize,
    },
    Mean(usize),
    MeanAxis(usize, usize),
    Scale(usize, T),
    Exp(usize),
    Log(usize),
    Softmax(usize),
    LayerNorm {
        src: usize,
        inv_std: Vec<T>,
    },
    Gelu(usize),
    Embedding {
        table: usize,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        weights: Vec<T>,
        probs: Vec<T>,
        total_weight: T,
    },
    L2Normalize {
        src: usize,
        norms: Vec<T>,
    },
    Dropout {
        src: usize,
        mask: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recording of primitive ops sufficient to replay their backward rules.
pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    strict_finite: bool,
}

/// Handle to a node on a tape.
pub struct Var<'t, T: Scalar> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Scalar> Clone for Var<'_, T> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<T: Scalar> Copy for Var<'_, T> {}

impl<T: Scalar> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            strict_finite: false,
        }
    }

    /// Reject non-finite op inputs.
    pub fn strict() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            strict_finite: true,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Register a leaf.
    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        self.push_raw(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, false)
    }

    pub fn param(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, true)
    }

    fn push_raw(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, parents: &[usize]) -> Var<'_, T> {
        let rg = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|&p| nodes[p].requires_grad)
        };
        self.push_raw(value, op, rg)
    }

    fn check_finite(&self, op: &'static str, ids: &[usize]) -> Result<()> {
        if self.strict_finite {
            let nodes = self.nodes.borrow();
            if ids.iter().any(|&i| !nodes[i].value.is_all_finite()) {
                return Err(Error::NonFinite { op });
            }
        }
        Ok(())
    }

    fn value_of(&self, id: usize) -> Ref<'_, Tensor<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    fn requires_grad_of(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Gradients of a scalar `loss` with respect to `params`. Parameters the
    /// loss does not depend on receive zeros.
    pub fn grad(&self, loss: Var<'_, T>, params: &[Var<'_, T>]) -> Result<Vec<Tensor<T>>> {
        let all = self.backward(loss)?;
        let nodes = self.nodes.borrow();
        Ok(params
            .iter()
            .map(|p| {
                all.0[p.id]
                    .clone()
                    .unwrap_or_else(|| Tensor::zeros(nodes[p.id].value.shape()))
            })
            .collect())
    }

    /// Full backward sweep; entry `i` holds d loss / d node `i` for every node
    /// that requires grad and is reachable from the loss.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id].value;
        if !root.is_scalar() {
            return Err(Error::NotScalar(root.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        if !nodes[loss.id].requires_grad {
            return Ok(Gradients(grads));
        }
        grads[loss.id] = Some(Tensor::full(root.shape(), T::one()));

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            let rg = |i: usize| nodes[i].requires_grad;
            let val = |i: usize| &nodes[i].value;
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let (m, k) = val(*a).dims2();
                    let n = val(*b).dims2().1;
                    if rg(*a) {
                        let d = matmul_nt(g.data(), val(*b).data(), m, n, k);
                        accumulate(&mut grads, *a, Tensor::from_vec(&[m, k], d));
                    }
                    if rg(*b) {
                        let d = matmul_tn(val(*a).data(), g.data(), m, k, n);
                        accumulate(&mut grads, *b, Tensor::from_vec(&[k, n], d));
                    }
                }
                Op::Add(a, b, bc) => {
                    if rg(*a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if rg(*b) {
                        let d = reduce_bcast(&g, val(*b).shape(), *bc);
                        accumulate(&mut grads, *b, d);
                    }
                }
                Op::Mul(a, b, bc) => {
                    let av = val(*a);
                    let bv = val(*b);
                    if rg(*a) {
                        let mut d = g.clone();
                        let (_, c) = d.dims2();
                        for (i, dv) in d.data_mut().iter_mut().enumerate() {
                            *dv *= bcast_at(bv, *bc, i, c);
                        }
                        accumulate(&mut grads, *a, d);
                    }
                    if rg(*b) {
                        let prod = Tensor::from_vec(
                            g.shape(),
                            g.data().iter().zip(av.data()).map(|(&x, &y)| x * y).collect(),
                        );
                        accumulate(&mut grads, *b, reduce_bcast(&prod, bv.shape(), *bc));
                    }
                }
                Op::Transpose(a) => {
                    if rg(*a) {
                        accumulate(&mut grads, *a, g.transpose2());
                    }
                }
                Op::Concat { parts, axis } => {
                    let mut offset = 0;
                    for &p in parts {
                        let len = val(p).shape()[*axis];
                        if rg(p) {
                            accumulate(&mut grads, p, slice2(&g, *axis, offset, len));
                        }
                        offset += len;
                    }
                }
                Op::Slice { src, axis, start } => {
                    if rg(*src) {
                        let shape = val(*src).shape().to_vec();
                        let mut d = Tensor::zeros(&shape);
                        let (r, c) = (shape[0], shape[1]);
                        let (gr, gc) = (g.shape()[0], g.shape()[1]);
                        let dd = d.data_mut();
                        for i in 0..gr {
                            for j in 0..gc {
                                let (si, sj) = if *axis == 0 {
                                    (i + start, j)
                                } else {
                                    (i, j + start)
                                };
                                debug_assert!(si < r && sj < c);
                                dd[si * c + sj] = g.data()[i * gc + j];
                            }
                        }
                        accumulate(&mut grads, *src, d);
                    }
                }
                Op::Mean(a) => {
                    if rg(*a) {
                        let n = val(*a).numel();
                        let v = g.item() / T::from_usize_lossy(n);
                        accumulate(&mut grads, *a, Tensor::full(val(*a).shape(), v));
                    }
                }
                Op::MeanAxis(a, axis) => {
                    if rg(*a) {
                        let shape = val(*a).shape().to_vec();
                        let (r, c) = (shape[0], shape[1]);
                        let mut d = Tensor::zeros(&shape);
                        let dd = d.data_mut();
                        if *axis == 0 {
                            let inv = T::one() / T::from_usize_lossy(r);
                            for i in 0..r {
                                for j in 0..c {
                                    dd[i * c + j] = g.data()[j] * inv;
                                }
                            }
                        } else {
                            let inv = T::one() / T::from_usize_lossy(c);
                            for i in 0..r {
                                for j in 0..c {
                                    dd[i * c + j] = g.data()[i] * inv;
                                }
                            }
                        }
                        accumulate(&mut grads, *a, d);
                    }
                }
                Op::Scale(a, f) => {
                    if rg(*a) {
                        accumulate(&mut grads, *a, g.map(|v| v * *f));
                    }
                }
                Op::Exp(a) => {
                    if rg(*a) {
                        let d = zip(&g, &node.value, |gv, y| gv * y);
                        accumulate(&mut grads, *a, d);
                    }
                }
                Op::Log(a) => {
                    if rg(*a) {
                        let d = zip(&g, val(*a), |gv, x| gv / x);
                        accumulate(&mut grads, *a, d);
                    }
                }
                Op::Softmax(a) => {
                    if rg(*a) {
                        let y = &node.value;
                        let (r, c) = y.dims2();
                        let mut d = Tensor::zeros(y.shape());
                        for i in 0..r {
                            let yr = &y.data()[i * c..(i + 1) * c];
                            let gr = &g.data()[i * c..(i + 1) * c];
                            let s: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                            for j in 0..c {
                                d.data_mut()[i * c + j] = yr[j] * (gr[j] - s);
                            }
                        }
                        accumulate(&mut grads, *a, d);
                    }
                }
                Op::LayerNorm { src, inv_std } => {
                    if rg(*src) {
                        let y = &node.value;
                        let (r, c) = y.dims2();
                        let cn = T::from_usize_lossy(c);
                        let mut d = Tensor::zeros(y.shape());
                        for i in 0..r {
                            let yr = &y.data()[i * c..(i + 1) * c];
                            let gr = &g.data()[i * c..(i + 1) * c];
                            let mg: T = gr.iter().copied().sum::<T>() / cn;
                            let mgy: T = gr.iter().zip(yr).map(|(&p, &q)| p * q).sum::<T>() / cn;
                            for j in 0..c {
                                d.data_mut()[i * c + j] = inv_std[i] * (gr[j] - mg - yr[j] * mgy);
                            }
                        }
                        accumulate(&mut grads, *src, d);
                    }
                }
                Op::Gelu(a) => {
                    if rg(*a) {
                        let d = zip(&g, val(*a), |gv, x| gv * gelu_grad(x));
                        accumulate(&mut grads, *a, d);
                    }
                }
                Op::Embedding { table, ids } => {
                    if rg(*table) {
                        let shape = val(*table).shape().to_vec();
                        let dim = shape[1];
                        let mut d = Tensor::zeros(&shape);
                        for (row, &id) in ids.iter().enumerate() {
                            let dst = &mut d.data_mut()[id * dim..(id + 1) * dim];
                            for (dv, &gv) in dst.iter_mut().zip(&g.data()[row * dim..(row + 1) * dim]) {
                                *dv += gv;
                            }
                        }
                        accumulate(&mut grads, *table, d);
                    }
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    weights,
                    probs,
                    total_weight,
                } => {
                    if rg(*logits) && *total_weight > T::zero() {
                        let shape = val(*logits).shape().to_vec();
                        let (_, c) = val(*logits).dims2();
                        let scale = g.item() / *total_weight;
                        let mut d = Tensor::zeros(&shape);
                        for (i, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                            if w == T::zero() {
                                continue;
                            }
                            let row = &mut d.data_mut()[i * c..(i + 1) * c];
                            for j in 0..c {
                                row[j] = probs[i * c + j] * w * scale;
                            }
                            row[t] -= w * scale;
                        }
                        accumulate(&mut grads, *logits, d);
                    }
                }
                Op::L2Normalize { src, norms } => {
                    if rg(*src) {
                        let y = &node.value;
                        let (r, c) = y.dims2();
                        let mut d = Tensor::zeros(y.shape());
                        for i in 0..r {
                            let yr = &y.data()[i * c..(i + 1) * c];
                            let gr = &g.data()[i * c..(i + 1) * c];
                            let s: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                            for j in 0..c {
                                d.data_mut()[i * c + j] = (gr[j] - yr[j] * s) / norms[i];
                            }
                        }
                        accumulate(&mut grads, *src, d);
                    }
                }
                Op::Dropout { src, mask } => {
                    if rg(*src) {
                        let mut d = g.clone();
                        for (dv, &m) in d.data_mut().iter_mut().zip(mask) {
                            *dv *= m;
                        }
                        accumulate(&mut grads, *src, d);
                    }
                }
            }
        }
        Ok(Gradients(grads))
    }
}

/// Result of a backward sweep.
pub struct Gradients<T>(Vec<Option<Tensor<T>>>);

impl<T: Scalar> Gradients<T> {
    /// Gradient for `var`, `None` when the loss does not depend on it.
    pub fn get(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.0.get(var.id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var<'_, T>) -> Option<Tensor<T>> {
        self.0.get_mut(var.id).and_then(|g| g.take())
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], id: usize, d: Tensor<T>) {
    match &mut grads[id] {
        Some(g) => g.add_assign(&d),
        slot @ None => *slot = Some(d),
    }
}

fn zip<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    Tensor::from_vec(
        a.shape(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
}

#[inline]
fn bcast_at<T: Scalar>(b: &Tensor<T>, bc: Bcast, i: usize, cols: usize) -> T {
    match bc {
        Bcast::Same => b.data()[i],
        Bcast::Row => b.data()[i % cols],
        Bcast::Scalar => b.data()[0],
    }
}

fn reduce_bcast<T: Scalar>(g: &Tensor<T>, shape: &[usize], bc: Bcast) -> Tensor<T> {
    match bc {
        Bcast::Same => g.clone(),
        Bcast::Scalar => Tensor::full(shape, g.sum()),
        Bcast::Row => {
            let (r, c) = g.dims2();
            let mut out = vec![T::zero(); c];
            for i in 0..r {
                for (o, &v) in out.iter_mut().zip(&g.data()[i * c..(i + 1) * c]) {
                    *o += v;
                }
            }
            Tensor::from_vec(shape, out)
        }
    }
}

fn slice2<T: Scalar>(t: &Tensor<T>, axis: usize, start: usize, len: usize) -> Tensor<T> {
    let (r, c) = (t.shape()[0], t.shape()[1]);
    if axis == 0 {
        Tensor::from_vec(&[len, c], t.data()[start * c..(start + len) * c].to_vec())
    } else {
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&t.data()[i * c + start..i * c + start + len]);
        }
        Tensor::from_vec(&[r, len], out)
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

fn gelu<T: Scalar>(x: T) -> T {
    let k = T::lit(GELU_K);
    let c = T::lit(GELU_C);
    let half = T::lit(0.5);
    half * x * (T::one() + (k * (x + c * x * x * x)).tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let k = T::lit(GELU_K);
    let c = T::lit(GELU_C);
    let half = T::lit(0.5);
    let th = (k * (x + c * x * x * x)).tanh();
    half * (T::one() + th) + half * x * (T::one() - th * th) * k * (T::one() + T::lit(3.0) * c * x * x)
}

fn classify_bcast(a: &[usize], b: &[usize]) -> Option<Bcast> {
    let bn: usize = b.iter().product();
    if a == b {
        Some(Bcast::Same)
    } else if bn == 1 {
        Some(Bcast::Scalar)
    } else if !a.is_empty() && bn == *a.last().unwrap() {
        Some(Bcast::Row)
    } else {
        None
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Ref<'t, Tensor<T>> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn item(&self) -> T {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad_of(self.id)
    }

    fn shape_err(&self, op: &'static str, other: &Var<'t, T>) -> Error {
        Error::ShapeMismatch {
            op,
            lhs: self.shape(),
            rhs: other.shape(),
        }
    }

    fn unary(self, op: &'static str, value: Tensor<T>, rec: Op<T>) -> Result<Var<'t, T>> {
        let _ = op;
        Ok(self.tape.push(value, rec, &[self.id]))
    }

    pub fn matmul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.tape.check_finite("matmul", &[self.id, other.id])?;
        let out = {
            let a = self.value();
            let b = other.value();
            if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[1] != b.shape()[0] {
                drop((a, b));
                return Err(self.shape_err("matmul", &other));
            }
            let (m, k) = (a.shape()[0], a.shape()[1]);
            let n = b.shape()[1];
            Tensor::from_vec(&[m, n], matmul_nn(a.data(), b.data(), m, k, n))
        };
        Ok(self.tape.push(out, Op::MatMul(self.id, other.id), &[self.id, other.id]))
    }

    fn binary(
        self,
        other: Var<'t, T>,
        name: &'static str,
        f: impl Fn(T, T) -> T,
        mk: impl Fn(usize, usize, Bcast) -> Op<T>,
    ) -> Result<Var<'t, T>> {
        self.tape.check_finite(name, &[self.id, other.id])?;
        let out = {
            let a = self.value();
            let b = other.value();
            let Some(bc) = classify_bcast(a.shape(), b.shape()) else {
                drop((a, b));
                return Err(self.shape_err(name, &other));
            };
            let (_, c) = a.dims2();
            let data = a
                .data()
                .iter()
                .enumerate()
                .map(|(i, &x)| f(x, bcast_at(&b, bc, i, c)))
                .collect();
            (Tensor::from_vec(a.shape(), data), bc)
        };
        let (value, bc) = out;
        Ok(self
            .tape
            .push(value, mk(self.id, other.id, bc), &[self.id, other.id]))
    }

    /// Elementwise sum; `other` may match the shape, be a scalar, or be a
    /// vector broadcast over rows.
    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, "add", |x, y| x + y, Op::Add)
    }

    /// Elementwise product with the same broadcasting as [`Var::add`].
    pub fn mul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, "multiply", |x, y| x * y, Op::Mul)
    }

    pub fn sub(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.add(other.scale(-T::one())?)
    }

    pub fn transpose(self) -> Result<Var<'t, T>> {
        let v = {
            let a = self.value();
            if a.shape().len() != 2 {
                return Err(invalid(format!("transpose needs a matrix, got {:?}", a.shape())));
            }
            a.transpose2()
        };
        self.unary("transpose", v, Op::Transpose(self.id))
    }

    /// Concatenate matrices along `axis` (0 = rows, 1 = columns).
    pub fn concat(parts: &[Var<'t, T>], axis: usize) -> Result<Var<'t, T>> {
        let first = *parts.first().ok_or_else(|| invalid("concat of zero tensors"))?;
        let tape = first.tape;
        if axis > 1 {
            return Err(invalid("concat axis must be 0 or 1"));
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        tape.check_finite("concat", &ids)?;
        let out = {
            let vals: Vec<Ref<'_, Tensor<T>>> = parts.iter().map(|p| p.value()).collect();
            let s0 = vals[0].shape().to_vec();
            for (v, p) in vals.iter().zip(parts) {
                let s = v.shape();
                let ok = s.len() == 2 && s0.len() == 2 && s[1 - axis] == s0[1 - axis];
                if !ok {
                    return Err(Error::ShapeMismatch {
                        op: "concat",
                        lhs: s0.clone(),
                        rhs: p.value().shape().to_vec(),
                    });
                }
            }
            if axis == 0 {
                let rows: usize = vals.iter().map(|v| v.shape()[0]).sum();
                let mut data = Vec::with_capacity(rows * s0[1]);
                for v in &vals {
                    data.extend_from_slice(v.data());
                }
                Tensor::from_vec(&[rows, s0[1]], data)
            } else {
                let cols: usize = vals.iter().map(|v| v.shape()[1]).sum();
                let r = s0[0];
                let mut data = Vec::with_capacity(r * cols);
                for i in 0..r {
                    for v in &vals {
                        data.extend_from_slice(v.row(i));
                    }
                }
                Tensor::from_vec(&[r, cols], data)
            }
        };
        Ok(tape.push(out, Op::Concat { parts: ids.clone(), axis }, &ids))
    }

    /// `len` rows (axis 0) or columns (axis 1) starting at `start`.
    pub fn slice(self, axis: usize, start: usize, len: usize) -> Result<Var<'t, T>> {
        let v = {
            let a = self.value();
            let s = a.shape();
            if s.len() != 2 || axis > 1 || start + len > s[axis] {
                return Err(invalid(format!(
                    "slice [{start}, {}) on axis {axis} out of range for {s:?}",
                    start + len
                )));
            }
            slice2(&a, axis, start, len)
        };
        self.unary("slice", v, Op::Slice { src: self.id, axis, start })
    }

    /// Mean over all elements, producing a scalar.
    pub fn mean(self) -> Result<Var<'t, T>> {
        self.tape.check_finite("mean", &[self.id])?;
        let v = {
            let a = self.value();
            Tensor::scalar(a.sum() / T::from_usize_lossy(a.numel().max(1)))
        };
        self.unary("mean", v, Op::Mean(self.id))
    }

    /// Sum over all elements.
    pub fn sum(self) -> Result<Var<'t, T>> {
        let n = self.value().numel();
        self.mean()?.scale(T::from_usize_lossy(n))
    }

    /// Mean of a matrix along `axis`: 0 gives the per-column mean `[1, c]`,
    /// 1 gives the per-row mean `[r, 1]`.
    pub fn mean_axis(self, axis: usize) -> Result<Var<'t, T>> {
        let v = {
            let a = self.value();
            let s = a.shape();
            if s.len() != 2 || axis > 1 {
                return Err(invalid(format!("mean_axis({axis}) on {s:?}")));
            }
            let (r, c) = (s[0], s[1]);
            if axis == 0 {
                let mut out = vec![T::zero(); c];
                for i in 0..r {
                    for (o, &x) in out.iter_mut().zip(a.row(i)) {
                        *o += x;
                    }
                }
                let inv = T::one() / T::from_usize_lossy(r);
                Tensor::from_vec(&[1, c], out.into_iter().map(|x| x * inv).collect())
            } else {
                let inv = T::one() / T::from_usize_lossy(c);
                let out = (0..r).map(|i| a.row(i).iter().copied().sum::<T>() * inv).collect();
                Tensor::from_vec(&[r, 1], out)
            }
        };
        self.unary("mean", v, Op::MeanAxis(self.id, axis))
    }

    pub fn scale(self, factor: T) -> Result<Var<'t, T>> {
        let v = self.value().map(|x| x * factor);
        self.unary("scale", v, Op::Scale(self.id, factor))
    }

    pub fn exp(self) -> Result<Var<'t, T>> {
        self.tape.check_finite("exp", &[self.id])?;
        let v = self.value().map(T::exp);
        self.unary("exp", v, Op::Exp(self.id))
    }

    pub fn log(self) -> Result<Var<'t, T>> {
        self.tape.check_finite("log", &[self.id])?;
        let v = self.value().map(T::ln);
        self.unary("log", v, Op::Log(self.id))
    }

    /// Softmax along the last axis, max-shifted.
    pub fn softmax(self) -> Result<Var<'t, T>> {
        self.tape.check_finite("softmax", &[self.id])?;
        let v = {
            let a = self.value();
            let (r, c) = a.dims2();
            let mut out = a.clone();
            for i in 0..r {
                softmax_in_place(&mut out.data_mut()[i * c..(i + 1) * c]);
            }
            out
        };
        self.unary("softmax", v, Op::Softmax(self.id))
    }

    /// Per-row normalization to zero mean and unit variance (no affine).
    pub fn layer_norm(self) -> Result<Var<'t, T>> {
        self.tape.check_finite("layer_norm", &[self.id])?;
        let (v, inv_std) = {
            let a = self.value();
            let (r, c) = a.dims2();
            let cn = T::from_usize_lossy(c);
            let eps = T::lit(LAYER_NORM_EPS);
            let mut out = a.clone();
            let mut inv_std = Vec::with_capacity(r);
            for i in 0..r {
                let row = &mut out.data_mut()[i * c..(i + 1) * c];
                let mu = row.iter().copied().sum::<T>() / cn;
                let var = row.iter().map(|&x| (x - mu) * (x - mu)).sum::<T>() / cn;
                let inv = T::one() / (var + eps).sqrt();
                for x in row.iter_mut() {
                    *x = (*x - mu) * inv;
                }
                inv_std.push(inv);
            }
            (out, inv_std)
        };
        self.unary("layer_norm", v, Op::LayerNorm { src: self.id, inv_std })
    }

    /// tanh-approximated GELU.
    pub fn gelu(self) -> Result<Var<'t, T>> {
        self.tape.check_finite("gelu", &[self.id])?;
        let v = self.value().map(gelu);
        self.unary("gelu", v, Op::Gelu(self.id))
    }

    /// Rows of an embedding table `[vocab, d]` selected by `ids`.
    pub fn embedding_lookup(self, ids: &[usize]) -> Result<Var<'t, T>> {
        let v = {
            let table = self.value();
            let s = table.shape();
            if s.len() != 2 {
                return Err(invalid(format!("embedding table must be a matrix, got {s:?}")));
            }
            let (vocab, d) = (s[0], s[1]);
            let mut out = Vec::with_capacity(ids.len() * d);
            for &id in ids {
                if id >= vocab {
                    return Err(invalid(format!("embedding id {id} out of range for {vocab} rows")));
                }
                out.extend_from_slice(table.row(id));
            }
            Tensor::from_vec(&[ids.len(), d], out)
        };
        self.unary(
            "embedding",
            v,
            Op::Embedding {
                table: self.id,
                ids: ids.to_vec(),
            },
        )
    }

    /// Weighted mean of per-row `-log softmax(logits)[target]`. Rows with
    /// weight zero are ignored; an all-zero weight vector yields loss 0.
    pub fn cross_entropy_with_logits(
        self,
        targets: &[usize],
        weights: Option<&[T]>,
    ) -> Result<Var<'t, T>> {
        self.tape.check_finite("cross_entropy", &[self.id])?;
        let (v, probs, w, total) = {
            let a = self.value();
            let (r, c) = a.dims2();
            if a.shape().len() != 2 || targets.len() != r {
                return Err(Error::ShapeMismatch {
                    op: "cross_entropy",
                    lhs: a.shape().to_vec(),
                    rhs: vec![targets.len()],
                });
            }
            let w: Vec<T> = match weights {
                Some(w) if w.len() == r => w.to_vec(),
                Some(w) => {
                    return Err(Error::ShapeMismatch {
                        op: "cross_entropy",
                        lhs: vec![r],
                        rhs: vec![w.len()],
                    })
                }
                None => vec![T::one(); r],
            };
            let mut probs = vec![T::zero(); r * c];
            let mut loss = T::zero();
            let mut total = T::zero();
            for i in 0..r {
                if targets[i] >= c {
                    return Err(invalid(format!("target {} out of range for {c} classes", targets[i])));
                }
                if w[i] == T::zero() {
                    continue;
                }
                let row = &mut probs[i * c..(i + 1) * c];
                row.copy_from_slice(a.row(i));
                let lse = log_softmax_shift(row);
                loss += w[i] * (lse - a.row(i)[targets[i]]);
                total += w[i];
            }
            let value = if total > T::zero() { loss / total } else { T::zero() };
            (Tensor::scalar(value), probs, w, total)
        };
        self.unary(
            "cross_entropy",
            v,
            Op::CrossEntropy {
                logits: self.id,
                targets: targets.to_vec(),
                weights: w,
                probs,
                total_weight: total,
            },
        )
    }

    /// Scale each row to unit L2 norm.
    pub fn l2_normalize(self) -> Result<Var<'t, T>> {
        self.tape.check_finite("l2_normalize", &[self.id])?;
        let (v, norms) = {
            let a = self.value();
            let (r, c) = a.dims2();
            let mut out = a.clone();
            let mut norms = Vec::with_capacity(r);
            for i in 0..r {
                let row = &mut out.data_mut()[i * c..(i + 1) * c];
                let n = row.iter().map(|&x| x * x).sum::<T>().sqrt().max(T::lit(L2_EPS));
                for x in row.iter_mut() {
                    *x /= n;
                }
                norms.push(n);
            }
            (out, norms)
        };
        self.unary("l2_normalize", v, Op::L2Normalize { src: self.id, norms })
    }

    /// Inverted dropout. Identity when `training` is false or `p` is zero.
    pub fn dropout(self, p: f64, training: bool, rng: &mut RngState) -> Result<Var<'t, T>> {
        if !(0.0..1.0).contains(&p) {
            return Err(invalid(format!("dropout probability {p} outside [0, 1)")));
        }
        if !training || p == 0.0 {
            return Ok(self);
        }
        let keep = T::lit(1.0 / (1.0 - p));
        let (v, mask) = {
            let a = self.value();
            let mask: Vec<T> = (0..a.numel())
                .map(|_| if rng.uniform() < p { T::zero() } else { keep })
                .collect();
            let data = a.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
            (Tensor::from_vec(a.shape(), data), mask)
        };
        self.unary("dropout", v, Op::Dropout { src: self.id, mask })
    }
}

/// Replace `row` with its softmax.
pub fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for x in row.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    for x in row.iter_mut() {
        *x /= s;
    }
}

/// Replace `row` with its softmax and return log-sum-exp of the original.
fn log_softmax_shift<T: Scalar>(row: &mut [T]) -> T {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for x in row.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    for x in row.iter_mut() {
        *x /= s;
    }
    m + s.ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, data)
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let tape = Tape::<f64>::new();
        let x = tape.param(t64(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, 9.0]));
        let s = x.sum().unwrap();
        let g = tape.grad(s, &[x]).unwrap();
        assert_eq!(g[0], Tensor::ones(&[2, 3]));
    }

    #[test]
    fn unreachable_param_gets_zeros() {
        let tape = Tape::<f64>::new();
        let x = tape.param(t64(&[2], &[1.0, 2.0]));
        let y = tape.param(t64(&[3], &[1.0, 2.0, 3.0]));
        let s = x.sum().unwrap();
        let g = tape.grad(s, &[x, y]).unwrap();
        assert_eq!(g[1], Tensor::zeros(&[3]));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let tape = Tape::<f64>::new();
        let x = tape.param(t64(&[2], &[1.0, 2.0]));
        assert!(matches!(tape.grad(x, &[x]), Err(Error::NotScalar(_))));
    }

    #[test]
    fn softmax_of_constant_is_uniform() {
        let tape = Tape::<f64>::new();
        for c in [-1e3, 0.0, 7.5, 1e3] {
            let x = tape.constant(Tensor::full(&[4], c));
            let y = x.softmax().unwrap();
            assert_eq!(y.value().data(), &[0.25; 4]);
        }
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[4, 5]));
        let e = a.add(b).unwrap_err().to_string();
        assert!(e.contains("[2, 3]") && e.contains("[4, 5]"), "{e}");
        let e = a.matmul(b).unwrap_err().to_string();
        assert!(e.contains("[2, 3]") && e.contains("[4, 5]"), "{e}");
    }

    #[test]
    fn strict_tape_rejects_non_finite() {
        let tape = Tape::<f32>::strict();
        let a = tape.constant(Tensor::from_vec(&[2], vec![1.0, f32::NAN]));
        assert!(matches!(a.exp(), Err(Error::NonFinite { .. })));
        let lax = Tape::<f32>::new();
        let a = lax.constant(Tensor::from_vec(&[2], vec![1.0, f32::NAN]));
        assert!(a.exp().is_ok());
    }

    #[test]
    fn dropout_eval_is_identity_and_train_is_reproducible() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::ones(&[8, 8]));
        let mut rng = RngState::new(5);
        let y = x.dropout(0.5, false, &mut rng).unwrap();
        assert_eq!(y.value().data(), x.value().data());
        let a = x.dropout(0.5, true, &mut RngState::new(5)).unwrap();
        let b = x.dropout(0.5, true, &mut RngState::new(5)).unwrap();
        assert_eq!(a.value().data(), b.value().data());
        assert!(a.value().data().iter().all(|&v| v == 0.0 || v == 2.0));
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[3, 10]));
        let l = x.cross_entropy_with_logits(&[1, 2, 3], None).unwrap();
        assert!((l.item() - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_zero_weights() {
        let tape = Tape::<f64>::new();
        let x = tape.param(Tensor::zeros(&[2, 4]));
        let l = x.cross_entropy_with_logits(&[1, 2], Some(&[0.0, 0.0])).unwrap();
        assert_eq!(l.item(), 0.0);
        let g = tape.grad(l, &[x]).unwrap();
        assert_eq!(g[0], Tensor::zeros(&[2, 4]));
    }
}
