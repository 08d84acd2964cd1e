//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every primitive applied during a forward pass. Calling
//! [`Var::backward`] on a scalar result replays the record in reverse and
//! returns the adjoint of every node that depends on a `requires_grad` leaf.
//! A tape is single-threaded; parallel work uses one tape per worker.

use std::cell::{Cell, Ref, RefCell};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::kernels::{self, gelu, gelu_grad};
use super::Tensor;

enum Op<T> {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    AddRow(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    Transpose(usize),
    Gelu(usize),
    Softmax(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Tensor<T>,
        inv_std: Vec<T>,
    },
    ConcatRows(Vec<usize>),
    SliceRows(usize, usize),
    Reshape(usize),
    Attention {
        q: usize,
        k: usize,
        v: usize,
        heads: usize,
        weights: Vec<T>,
    },
    CrossEntropy {
        logits: usize,
        label: usize,
        probs: Vec<T>,
    },
    Sum(usize),
    Mean(usize),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Ordered record of primitive applications.
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
    score_entries: Cell<u64>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T> {
    tape: &'t Tape<T>,
    id: usize,
}

/// Adjoints produced by a backward pass, indexed by node.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    /// Moves the adjoint out, leaving `None`.
    pub fn take(&mut self, var: Var<'_, T>) -> Option<Tensor<T>> {
        self.grads.get_mut(var.id).and_then(Option::take)
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            score_entries: Cell::new(0),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drops all recorded nodes. Outstanding [`Var`]s become invalid.
    pub fn clear(&mut self) {
        self.nodes.get_mut().clear();
        self.score_entries.set(0);
    }

    /// Number of query-key score entries computed by attention primitives
    /// since the tape was created or cleared. Counted once per query-key pair,
    /// independent of the number of heads.
    pub fn score_entries(&self) -> u64 {
        self.score_entries.get()
    }

    /// Trainable leaf.
    pub fn param(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, false)
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
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

    fn needs(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    fn value_ref(&self, id: usize) -> Ref<'_, Tensor<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    fn record(&self, value: Tensor<T>, op: Op<T>, parents: &[usize]) -> Var<'_, T> {
        let rg = self.needs(parents);
        self.push(value, op, rg)
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Tensor<T> {
        self.tape.value_ref(self.id).clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.value_ref(self.id).shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> T {
        self.tape.value_ref(self.id).data()[0]
    }

    fn same_tape(&self, other: &Var<'t, T>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "vars from different tapes"
        );
    }

    pub fn matmul(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(&rhs);
        let out = {
            let a = self.tape.value_ref(self.id);
            let b = self.tape.value_ref(rhs.id);
            kernels::matmul(&a, &b)?
        };
        Ok(self
            .tape
            .record(out, Op::MatMul(self.id, rhs.id), &[self.id, rhs.id]))
    }

    pub fn add(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(&rhs);
        let out = {
            let a = self.tape.value_ref(self.id);
            let b = self.tape.value_ref(rhs.id);
            if a.shape() != b.shape() {
                return Err(Error::dim("add", a.shape(), b.shape()));
            }
            let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
            Tensor::new(a.shape().to_vec(), data)?
        };
        Ok(self
            .tape
            .record(out, Op::Add(self.id, rhs.id), &[self.id, rhs.id]))
    }

    /// Adds a `1×N` (or length-`N`) row to every row of an `M×N` matrix.
    pub fn add_row(self, row: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(&row);
        let out = {
            let a = self.tape.value_ref(self.id);
            let r = self.tape.value_ref(row.id);
            let n = a.cols();
            if r.len() != n {
                return Err(Error::dim("add_row", a.shape(), r.shape()));
            }
            let mut out = a.clone();
            if n > 0 {
                for orow in out.data_mut().chunks_mut(n) {
                    for (o, &rv) in orow.iter_mut().zip(r.data()) {
                        *o += rv;
                    }
                }
            }
            out
        };
        Ok(self
            .tape
            .record(out, Op::AddRow(self.id, row.id), &[self.id, row.id]))
    }

    /// Elementwise product.
    pub fn mul(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(&rhs);
        let out = {
            let a = self.tape.value_ref(self.id);
            let b = self.tape.value_ref(rhs.id);
            if a.shape() != b.shape() {
                return Err(Error::dim("mul", a.shape(), b.shape()));
            }
            let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
            Tensor::new(a.shape().to_vec(), data)?
        };
        Ok(self
            .tape
            .record(out, Op::Mul(self.id, rhs.id), &[self.id, rhs.id]))
    }

    pub fn scale(self, c: T) -> Var<'t, T> {
        let out = self.tape.value_ref(self.id).map(|v| v * c);
        self.tape.record(out, Op::Scale(self.id, c), &[self.id])
    }

    pub fn transpose(self) -> Var<'t, T> {
        let out = self.tape.value_ref(self.id).transpose();
        self.tape.record(out, Op::Transpose(self.id), &[self.id])
    }

    pub fn gelu(self) -> Var<'t, T> {
        let out = self.tape.value_ref(self.id).map(gelu);
        self.tape.record(out, Op::Gelu(self.id), &[self.id])
    }

    /// Softmax over the last axis.
    pub fn softmax(self) -> Result<Var<'t, T>> {
        let out = kernels::softmax(&self.tape.value_ref(self.id))?;
        Ok(self.tape.record(out, Op::Softmax(self.id), &[self.id]))
    }

    pub fn layer_norm(self, gamma: Var<'t, T>, beta: Var<'t, T>, eps: T) -> Result<Var<'t, T>> {
        let (out, cache) = {
            let x = self.tape.value_ref(self.id);
            let g = self.tape.value_ref(gamma.id);
            let b = self.tape.value_ref(beta.id);
            kernels::layer_norm_cached(&x, &g, &b, eps)?
        };
        Ok(self.tape.record(
            out,
            Op::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat: cache.xhat,
                inv_std: cache.inv_std,
            },
            &[self.id, gamma.id, beta.id],
        ))
    }

    /// Stacks matrices with equal column counts vertically.
    pub fn concat_rows(parts: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Usage("concat_rows of nothing".into()))?;
        let tape = first.tape;
        let out = {
            let cols = tape.value_ref(first.id).cols();
            let mut rows = 0;
            let mut data = Vec::new();
            for p in parts {
                first.same_tape(p);
                let v = tape.value_ref(p.id);
                if v.rank() != 2 || v.cols() != cols {
                    return Err(Error::dim(
                        "concat_rows",
                        tape.value_ref(first.id).shape(),
                        v.shape(),
                    ));
                }
                rows += v.shape()[0];
                data.extend_from_slice(v.data());
            }
            Tensor::new(vec![rows, cols], data)?
        };
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        Ok(tape.record(out, Op::ConcatRows(ids.clone()), &ids))
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(self, start: usize, end: usize) -> Result<Var<'t, T>> {
        let out = {
            let a = self.tape.value_ref(self.id);
            if a.rank() != 2 || start > end || end > a.shape()[0] {
                return Err(Error::dim("slice_rows", a.shape(), &[start, end]));
            }
            let c = a.cols();
            Tensor::new(vec![end - start, c], a.data()[start * c..end * c].to_vec())?
        };
        Ok(self
            .tape
            .record(out, Op::SliceRows(self.id, start), &[self.id]))
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Var<'t, T>> {
        let out = self.tape.value_ref(self.id).clone().reshape(shape)?;
        Ok(self.tape.record(out, Op::Reshape(self.id), &[self.id]))
    }

    /// Multi-head scaled dot-product attention with queries `self`.
    pub fn attention(self, keys: Var<'t, T>, values: Var<'t, T>, heads: usize) -> Result<Var<'t, T>> {
        self.same_tape(&keys);
        self.same_tape(&values);
        let (out, weights, entries) = {
            let q = self.tape.value_ref(self.id);
            let k = self.tape.value_ref(keys.id);
            let v = self.tape.value_ref(values.id);
            let (o, w) = kernels::multi_head_attention(&q, &k, &v, heads)?;
            (o, w, (q.shape()[0] * k.shape()[0]) as u64)
        };
        self.tape
            .score_entries
            .set(self.tape.score_entries.get() + entries);
        Ok(self.tape.record(
            out,
            Op::Attention {
                q: self.id,
                k: keys.id,
                v: values.id,
                heads,
                weights,
            },
            &[self.id, keys.id, values.id],
        ))
    }

    /// `-log softmax(self)[label]` for a logit vector (any shape with K values).
    pub fn cross_entropy(self, label: usize) -> Result<Var<'t, T>> {
        let (loss, probs) = {
            let z = self.tape.value_ref(self.id);
            if label >= z.len() {
                return Err(Error::Parameter(format!(
                    "label {label} out of range for {} classes",
                    z.len()
                )));
            }
            let mut probs = z.data().to_vec();
            if probs.iter().any(|v| v.is_nan()) {
                return Err(Error::Numeric("logits contain NaN".into()));
            }
            let max = probs.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = probs.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            let loss = lse - z.data()[label];
            kernels::softmax_in_place(&mut probs);
            (loss, probs)
        };
        Ok(self.tape.record(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits: self.id,
                label,
                probs,
            },
            &[self.id],
        ))
    }

    pub fn sum(self) -> Var<'t, T> {
        let out = Tensor::scalar(self.tape.value_ref(self.id).sum());
        self.tape.record(out, Op::Sum(self.id), &[self.id])
    }

    pub fn mean(self) -> Var<'t, T> {
        let out = {
            let v = self.tape.value_ref(self.id);
            Tensor::scalar(v.sum() / T::from_usize_lossy(v.len().max(1)))
        };
        self.tape.record(out, Op::Mean(self.id), &[self.id])
    }

    /// Replays the tape backwards from this one-element node.
    pub fn backward(self) -> Result<Gradients<T>> {
        let nodes = self.tape.nodes.borrow();
        let root = &nodes[self.id];
        if root.value.len() != 1 {
            return Err(Error::Usage(format!(
                "backward from non-scalar of shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[self.id] = Some(Tensor::filled(root.value.shape(), T::one()));

        for id in (0..=self.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop_node(&nodes, node, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

fn accumulate<T: Scalar>(
    nodes: &[Node<T>],
    grads: &mut [Option<Tensor<T>>],
    id: usize,
    delta: Tensor<T>,
) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(g) => {
            for (a, b) in g.data_mut().iter_mut().zip(delta.data()) {
                *a += *b;
            }
        }
        slot @ None => {
            let shape = nodes[id].value.shape().to_vec();
            *slot = Some(delta.reshape(shape).expect("adjoint shape"));
        }
    }
}

fn backprop_node<T: Scalar>(
    nodes: &[Node<T>],
    node: &Node<T>,
    g: &Tensor<T>,
    grads: &mut [Option<Tensor<T>>],
) {
    let val = |i: usize| &nodes[i].value;
    let rg = |i: usize| nodes[i].requires_grad;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            if rg(*a) {
                accumulate(nodes, grads, *a, kernels::matmul_nt(g, val(*b)));
            }
            if rg(*b) {
                accumulate(nodes, grads, *b, kernels::matmul_tn(val(*a), g));
            }
        }
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, g.clone());
            accumulate(nodes, grads, *b, g.clone());
        }
        Op::AddRow(a, r) => {
            accumulate(nodes, grads, *a, g.clone());
            if rg(*r) {
                let n = g.cols();
                let mut acc = vec![T::zero(); n];
                if n > 0 {
                    for row in g.data().chunks(n) {
                        for (s, &v) in acc.iter_mut().zip(row) {
                            *s += v;
                        }
                    }
                }
                let t = Tensor::new(vec![n], acc).expect("row grad");
                accumulate(nodes, grads, *r, t);
            }
        }
        Op::Mul(a, b) => {
            if rg(*a) {
                let d = g.data().iter().zip(val(*b).data()).map(|(&x, &y)| x * y).collect();
                accumulate(nodes, grads, *a, Tensor::new(g.shape().to_vec(), d).unwrap());
            }
            if rg(*b) {
                let d = g.data().iter().zip(val(*a).data()).map(|(&x, &y)| x * y).collect();
                accumulate(nodes, grads, *b, Tensor::new(g.shape().to_vec(), d).unwrap());
            }
        }
        Op::Scale(a, c) => accumulate(nodes, grads, *a, g.map(|v| v * *c)),
        Op::Transpose(a) => accumulate(nodes, grads, *a, g.transpose()),
        Op::Gelu(a) => {
            let d = g
                .data()
                .iter()
                .zip(val(*a).data())
                .map(|(&gv, &x)| gv * gelu_grad(x))
                .collect();
            accumulate(nodes, grads, *a, Tensor::new(g.shape().to_vec(), d).unwrap());
        }
        Op::Softmax(a) => {
            let y = &node.value;
            let n = y.cols();
            let mut d = vec![T::zero(); y.len()];
            if n > 0 {
                for ((dr, yr), gr) in d.chunks_mut(n).zip(y.data().chunks(n)).zip(g.data().chunks(n)) {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for c in 0..n {
                        dr[c] = yr[c] * (gr[c] - dot);
                    }
                }
            }
            accumulate(nodes, grads, *a, Tensor::new(y.shape().to_vec(), d).unwrap());
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        } => {
            let n = xhat.cols();
            let gam = val(*gamma).data();
            if rg(*gamma) || rg(*beta) {
                let mut dg = vec![T::zero(); n];
                let mut db = vec![T::zero(); n];
                for (hr, gr) in xhat.data().chunks(n).zip(g.data().chunks(n)) {
                    for c in 0..n {
                        dg[c] += gr[c] * hr[c];
                        db[c] += gr[c];
                    }
                }
                let gs = val(*gamma).shape().to_vec();
                let bs = val(*beta).shape().to_vec();
                accumulate(nodes, grads, *gamma, Tensor::new(gs, dg).unwrap());
                accumulate(nodes, grads, *beta, Tensor::new(bs, db).unwrap());
            }
            if rg(*x) {
                let nn = T::from_usize_lossy(n);
                let mut dx = vec![T::zero(); xhat.len()];
                for (r, (hr, gr)) in xhat.data().chunks(n).zip(g.data().chunks(n)).enumerate() {
                    let mut sum_dh = T::zero();
                    let mut sum_dh_h = T::zero();
                    for c in 0..n {
                        let dh = gr[c] * gam[c];
                        sum_dh += dh;
                        sum_dh_h += dh * hr[c];
                    }
                    let istd = inv_std[r];
                    for c in 0..n {
                        let dh = gr[c] * gam[c];
                        dx[r * n + c] = istd * (dh - sum_dh / nn - hr[c] * sum_dh_h / nn);
                    }
                }
                accumulate(nodes, grads, *x, Tensor::new(xhat.shape().to_vec(), dx).unwrap());
            }
        }
        Op::ConcatRows(ids) => {
            let c = g.cols();
            let mut offset = 0;
            for &id in ids {
                let rows = val(id).shape()[0];
                if rg(id) {
                    let part = g.data()[offset * c..(offset + rows) * c].to_vec();
                    accumulate(nodes, grads, id, Tensor::new(vec![rows, c], part).unwrap());
                }
                offset += rows;
            }
        }
        Op::SliceRows(a, start) => {
            if rg(*a) {
                let src = val(*a);
                let c = src.cols();
                let mut d = Tensor::zeros(src.shape());
                d.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                accumulate(nodes, grads, *a, d);
            }
        }
        Op::Reshape(a) => accumulate(nodes, grads, *a, g.clone()),
        Op::Attention {
            q,
            k,
            v,
            heads,
            weights,
        } => attention_backward(nodes, grads, g, *q, *k, *v, *heads, weights),
        Op::CrossEntropy {
            logits,
            label,
            probs,
        } => {
            let s = g.data()[0];
            let mut d = probs.clone();
            d[*label] -= T::one();
            for v in d.iter_mut() {
                *v *= s;
            }
            let shape = val(*logits).shape().to_vec();
            accumulate(nodes, grads, *logits, Tensor::new(shape, d).unwrap());
        }
        Op::Sum(a) => {
            let s = g.data()[0];
            accumulate(nodes, grads, *a, Tensor::filled(val(*a).shape(), s));
        }
        Op::Mean(a) => {
            let n = T::from_usize_lossy(val(*a).len().max(1));
            let s = g.data()[0] / n;
            accumulate(nodes, grads, *a, Tensor::filled(val(*a).shape(), s));
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn attention_backward<T: Scalar>(
    nodes: &[Node<T>],
    grads: &mut [Option<Tensor<T>>],
    g: &Tensor<T>,
    q: usize,
    k: usize,
    v: usize,
    heads: usize,
    weights: &[T],
) {
    let (qv, kv, vv) = (&nodes[q].value, &nodes[k].value, &nodes[v].value);
    let d = qv.cols();
    let (nq, nk) = (qv.shape()[0], kv.shape()[0]);
    let width = d / heads;
    let scale = T::one() / T::from_usize_lossy(width).sqrt();
    let mut dq = vec![T::zero(); nq * d];
    let mut dk = vec![T::zero(); nk * d];
    let mut dv = vec![T::zero(); nk * d];
    let (qd, kd, vd, gd) = (qv.data(), kv.data(), vv.data(), g.data());
    let mut ds = vec![T::zero(); nk];
    for h in 0..heads {
        let off = h * width;
        let w = &weights[h * nq * nk..(h + 1) * nq * nk];
        for i in 0..nq {
            let p = &w[i * nk..(i + 1) * nk];
            let gi = &gd[i * d + off..i * d + off + width];
            // dP = dO · Vᵀ, dV += Pᵀ · dO
            let mut dot = T::zero();
            for j in 0..nk {
                let vj = &vd[j * d + off..j * d + off + width];
                let dp: T = gi.iter().zip(vj).map(|(&a, &b)| a * b).sum();
                ds[j] = dp;
                dot += dp * p[j];
                let dvj = &mut dv[j * d + off..j * d + off + width];
                for (o, &gg) in dvj.iter_mut().zip(gi) {
                    *o += p[j] * gg;
                }
            }
            // dS = P ⊙ (dP − Σ dP·P), then through the scaled product
            for j in 0..nk {
                let s = p[j] * (ds[j] - dot) * scale;
                if s == T::zero() {
                    continue;
                }
                for c in 0..width {
                    dq[i * d + off + c] += s * kd[j * d + off + c];
                    dk[j * d + off + c] += s * qd[i * d + off + c];
                }
            }
        }
    }
    accumulate(nodes, grads, q, Tensor::new(vec![nq, d], dq).unwrap());
    accumulate(nodes, grads, k, Tensor::new(vec![nk, d], dk).unwrap());
    accumulate(nodes, grads, v, Tensor::new(vec![nk, d], dv).unwrap());
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_matmul_gradient_is_ones_times_b_transposed() {
        let tape = Tape::<f64>::new();
        let a = tape.param(Tensor::from_f64(vec![2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = tape.param(Tensor::from_f64(vec![2, 3], &[5.0, 6.0, 7.0, 8.0, 9.0, 10.0]).unwrap());
        let loss = a.matmul(b).unwrap().sum();
        let g = loss.backward().unwrap();
        // ones(2x3) · bᵀ: each row = row sums of b
        assert_eq!(g.get(a).unwrap().data(), &[18.0, 27.0, 18.0, 27.0]);
        // aᵀ · ones(2x3): each row i = column sum i of a
        assert_eq!(g.get(b).unwrap().data(), &[4.0, 4.0, 4.0, 6.0, 6.0, 6.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let tape = Tape::<f64>::new();
        let c = tape.constant(Tensor::filled(&[2], 3.0));
        let p = tape.param(Tensor::filled(&[2], 1.0));
        let g = c.mul(p).unwrap().sum().backward().unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(p).unwrap().data(), &[3.0, 3.0]);
    }

    #[test]
    fn backward_requires_scalar_root() {
        let tape = Tape::<f64>::new();
        let p = tape.param(Tensor::filled(&[3], 1.0));
        assert!(matches!(p.backward(), Err(Error::Usage(_))));
    }

    #[test]
    fn attention_counts_score_entries() {
        let tape = Tape::<f64>::new();
        let q = tape.constant(Tensor::filled(&[3, 4], 0.1));
        let k = tape.constant(Tensor::filled(&[5, 4], 0.2));
        q.attention(k, k, 2).unwrap();
        assert_eq!(tape.score_entries(), 15);
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_label() {
        let tape = Tape::<f64>::new();
        let z = tape.param(Tensor::zeros(&[2]));
        assert!(matches!(z.cross_entropy(2), Err(Error::Parameter(_))));
    }
}
