//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] is an append-only list of nodes. Every op evaluates eagerly,
//! stores its output value and whatever it needs for the backward pass, and
//! returns a [`Var`] handle. Because inputs always precede outputs on the
//! tape, walking it backwards is a valid reverse topological order.
//!
//! Binary elementwise ops broadcast only over leading axes: the smaller
//! operand's shape must be a suffix of the larger one's (a `[d]` bias against
//! a `[b, t, d]` activation, say).

use super::kernels::{self, gelu, gelu_grad};
use super::tensor::{numel, Tensor};
use crate::error::{Error, Result};

/// Added to the variance in [`Graph::layer_norm`].
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    /// rhs is repeated over the leading axes of lhs
    Rhs,
    /// lhs is repeated over the leading axes of rhs
    Lhs,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Bcast),
    Sub(Bcast),
    Mul(Bcast),
    Scale(f64),
    MatMul {
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        shared_rhs: bool,
    },
    SwapAxes(usize, usize),
    Reshape,
    Concat {
        axis: usize,
        sizes: Vec<usize>,
    },
    Slice {
        axis: usize,
        start: usize,
    },
    SumAxis {
        axis: usize,
        mean: bool,
    },
    SumAll {
        mean: bool,
    },
    Relu,
    Tanh,
    Gelu,
    Exp,
    Log,
    Softmax,
    LayerNorm {
        inv_std: Vec<f64>,
    },
    Mse,
    CrossEntropy {
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    inputs: Vec<usize>,
    value: Tensor,
    requires_grad: bool,
}

/// Append-only differentiation tape.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    backpropagated: bool,
}

/// `(outer, axis_len, inner)` view of `shape` around `axis`.
fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let inner = numel(&shape[axis + 1..]);
    (outer, shape[axis], inner)
}

fn is_suffix(small: &[usize], big: &[usize]) -> bool {
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
}

/// Sums `g` (shaped like the big operand) down to `small_len` by folding
/// the repeated leading blocks.
fn reduce_to(g: &[f64], small_len: usize) -> Vec<f64> {
    let mut out = vec![0.0; small_len];
    for chunk in g.chunks_exact(small_len) {
        for (o, v) in out.iter_mut().zip(chunk) {
            *o += v;
        }
    }
    out
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` loss with respect to a leaf.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn backpropagated(&self) -> bool {
        self.backpropagated
    }

    fn push(&mut self, op: Op, inputs: Vec<usize>, value: Tensor) -> Var {
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node {
            op,
            inputs,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            inputs: Vec::new(),
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    // ----- elementwise binary -----

    fn broadcast(&self, op: &'static str, a: Var, b: Var) -> Result<(Bcast, Vec<usize>)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            Ok((Bcast::Same, sa.to_vec()))
        } else if is_suffix(sb, sa) {
            Ok((Bcast::Rhs, sa.to_vec()))
        } else if is_suffix(sa, sb) {
            Ok((Bcast::Lhs, sb.to_vec()))
        } else {
            Err(Error::Shape {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            })
        }
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: fn(f64, f64) -> f64) -> Result<(Bcast, Vec<usize>, Vec<f64>)> {
        let (bc, shape) = self.broadcast(name, a, b)?;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let data: Vec<f64> = match bc {
            Bcast::Same => da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect(),
            Bcast::Rhs => da
                .chunks_exact(db.len())
                .flat_map(|c| c.iter().zip(db).map(|(&x, &y)| f(x, y)))
                .collect(),
            Bcast::Lhs => db
                .chunks_exact(da.len())
                .flat_map(|c| da.iter().zip(c).map(|(&x, &y)| f(x, y)))
                .collect(),
        };
        Ok((bc, shape, data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (bc, shape, data) = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(Op::Add(bc), vec![a.0, b.0], Tensor::from_parts(shape, data)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (bc, shape, data) = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(Op::Sub(bc), vec![a.0, b.0], Tensor::from_parts(shape, data)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (bc, shape, data) = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(Op::Mul(bc), vec![a.0, b.0], Tensor::from_parts(shape, data)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|v| v * c);
        self.push(Op::Scale(c), vec![a.0], value)
    }

    // ----- linear algebra -----

    /// Matrix product over the last two axes.
    ///
    /// `a` is `[.., m, k]`; `b` is either a shared `[k, n]` matrix or
    /// `[.., k, n]` with the same leading axes as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let err = || Error::Shape {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(err());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb {
            return Err(err());
        }
        let lead = &sa[..sa.len() - 2];
        let shared_rhs = sb.len() == 2;
        if !shared_rhs && sb[..sb.len() - 2] != *lead {
            return Err(err());
        }
        let batch = numel(lead);
        let mut out = vec![0.0; batch * m * n];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        if shared_rhs {
            kernels::gemm(batch * m, k, n, da, false, db, false, &mut out, false);
        } else {
            for i in 0..batch {
                kernels::gemm(
                    m,
                    k,
                    n,
                    &da[i * m * k..],
                    false,
                    &db[i * k * n..],
                    false,
                    &mut out[i * m * n..],
                    false,
                );
            }
        }
        let mut shape = lead.to_vec();
        shape.extend([m, n]);
        Ok(self.push(
            Op::MatMul {
                batch,
                m,
                k,
                n,
                shared_rhs,
            },
            vec![a.0, b.0],
            Tensor::from_parts(shape, out),
        ))
    }

    /// Exchanges two axes.
    pub fn transpose(&mut self, a: Var, ax0: usize, ax1: usize) -> Result<Var> {
        let shape = self.shape(a);
        if ax0 >= shape.len() || ax1 >= shape.len() {
            return Err(Error::invalid(
                "transpose",
                format!("axes ({ax0}, {ax1}) out of range for shape {shape:?}"),
            ));
        }
        let (s, d) = kernels::swap_axes(self.value(a).data(), shape, ax0, ax1);
        Ok(self.push(Op::SwapAxes(ax0, ax1), vec![a.0], Tensor::from_parts(s, d)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        Ok(self.push(Op::Reshape, vec![a.0], value))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::invalid("concat", format!("axis {axis} out of range for {base:?}")));
        }
        let mut sizes = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: base,
                    rhs: s.to_vec(),
                });
            }
            sizes.push(s[axis]);
        }
        let total: usize = sizes.iter().sum();
        let (outer, _, inner) = split_at_axis(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&p, &len) in parts.iter().zip(&sizes) {
                let d = self.value(p).data();
                data.extend_from_slice(&d[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        Ok(self.push(
            Op::Concat { axis, sizes },
            parts.iter().map(|p| p.0).collect(),
            Tensor::from_parts(shape, data),
        ))
    }

    /// Elements `start..start + len` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::invalid(
                "slice",
                format!("range {start}..{} on axis {axis} of {shape:?}", start + len),
            ));
        }
        let (outer, n, inner) = split_at_axis(&shape, axis);
        let d = self.value(a).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let off = (o * n + start) * inner;
            data.extend_from_slice(&d[off..off + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        Ok(self.push(Op::Slice { axis, start }, vec![a.0], Tensor::from_parts(out_shape, data)))
    }

    // ----- reductions -----

    fn reduce_axis(&mut self, a: Var, axis: usize, mean: bool) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::invalid("sum", format!("axis {axis} out of range for {shape:?}")));
        }
        let (outer, n, inner) = split_at_axis(&shape, axis);
        let d = self.value(a).data();
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let row = &d[(o * n + j) * inner..(o * n + j + 1) * inner];
                for (acc, v) in data[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        if mean {
            data.iter_mut().for_each(|v| *v /= n as f64);
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        Ok(self.push(Op::SumAxis { axis, mean }, vec![a.0], Tensor::from_parts(out_shape, data)))
    }

    /// Sum over `axis`, removing it.
    pub fn sum(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(a, axis, false)
    }

    /// Mean over `axis`, removing it.
    pub fn mean(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(a, axis, true)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Op::SumAll { mean: false }, vec![a.0], Tensor::scalar(s))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.sum() / t.len() as f64;
        self.push(Op::SumAll { mean: true }, vec![a.0], Tensor::scalar(s))
    }

    // ----- unary -----

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(Op::Relu, vec![a.0], v)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        self.push(Op::Tanh, vec![a.0], v)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(gelu);
        self.push(Op::Gelu, vec![a.0], v)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        self.push(Op::Exp, vec![a.0], v)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::ln);
        self.push(Op::Log, vec![a.0], v)
    }

    /// Softmax over the last axis (max-subtracted).
    pub fn softmax(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let c = *t.shape().last().unwrap_or(&1);
        let mut out = t.data().to_vec();
        for row in out.chunks_exact_mut(c) {
            softmax_in_place(row);
        }
        let shape = t.shape().to_vec();
        self.push(Op::Softmax, vec![a.0], Tensor::from_parts(shape, out))
    }

    /// Normalizes the last axis to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let c = *t.shape().last().unwrap_or(&1);
        let mut out = t.data().to_vec();
        let mut inv_std = Vec::with_capacity(out.len() / c);
        for row in out.chunks_exact_mut(c) {
            let mu = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            row.iter_mut().for_each(|x| *x = (*x - mu) * is);
            inv_std.push(is);
        }
        let shape = t.shape().to_vec();
        self.push(Op::LayerNorm { inv_std }, vec![a.0], Tensor::from_parts(shape, out))
    }

    // ----- losses -----

    /// Mean squared error over all elements.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (p, t) = (self.value(pred), self.value(target));
        if p.shape() != t.shape() {
            return Err(Error::Shape {
                op: "mse",
                lhs: p.shape().to_vec(),
                rhs: t.shape().to_vec(),
            });
        }
        let n = p.len() as f64;
        let l = p.data().iter().zip(t.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n;
        Ok(self.push(Op::Mse, vec![pred.0, target.0], Tensor::scalar(l)))
    }

    /// Mean over rows of `-log softmax(logits)[target]`; one target per row
    /// of the last axis.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let c = *t.shape().last().unwrap_or(&1);
        let rows = t.len() / c;
        if targets.len() != rows {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: t.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&y| y >= c) {
            return Err(Error::invalid("cross_entropy", format!("target {bad} >= {c} classes")));
        }
        let mut probs = t.data().to_vec();
        let mut loss = 0.0;
        for (row, &y) in probs.chunks_exact_mut(c).zip(targets) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[y];
            row.iter_mut().for_each(|v| *v = (*v - lse).exp());
        }
        loss /= rows as f64;
        Ok(self.push(
            Op::CrossEntropy {
                targets: targets.to_vec(),
                probs,
            },
            vec![logits.0],
            Tensor::scalar(loss),
        ))
    }

    // ----- backward -----

    /// Fills leaf gradients with d`loss`/d`leaf`.
    ///
    /// A graph can be differentiated once; a second call is rejected.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backpropagated {
            return Err(Error::AlreadyBackpropagated);
        }
        let lv = &self.nodes[loss.0].value;
        if !lv.is_scalar() {
            return Err(Error::NotScalar(lv.shape().to_vec()));
        }
        self.backpropagated = true;
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::ones(lv.shape()));
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
                continue;
            }
            for (slot, gi) in self.input_grads(id, &g) {
                if let Some(gi) = gi {
                    accumulate(&mut grads[slot], gi);
                }
            }
        }
        // only leaves keep their gradients
        self.grads = grads;
        Ok(())
    }

    /// Gradient contributions of node `id` to each of its inputs.
    fn input_grads(&self, id: usize, g: &Tensor) -> Vec<(usize, Option<Tensor>)> {
        let node = &self.nodes[id];
        let ins = &node.inputs;
        let needs = |i: usize| self.nodes[ins[i]].requires_grad;
        let inp = |i: usize| &self.nodes[ins[i]].value;
        let gd = g.data();
        let mut out = Vec::with_capacity(ins.len());
        match &node.op {
            Op::Leaf => {}
            Op::Add(bc) | Op::Sub(bc) => {
                let sign = if matches!(node.op, Op::Sub(_)) { -1.0 } else { 1.0 };
                for (i, s) in [(0usize, 1.0), (1, sign)] {
                    if !needs(i) {
                        out.push((ins[i], None));
                        continue;
                    }
                    let small = (i == 0 && *bc == Bcast::Lhs) || (i == 1 && *bc == Bcast::Rhs);
                    let mut d = if small { reduce_to(gd, inp(i).len()) } else { gd.to_vec() };
                    if s != 1.0 {
                        d.iter_mut().for_each(|v| *v *= s);
                    }
                    out.push((ins[i], Some(Tensor::from_parts(inp(i).shape().to_vec(), d))));
                }
            }
            Op::Mul(bc) => {
                let (a, b) = (inp(0), inp(1));
                for i in 0..2 {
                    if !needs(i) {
                        out.push((ins[i], None));
                        continue;
                    }
                    let other = if i == 0 { b.data() } else { a.data() };
                    // g * other, with `other` repeated if it is the small operand
                    let prod: Vec<f64> = if other.len() == gd.len() {
                        gd.iter().zip(other).map(|(x, y)| x * y).collect()
                    } else {
                        gd.chunks_exact(other.len())
                            .flat_map(|c| c.iter().zip(other).map(|(x, y)| x * y))
                            .collect()
                    };
                    let small = (i == 0 && *bc == Bcast::Lhs) || (i == 1 && *bc == Bcast::Rhs);
                    let d = if small { reduce_to(&prod, inp(i).len()) } else { prod };
                    out.push((ins[i], Some(Tensor::from_parts(inp(i).shape().to_vec(), d))));
                }
            }
            Op::Scale(c) => {
                out.push((ins[0], Some(g.map(|v| v * c))));
            }
            Op::MatMul {
                batch,
                m,
                k,
                n,
                shared_rhs,
            } => {
                let (batch, m, k, n) = (*batch, *m, *k, *n);
                let (a, b) = (inp(0), inp(1));
                if needs(0) {
                    let mut da = vec![0.0; batch * m * k];
                    if *shared_rhs {
                        kernels::gemm(batch * m, n, k, gd, false, b.data(), true, &mut da, false);
                    } else {
                        for i in 0..batch {
                            kernels::gemm(
                                m,
                                n,
                                k,
                                &gd[i * m * n..],
                                false,
                                &b.data()[i * k * n..],
                                true,
                                &mut da[i * m * k..],
                                false,
                            );
                        }
                    }
                    out.push((ins[0], Some(Tensor::from_parts(a.shape().to_vec(), da))));
                } else {
                    out.push((ins[0], None));
                }
                if needs(1) {
                    let mut db = vec![0.0; b.len()];
                    if *shared_rhs {
                        kernels::gemm(k, batch * m, n, a.data(), true, gd, false, &mut db, false);
                    } else {
                        for i in 0..batch {
                            kernels::gemm(
                                k,
                                m,
                                n,
                                &a.data()[i * m * k..],
                                true,
                                &gd[i * m * n..],
                                false,
                                &mut db[i * k * n..],
                                false,
                            );
                        }
                    }
                    out.push((ins[1], Some(Tensor::from_parts(b.shape().to_vec(), db))));
                } else {
                    out.push((ins[1], None));
                }
            }
            Op::SwapAxes(a0, a1) => {
                let (s, d) = kernels::swap_axes(gd, g.shape(), *a0, *a1);
                out.push((ins[0], Some(Tensor::from_parts(s, d))));
            }
            Op::Reshape => {
                out.push((ins[0], Some(Tensor::from_parts(inp(0).shape().to_vec(), gd.to_vec()))));
            }
            Op::Concat { axis, sizes } => {
                let total: usize = sizes.iter().sum();
                let (outer, _, inner) = split_at_axis(g.shape(), *axis);
                let mut offset = 0;
                for (i, &len) in sizes.iter().enumerate() {
                    if needs(i) {
                        let mut d = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let s = (o * total + offset) * inner;
                            d.extend_from_slice(&gd[s..s + len * inner]);
                        }
                        out.push((ins[i], Some(Tensor::from_parts(inp(i).shape().to_vec(), d))));
                    } else {
                        out.push((ins[i], None));
                    }
                    offset += len;
                }
            }
            Op::Slice { axis, start } => {
                let src = inp(0);
                let (outer, n, inner) = split_at_axis(src.shape(), *axis);
                let len = g.shape()[*axis];
                let mut d = vec![0.0; src.len()];
                for o in 0..outer {
                    let dst = (o * n + start) * inner;
                    d[dst..dst + len * inner].copy_from_slice(&gd[o * len * inner..(o + 1) * len * inner]);
                }
                out.push((ins[0], Some(Tensor::from_parts(src.shape().to_vec(), d))));
            }
            Op::SumAxis { axis, mean } => {
                let src = inp(0);
                let (outer, n, inner) = split_at_axis(src.shape(), *axis);
                let w = if *mean { 1.0 / n as f64 } else { 1.0 };
                let mut d = Vec::with_capacity(src.len());
                for o in 0..outer {
                    let row = &gd[o * inner..(o + 1) * inner];
                    for _ in 0..n {
                        d.extend(row.iter().map(|v| v * w));
                    }
                }
                out.push((ins[0], Some(Tensor::from_parts(src.shape().to_vec(), d))));
            }
            Op::SumAll { mean } => {
                let src = inp(0);
                let w = if *mean { gd[0] / src.len() as f64 } else { gd[0] };
                out.push((ins[0], Some(Tensor::full(src.shape(), w))));
            }
            Op::Relu => {
                let x = inp(0).data();
                let d = gd.iter().zip(x).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect();
                out.push((ins[0], Some(Tensor::from_parts(g.shape().to_vec(), d))));
            }
            Op::Tanh => {
                let y = node.value.data();
                let d = gd.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect();
                out.push((ins[0], Some(Tensor::from_parts(g.shape().to_vec(), d))));
            }
            Op::Gelu => {
                let x = inp(0).data();
                let d = gd.iter().zip(x).map(|(g, &x)| g * gelu_grad(x)).collect();
                out.push((ins[0], Some(Tensor::from_parts(g.shape().to_vec(), d))));
            }
            Op::Exp => {
                let y = node.value.data();
                let d = gd.iter().zip(y).map(|(g, y)| g * y).collect();
                out.push((ins[0], Some(Tensor::from_parts(g.shape().to_vec(), d))));
            }
            Op::Log => {
                let x = inp(0).data();
                let d = gd.iter().zip(x).map(|(g, x)| g / x).collect();
                out.push((ins[0], Some(Tensor::from_parts(g.shape().to_vec(), d))));
            }
            Op::Softmax => {
                let y = node.value.data();
                let c = *g.shape().last().unwrap_or(&1);
                let mut d = Vec::with_capacity(y.len());
                for (gr, yr) in gd.chunks_exact(c).zip(y.chunks_exact(c)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    d.extend(gr.iter().zip(yr).map(|(g, y)| y * (g - dot)));
                }
                out.push((ins[0], Some(Tensor::from_parts(g.shape().to_vec(), d))));
            }
            Op::LayerNorm { inv_std } => {
                let y = node.value.data();
                let c = *g.shape().last().unwrap_or(&1);
                let mut d = Vec::with_capacity(y.len());
                for ((gr, yr), is) in gd.chunks_exact(c).zip(y.chunks_exact(c)).zip(inv_std) {
                    let mg = gr.iter().sum::<f64>() / c as f64;
                    let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                    d.extend(gr.iter().zip(yr).map(|(g, y)| is * (g - mg - y * mgy)));
                }
                out.push((ins[0], Some(Tensor::from_parts(g.shape().to_vec(), d))));
            }
            Op::Mse => {
                let (p, t) = (inp(0), inp(1));
                let w = 2.0 * gd[0] / p.len() as f64;
                let diff: Vec<f64> = p.data().iter().zip(t.data()).map(|(a, b)| w * (a - b)).collect();
                if needs(1) {
                    let neg = diff.iter().map(|v| -v).collect();
                    out.push((ins[1], Some(Tensor::from_parts(t.shape().to_vec(), neg))));
                }
                out.push((ins[0], Some(Tensor::from_parts(p.shape().to_vec(), diff))));
            }
            Op::CrossEntropy { targets, probs } => {
                let src = inp(0);
                let c = *src.shape().last().unwrap_or(&1);
                let w = gd[0] / targets.len() as f64;
                let mut d: Vec<f64> = probs.iter().map(|p| p * w).collect();
                for (row, &y) in d.chunks_exact_mut(c).zip(targets) {
                    row[y] -= w;
                }
                out.push((ins[0], Some(Tensor::from_parts(src.shape().to_vec(), d))));
            }
        }
        out
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        None => *slot = Some(g),
    }
}

/// Numerically stable softmax of one row.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        z += *v;
    }
    row.iter_mut().for_each(|v| *v /= z);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn identity_matmul_returns_operand() {
        let mut g = Graph::new();
        let i3 = g.constant(Tensor::eye(3));
        let a = g.constant(t(&[3, 2], &[1.0, -2.0, 3.5, 4.0, 0.0, 6.0]));
        let out = g.matmul(i3, a).unwrap();
        assert_eq!(g.value(out), g.value(a));
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros(&[3]));
        let s = g.softmax(z);
        for &v in g.value(s).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn layer_norm_of_constant_row_is_zero() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::full(&[2, 5], 4.2));
        let y = g.layer_norm(c);
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn square_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().item(), 6.0);
    }

    #[test]
    fn sum_of_matmul_gradient_is_ones_times_bt() {
        let mut g = Graph::new();
        let a = g.param(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let b = g.constant(t(&[3, 2], &[0.5, -1.0, 2.0, 0.0, 1.0, 3.0]));
        let c = g.matmul(a, b).unwrap();
        let l = g.sum_all(c);
        g.backward(l).unwrap();
        // ones(2x2) · Bᵀ: every row equals the row sums of B
        let expected = [-0.5, 2.0, 4.0, -0.5, 2.0, 4.0];
        assert_eq!(g.grad(a).unwrap().data(), &expected);
    }

    #[test]
    fn second_backward_is_rejected() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(1.0));
        let y = g.scale(x, 2.0);
        g.backward(y).unwrap();
        assert!(matches!(g.backward(y), Err(Error::AlreadyBackpropagated)));
        assert_eq!(g.grad(x).unwrap().item(), 2.0);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(&[2]));
        assert!(matches!(g.backward(x), Err(Error::NotScalar(_))));
    }

    #[test]
    fn shape_errors_name_op_and_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let msg = g.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("matmul") && msg.contains("[2, 3]"), "{msg}");
        let c = g.constant(Tensor::zeros(&[4]));
        let msg = g.add(a, c).unwrap_err().to_string();
        assert!(msg.starts_with("add"), "{msg}");
    }

    #[test]
    fn broadcast_add_over_leading_axes() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(&[2, 2, 3]));
        let b = g.param(t(&[3], &[1.0, 2.0, 3.0]));
        let y = g.add(x, b).unwrap();
        assert_eq!(&g.value(y).data()[9..], &[1.0, 2.0, 3.0]);
        let l = g.sum_all(y);
        g.backward(l).unwrap();
        assert_eq!(g.grad(b).unwrap().data(), &[4.0, 4.0, 4.0]);
    }

    #[test]
    fn cross_entropy_is_nonnegative_and_softmax_rows_sum_to_one() {
        let mut g = Graph::new();
        let logits = g.constant(t(&[2, 3], &[10.0, -3.0, 0.5, 700.0, 700.0, -700.0]));
        let s = g.softmax(logits);
        for row in g.value(s).data().chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
        let ce = g.cross_entropy(logits, &[0, 2]).unwrap();
        assert!(g.value(ce).item() >= 0.0 && g.value(ce).all_finite());
        assert!(g.cross_entropy(logits, &[0, 3]).is_err());
    }
}
