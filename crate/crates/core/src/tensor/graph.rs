//! Tape-based reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the tape is already a
//! topological order and `backward` walks it once in reverse.

use std::collections::{HashMap, HashSet};

use super::array::{numel, Tensor};
use super::params::{ParamId, ParamStore};
use crate::error::{ensure, Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Narrow { x: Var, axis: usize, start: usize },
    Softmax(Var),
    LayerNorm(Var, f64),
    Silu(Var),
    SumAll(Var),
    MeanAll(Var),
    Embedding { table: Var, indices: Vec<usize> },
    Conv1d { x: Var, w: Var, bias: Option<Var>, stride: usize, padding: usize },
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<f64> },
    Rope { x: Var, positions: Vec<f64>, heads: usize, base: f64 },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A single forward computation and its backward tape.
///
/// A graph is confined to the thread that builds it; independent graphs can
/// run on different threads.
pub struct Graph {
    nodes: Vec<Node>,
    grad_enabled: bool,
    check_finite: bool,
    trainable: Option<HashSet<ParamId>>,
    params: HashMap<ParamId, Var>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
            check_finite: true,
            trainable: None,
            params: HashMap::new(),
        }
    }

    /// Forward-only graph: values are identical, nothing is recorded for backward.
    pub fn no_grad() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    /// Only parameters in `ids` will receive gradients.
    pub fn with_trainable(ids: impl IntoIterator<Item = ParamId>) -> Self {
        Self {
            trainable: Some(ids.into_iter().collect()),
            ..Self::new()
        }
    }

    /// Toggle the per-op NaN/inf check (on by default).
    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
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

    /// Input that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_leaf(t, false)
    }

    /// Input that receives a gradient (when grads are enabled).
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rg = self.grad_enabled;
        self.push_leaf(t, rg)
    }

    /// Bind a stored parameter, creating its leaf on first use.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let rg = self.grad_enabled && self.trainable.as_ref().is_none_or(|s| s.contains(&id));
        let v = self.push_leaf(store.value(id).clone(), rg);
        self.params.insert(id, v);
        v
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &str, value: Tensor, op: Op, parents: &[Var]) -> Result<Var> {
        if self.check_finite && !value.is_finite() {
            return Err(Error::NonFinite(format!("{name} produced a non-finite value")));
        }
        let requires_grad = self.grad_enabled && parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op: if requires_grad { op } else { Op::Leaf },
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    // ---------------------------------------------------------------- elementwise

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.broadcast_binary(a, b, |x, y| x + y)?;
        self.push("add", out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.broadcast_binary(a, b, |x, y| x - y)?;
        self.push("sub", out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.broadcast_binary(a, b, |x, y| x * y)?;
        self.push("mul", out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x * c);
        self.push("scale", out, Op::Scale(a, c), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x + c);
        self.push("add_scalar", out, Op::AddScalar(a), &[a])
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x * sigmoid(x));
        self.push("silu", out, Op::Silu(a), &[a])
    }

    fn broadcast_binary(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() {
            return ta.zip_map(tb, f);
        }
        let shape = broadcast_shape(ta.shape(), tb.shape())?;
        let sa = broadcast_strides(ta.shape(), &shape);
        let sb = broadcast_strides(tb.shape(), &shape);
        let mut data = vec![0.0; numel(&shape)];
        let (da, db) = (ta.data(), tb.data());
        for_each_broadcast(&shape, &sa, &sb, |i, oa, ob| data[i] = f(da[oa], db[ob]));
        Tensor::new(&shape, data)
    }

    // ---------------------------------------------------------------- reductions

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum());
        self.push("sum", out, Op::SumAll(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let out = Tensor::scalar(t.sum() / t.numel() as f64);
        self.push("mean", out, Op::MeanAll(a), &[a])
    }

    // ---------------------------------------------------------------- shape ops

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        self.push("reshape", out, Op::Reshape(a), &[a])
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let out = permute_tensor(self.value(a), axes)?;
        self.push("permute", out, Op::Permute(a, axes.to_vec()), &[a])
    }

    /// Swap the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let r = self.shape(a).len();
        ensure!(r >= 2, Shape, "transpose needs rank >= 2, got {:?}", self.shape(a));
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(a, &axes)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        ensure!(!parts.is_empty(), Shape, "concat of zero tensors");
        let first = self.shape(parts[0]).to_vec();
        ensure!(axis < first.len(), Shape, "concat axis {axis} out of range for {:?}", first);
        let mut out_shape = first.clone();
        out_shape[axis] = 0;
        for &p in parts {
            let s = self.shape(p);
            let same_rank = s.len() == first.len();
            let compatible = same_rank && s.iter().zip(&first).enumerate().all(|(d, (x, y))| d == axis || x == y);
            ensure!(compatible, Shape, "concat shapes {:?} and {:?} differ off axis {axis}", first, s);
            out_shape[axis] += s[axis];
        }
        let outer = numel(&first[..axis]);
        let mut data = Vec::with_capacity(numel(&out_shape));
        for o in 0..outer {
            for &p in parts {
                let t = self.value(p);
                let chunk = numel(&t.shape()[axis..]);
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let out = Tensor::new(&out_shape, data)?;
        self.push("concat", out, Op::Concat(parts.to_vec(), axis), parts)
    }

    /// Entries `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        ensure!(axis < shape.len(), Shape, "narrow axis {axis} out of range for {:?}", shape);
        ensure!(
            start + len <= shape[axis],
            Shape,
            "narrow {}..{} exceeds axis {axis} of {:?}",
            start,
            start + len,
            shape
        );
        let outer = numel(&shape[..axis]);
        let inner = numel(&shape[axis + 1..]);
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let out = Tensor::new(&out_shape, data)?;
        self.push("narrow", out, Op::Narrow { x: a, axis, start }, &[a])
    }

    // ---------------------------------------------------------------- linear algebra

    /// `[.., m, k] × [k, n]` (shared right operand) or `[.., m, k] × [.., k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        ensure!(
            sa.len() >= 2 && sb.len() >= 2,
            Shape,
            "matmul needs rank >= 2 operands, got {:?} and {:?}",
            sa,
            sb
        );
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        ensure!(k == k2, Shape, "matmul inner dims differ: {:?} × {:?}", sa, sb);
        let mut out_shape = sa[..sa.len() - 1].to_vec();
        out_shape.push(n);
        let mut out = vec![0.0; numel(&out_shape)];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        if sb.len() == 2 {
            let rows = numel(&sa[..sa.len() - 1]);
            gemm(rows, k, n, da, (k, 1), db, (n, 1), &mut out, (n, 1), 0.0);
        } else {
            ensure!(
                sa[..sa.len() - 2] == sb[..sb.len() - 2],
                Shape,
                "matmul batch dims differ: {:?} × {:?}",
                sa,
                sb
            );
            let batch = numel(&sa[..sa.len() - 2]);
            for i in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    &da[i * m * k..],
                    (k, 1),
                    &db[i * k * n..],
                    (n, 1),
                    &mut out[i * m * n..],
                    (n, 1),
                    0.0,
                );
            }
        }
        let out = Tensor::new(&out_shape, out)?;
        self.push("matmul", out, Op::MatMul(a, b), &[a, b])
    }

    // ---------------------------------------------------------------- normalisation

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let d = last_dim(t.shape())?;
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(d) {
            softmax_in_place(row);
        }
        let out = Tensor::new(t.shape(), out)?;
        self.push("softmax", out, Op::Softmax(a), &[a])
    }

    /// Zero-mean, unit-variance normalisation over the last axis (no affine).
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Result<Var> {
        let t = self.value(a);
        let d = last_dim(t.shape())?;
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(d) {
            let (mean, inv) = moments(row, eps);
            row.iter_mut().for_each(|x| *x = (*x - mean) * inv);
        }
        let out = Tensor::new(t.shape(), out)?;
        self.push("layer_norm", out, Op::LayerNorm(a, eps), &[a])
    }

    // ---------------------------------------------------------------- lookup / conv / attention

    /// Rows of `table` (`[V, D]`) at `indices`, giving `[indices.len(), D]`.
    pub fn embedding(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(table);
        ensure!(t.rank() == 2, Shape, "embedding table must be 2-D, got {:?}", t.shape());
        let (rows, d) = (t.shape()[0], t.shape()[1]);
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            ensure!(i < rows, InvalidInput, "embedding index {i} out of range for {rows} rows");
            data.extend_from_slice(&t.data()[i * d..(i + 1) * d]);
        }
        let out = Tensor::new(&[indices.len(), d], data)?;
        self.push(
            "embedding",
            out,
            Op::Embedding {
                table,
                indices: indices.to_vec(),
            },
            &[table],
        )
    }

    /// Cross-correlation of `x: [B, C_in, T]` with `w: [C_out, C_in, K]`.
    pub fn conv1d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        ensure!(sx.len() == 3 && sw.len() == 3, Shape, "conv1d expects [B,C,T] and [O,C,K], got {:?} and {:?}", sx, sw);
        let geom = ConvGeom::new(&sx, &sw, stride, padding)?;
        if let Some(b) = bias {
            ensure!(self.shape(b) == [geom.c_out], Shape, "conv bias {:?} does not match {} channels", self.shape(b), geom.c_out);
        }
        let mut out = vec![0.0; geom.batch * geom.c_out * geom.t_out];
        let mut cols = vec![0.0; geom.c_in * geom.k * geom.t_out];
        let (dx, dw) = (self.value(x).data(), self.value(w).data());
        for bi in 0..geom.batch {
            geom.im2col(&dx[bi * geom.c_in * geom.t_in..], &mut cols);
            let dst = &mut out[bi * geom.c_out * geom.t_out..];
            gemm(geom.c_out, geom.c_in * geom.k, geom.t_out, dw, (geom.c_in * geom.k, 1), &cols, (geom.t_out, 1), dst, (geom.t_out, 1), 0.0);
            if let Some(b) = bias {
                let db = self.value(b).data();
                for (o, row) in dst.chunks_mut(geom.t_out).take(geom.c_out).enumerate() {
                    row.iter_mut().for_each(|v| *v += db[o]);
                }
            }
        }
        let out = Tensor::new(&[geom.batch, geom.c_out, geom.t_out], out)?;
        let mut parents = vec![x, w];
        parents.extend(bias);
        self.push("conv1d", out, Op::Conv1d { x, w, bias, stride, padding }, &parents)
    }

    /// Multi-head scaled dot-product attention, `[B,Tq,D] × [B,Tk,D] → [B,Tq,D]`.
    /// Full (non-causal); heads split `D` evenly.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (sq, sk, sv) = (self.shape(q).to_vec(), self.shape(k).to_vec(), self.shape(v).to_vec());
        ensure!(sq.len() == 3 && sk.len() == 3 && sv.len() == 3, Shape, "attention expects rank-3 inputs, got {:?} {:?} {:?}", sq, sk, sv);
        ensure!(sk == sv, Shape, "keys {:?} and values {:?} differ", sk, sv);
        ensure!(sq[0] == sk[0] && sq[2] == sk[2], Shape, "queries {:?} incompatible with keys {:?}", sq, sk);
        let (b, tq, d) = (sq[0], sq[1], sq[2]);
        let tk = sk[1];
        ensure!(heads >= 1 && d % heads == 0, Shape, "width {d} not divisible by {heads} heads");
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (dq, dk, dv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![0.0; b * heads * tq * tk];
        let mut out = vec![0.0; b * tq * d];
        for bi in 0..b {
            for h in 0..heads {
                let qo = bi * tq * d + h * dh;
                let ko = bi * tk * d + h * dh;
                let p = &mut probs[(bi * heads + h) * tq * tk..][..tq * tk];
                gemm_scaled(tq, dh, tk, scale, &dq[qo..], (d, 1), &dk[ko..], (1, d), p, (tk, 1), 0.0);
                p.chunks_mut(tk).for_each(softmax_in_place);
                gemm(tq, tk, dh, p, (tk, 1), &dv[ko..], (d, 1), &mut out[qo..], (d, 1), 0.0);
            }
        }
        let out = Tensor::new(&[b, tq, d], out)?;
        self.push("attention", out, Op::Attention { q, k, v, heads, probs }, &[q, k, v])
    }

    /// Rotary position embedding on `[.., T, D]`: within each head, channel
    /// pairs `(2i, 2i+1)` are rotated by `position · base^(-2i/d_head)`.
    pub fn rope(&mut self, x: Var, positions: &[f64], heads: usize, base: f64) -> Result<Var> {
        let s = self.shape(x).to_vec();
        ensure!(s.len() >= 2, Shape, "rope expects [.., T, D], got {:?}", s);
        let (t, d) = (s[s.len() - 2], s[s.len() - 1]);
        ensure!(positions.len() == t, Shape, "{} positions for {t} time steps", positions.len());
        ensure!(heads >= 1 && d % heads == 0 && (d / heads).is_multiple_of(2), Shape, "rope needs an even head width, got D={d} heads={heads}");
        let mut out = self.value(x).data().to_vec();
        rotate(&mut out, positions, t, d, heads, base, 1.0);
        let out = Tensor::new(&s, out)?;
        self.push("rope", out, Op::Rope { x, positions: positions.to_vec(), heads, base }, &[x])
    }

    // ---------------------------------------------------------------- backward

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        ensure!(
            self.value(loss).numel() == 1,
            InvalidArgument,
            "backward needs a scalar loss, got shape {:?}",
            self.shape(loss)
        );
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads)?;
        }
        Ok(Gradients {
            grads,
            params: self.params.clone(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], p: Var, contrib: Tensor) {
        if !self.nodes[p.0].requires_grad {
            return;
        }
        match &mut grads[p.0] {
            Some(existing) => existing.add_assign(&contrib),
            slot @ None => *slot = Some(contrib),
        }
    }

    fn backward_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                let ga = reduce_to(g, self.shape(*a))?;
                let gb = reduce_to(g, self.shape(*b))?.map(|v| sign * v);
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let out = g.shape();
                let sa = broadcast_strides(ta.shape(), out);
                let sb = broadcast_strides(tb.shape(), out);
                let mut ga = vec![0.0; ta.numel()];
                let mut gb = vec![0.0; tb.numel()];
                let (da, db, dg) = (ta.data(), tb.data(), g.data());
                for_each_broadcast(out, &sa, &sb, |i, oa, ob| {
                    ga[oa] += dg[i] * db[ob];
                    gb[ob] += dg[i] * da[oa];
                });
                self.accumulate(grads, *a, Tensor::new(ta.shape(), ga)?);
                self.accumulate(grads, *b, Tensor::new(tb.shape(), gb)?);
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, g.map(|v| v * c)),
            Op::AddScalar(a) | Op::Reshape(a) => {
                let shaped = g.clone().reshape(self.shape(*a))?;
                self.accumulate(grads, *a, shaped);
            }
            Op::Silu(a) => {
                let ga = self.value(*a).zip_map(g, |x, gy| {
                    let s = sigmoid(x);
                    gy * s * (1.0 + x * (1.0 - s))
                })?;
                self.accumulate(grads, *a, ga);
            }
            Op::SumAll(a) => {
                let ga = Tensor::full(self.shape(*a), g.item());
                self.accumulate(grads, *a, ga);
            }
            Op::MeanAll(a) => {
                let n = self.value(*a).numel() as f64;
                let ga = Tensor::full(self.shape(*a), g.item() / n);
                self.accumulate(grads, *a, ga);
            }
            Op::Permute(a, axes) => {
                let mut inverse = vec![0; axes.len()];
                for (i, &ax) in axes.iter().enumerate() {
                    inverse[ax] = i;
                }
                self.accumulate(grads, *a, permute_tensor(g, &inverse)?);
            }
            Op::Concat(parts, axis) => {
                let outer = numel(&g.shape()[..*axis]);
                let total = numel(&g.shape()[*axis..]);
                let mut offset = 0;
                for &p in parts {
                    let chunk = numel(&self.shape(p)[*axis..]);
                    let mut data = Vec::with_capacity(outer * chunk);
                    for o in 0..outer {
                        data.extend_from_slice(&g.data()[o * total + offset..o * total + offset + chunk]);
                    }
                    offset += chunk;
                    self.accumulate(grads, p, Tensor::new(self.shape(p), data)?);
                }
            }
            Op::Narrow { x, axis, start } => {
                let shape = self.shape(*x);
                let outer = numel(&shape[..*axis]);
                let inner = numel(&shape[axis + 1..]);
                let len = g.shape()[*axis];
                let mut data = vec![0.0; numel(shape)];
                for o in 0..outer {
                    let dst = (o * shape[*axis] + start) * inner;
                    let src = o * len * inner;
                    data[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
                }
                self.accumulate(grads, *x, Tensor::new(shape, data)?);
            }
            Op::MatMul(a, b) => self.backward_matmul(*a, *b, g, grads)?,
            Op::Softmax(a) => {
                let y = &node.value;
                let d = last_dim(y.shape())?;
                let mut ga = vec![0.0; y.numel()];
                for ((gr, yr), dr) in ga.chunks_mut(d).zip(y.data().chunks(d)).zip(g.data().chunks(d)) {
                    let dot: f64 = yr.iter().zip(dr).map(|(p, q)| p * q).sum();
                    for j in 0..d {
                        gr[j] = yr[j] * (dr[j] - dot);
                    }
                }
                self.accumulate(grads, *a, Tensor::new(y.shape(), ga)?);
            }
            Op::LayerNorm(a, eps) => {
                let x = self.value(*a);
                let d = last_dim(x.shape())?;
                let mut ga = vec![0.0; x.numel()];
                for ((gr, xr), dr) in ga.chunks_mut(d).zip(x.data().chunks(d)).zip(g.data().chunks(d)) {
                    let (mean, inv) = moments(xr, *eps);
                    let xhat: Vec<f64> = xr.iter().map(|v| (v - mean) * inv).collect();
                    let mean_g = dr.iter().sum::<f64>() / d as f64;
                    let mean_gx = dr.iter().zip(&xhat).map(|(p, q)| p * q).sum::<f64>() / d as f64;
                    for j in 0..d {
                        gr[j] = inv * (dr[j] - mean_g - xhat[j] * mean_gx);
                    }
                }
                self.accumulate(grads, *a, Tensor::new(x.shape(), ga)?);
            }
            Op::Embedding { table, indices } => {
                let t = self.value(*table);
                let d = t.shape()[1];
                let mut gt = vec![0.0; t.numel()];
                for (r, &i) in indices.iter().enumerate() {
                    for j in 0..d {
                        gt[i * d + j] += g.data()[r * d + j];
                    }
                }
                self.accumulate(grads, *table, Tensor::new(t.shape(), gt)?);
            }
            Op::Conv1d { x, w, bias, stride, padding } => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let geom = ConvGeom::new(tx.shape(), tw.shape(), *stride, *padding)?;
                let ck = geom.c_in * geom.k;
                let mut gx = vec![0.0; tx.numel()];
                let mut gw = vec![0.0; tw.numel()];
                let mut gb = vec![0.0; geom.c_out];
                let mut cols = vec![0.0; ck * geom.t_out];
                let mut gcols = vec![0.0; ck * geom.t_out];
                for bi in 0..geom.batch {
                    let go = &g.data()[bi * geom.c_out * geom.t_out..][..geom.c_out * geom.t_out];
                    geom.im2col(&tx.data()[bi * geom.c_in * geom.t_in..], &mut cols);
                    // dW += dOut · colsᵀ
                    gemm(geom.c_out, geom.t_out, ck, go, (geom.t_out, 1), &cols, (1, geom.t_out), &mut gw, (ck, 1), 1.0);
                    // dcols = Wᵀ · dOut
                    gemm(ck, geom.c_out, geom.t_out, tw.data(), (1, ck), go, (geom.t_out, 1), &mut gcols, (geom.t_out, 1), 0.0);
                    geom.col2im(&gcols, &mut gx[bi * geom.c_in * geom.t_in..]);
                    for (o, row) in go.chunks(geom.t_out).enumerate() {
                        gb[o] += row.iter().sum::<f64>();
                    }
                }
                self.accumulate(grads, *x, Tensor::new(tx.shape(), gx)?);
                self.accumulate(grads, *w, Tensor::new(tw.shape(), gw)?);
                if let Some(b) = bias {
                    self.accumulate(grads, *b, Tensor::new(&[geom.c_out], gb)?);
                }
            }
            Op::Attention { q, k, v, heads, probs } => {
                self.backward_attention(*q, *k, *v, *heads, probs, g, grads)?;
            }
            Op::Rope { x, positions, heads, base } => {
                let s = g.shape();
                let (t, d) = (s[s.len() - 2], s[s.len() - 1]);
                let mut data = g.data().to_vec();
                rotate(&mut data, positions, t, d, *heads, *base, -1.0);
                self.accumulate(grads, *x, Tensor::new(s, data)?);
            }
        }
        Ok(())
    }

    fn backward_matmul(&self, a: Var, b: Var, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        let k = sa[sa.len() - 1];
        let n = sb[sb.len() - 1];
        let mut ga = vec![0.0; ta.numel()];
        let mut gb = vec![0.0; tb.numel()];
        let dg = g.data();
        if sb.len() == 2 {
            let rows = ta.numel() / k;
            gemm(rows, n, k, dg, (n, 1), tb.data(), (1, n), &mut ga, (k, 1), 0.0);
            gemm(k, rows, n, ta.data(), (1, k), dg, (n, 1), &mut gb, (n, 1), 0.0);
        } else {
            let m = sa[sa.len() - 2];
            let batch = numel(&sa[..sa.len() - 2]);
            for i in 0..batch {
                let (ao, bo, co) = (i * m * k, i * k * n, i * m * n);
                gemm(m, n, k, &dg[co..], (n, 1), &tb.data()[bo..], (1, n), &mut ga[ao..], (k, 1), 0.0);
                gemm(k, m, n, &ta.data()[ao..], (1, k), &dg[co..], (n, 1), &mut gb[bo..], (n, 1), 0.0);
            }
        }
        self.accumulate(grads, a, Tensor::new(sa, ga)?);
        self.accumulate(grads, b, Tensor::new(sb, gb)?);
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn backward_attention(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: &[f64],
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) -> Result<()> {
        let (tq_, tk_, tv_) = (self.value(q), self.value(k), self.value(v));
        let (b, tq, d) = (tq_.shape()[0], tq_.shape()[1], tq_.shape()[2]);
        let tk = tk_.shape()[1];
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut gq = vec![0.0; tq_.numel()];
        let mut gk = vec![0.0; tk_.numel()];
        let mut gv = vec![0.0; tv_.numel()];
        let mut dp = vec![0.0; tq * tk];
        for bi in 0..b {
            for h in 0..heads {
                let qo = bi * tq * d + h * dh;
                let ko = bi * tk * d + h * dh;
                let p = &probs[(bi * heads + h) * tq * tk..][..tq * tk];
                let go = &g.data()[qo..];
                // dV = Pᵀ dO
                gemm(tk, tq, dh, p, (1, tk), go, (d, 1), &mut gv[ko..], (d, 1), 1.0);
                // dP = dO Vᵀ
                gemm(tq, dh, tk, go, (d, 1), &tv_.data()[ko..], (1, d), &mut dp, (tk, 1), 0.0);
                // dS = P ⊙ (dP - rowsum(dP ⊙ P))
                for (pr, dr) in p.chunks(tk).zip(dp.chunks_mut(tk)) {
                    let dot: f64 = pr.iter().zip(dr.iter()).map(|(x, y)| x * y).sum();
                    for j in 0..tk {
                        dr[j] = pr[j] * (dr[j] - dot);
                    }
                }
                gemm_scaled(tq, tk, dh, scale, &dp, (tk, 1), &tk_.data()[ko..], (d, 1), &mut gq[qo..], (d, 1), 1.0);
                gemm_scaled(tk, tq, dh, scale, &dp, (1, tk), &tq_.data()[qo..], (d, 1), &mut gk[ko..], (d, 1), 1.0);
            }
        }
        self.accumulate(grads, q, Tensor::new(tq_.shape(), gq)?);
        self.accumulate(grads, k, Tensor::new(tk_.shape(), gk)?);
        self.accumulate(grads, v, Tensor::new(tv_.shape(), gv)?);
        Ok(())
    }
}

/// Gradients produced by [`Graph::backward`]. Only leaves keep theirs.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: HashMap<ParamId, Var>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id).and_then(|v| self.get(*v))
    }

    /// Parameters that received a gradient, in id order.
    pub fn params(&self) -> Vec<(ParamId, &Tensor)> {
        let mut out: Vec<(ParamId, &Tensor)> = self
            .params
            .iter()
            .filter_map(|(id, v)| self.get(*v).map(|g| (*id, g)))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }
}

// -------------------------------------------------------------------- helpers

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn last_dim(shape: &[usize]) -> Result<usize> {
    shape
        .last()
        .copied()
        .filter(|&d| d > 0)
        .ok_or_else(|| Error::Shape(format!("need a non-empty last axis, got {:?}", shape)))
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

fn moments(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

fn rotate(data: &mut [f64], positions: &[f64], t: usize, d: usize, heads: usize, base: f64, dir: f64) {
    let dh = d / heads;
    let half = dh / 2;
    let freqs: Vec<f64> = (0..half).map(|i| base.powf(-2.0 * i as f64 / dh as f64)).collect();
    for (row_idx, row) in data.chunks_mut(d).enumerate() {
        let pos = positions[row_idx % t];
        for h in 0..heads {
            for (i, f) in freqs.iter().enumerate() {
                let (s, c) = (dir * pos * f).sin_cos();
                let j = h * dh + 2 * i;
                let (x0, x1) = (row[j], row[j + 1]);
                row[j] = x0 * c - x1 * s;
                row[j + 1] = x0 * s + x1 * c;
            }
        }
    }
}

pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let r = a.len().max(b.len());
    let mut out = vec![0; r];
    for i in 0..r {
        let da = if i + a.len() >= r { a[i + a.len() - r] } else { 1 };
        let db = if i + b.len() >= r { b[i + b.len() - r] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::Shape(format!(
                    "shapes {:?} and {:?} do not broadcast",
                    a, b
                )))
            }
        };
    }
    Ok(out)
}

fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let offset = out.len() - shape.len();
    let mut strides = vec![0; out.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[i + offset] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

fn for_each_broadcast(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let n = numel(out);
    let r = out.len();
    let mut idx = vec![0; r];
    let (mut oa, mut ob) = (0usize, 0usize);
    for i in 0..n {
        f(i, oa, ob);
        let mut d = r;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out[d] {
                break;
            }
            oa -= sa[d] * out[d];
            ob -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

/// Sum `g` down to `shape` over broadcast axes.
fn reduce_to(g: &Tensor, shape: &[usize]) -> Result<Tensor> {
    if g.shape() == shape {
        return Ok(g.clone());
    }
    let strides = broadcast_strides(shape, g.shape());
    let zero = vec![0; g.shape().len()];
    let mut data = vec![0.0; numel(shape)];
    let src = g.data();
    for_each_broadcast(g.shape(), &strides, &zero, |i, o, _| data[o] += src[i]);
    Tensor::new(shape, data)
}

fn permute_tensor(t: &Tensor, axes: &[usize]) -> Result<Tensor> {
    let s = t.shape();
    let r = s.len();
    let mut seen = vec![false; r];
    ensure!(axes.len() == r, Shape, "permutation {:?} does not match rank of {:?}", axes, s);
    for &a in axes {
        ensure!(a < r && !seen[a], Shape, "invalid permutation {:?}", axes);
        seen[a] = true;
    }
    let mut in_strides = vec![1; r];
    for i in (0..r.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * s[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| s[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let zero = vec![0; r];
    let mut data = vec![0.0; t.numel()];
    let src = t.data();
    for_each_broadcast(&out_shape, &strides, &zero, |i, o, _| data[i] = src[o]);
    Tensor::new(&out_shape, data)
}

struct ConvGeom {
    batch: usize,
    c_in: usize,
    t_in: usize,
    c_out: usize,
    k: usize,
    t_out: usize,
    stride: usize,
    padding: usize,
}

impl ConvGeom {
    fn new(sx: &[usize], sw: &[usize], stride: usize, padding: usize) -> Result<Self> {
        let (batch, c_in, t_in) = (sx[0], sx[1], sx[2]);
        let (c_out, c_in_w, k) = (sw[0], sw[1], sw[2]);
        ensure!(c_in == c_in_w, Shape, "conv input has {c_in} channels, kernel expects {c_in_w}");
        ensure!(stride >= 1, Shape, "conv stride must be >= 1");
        let span = t_in + 2 * padding;
        ensure!(span >= k, Shape, "kernel {k} longer than padded input {span}");
        ensure!(
            (span - k).is_multiple_of(stride),
            Shape,
            "output length ({t_in} + 2·{padding} - {k}) / {stride} + 1 is not an integer"
        );
        Ok(Self {
            batch,
            c_in,
            t_in,
            c_out,
            k,
            t_out: (span - k) / stride + 1,
            stride,
            padding,
        })
    }

    fn source(&self, t: usize, kk: usize) -> Option<usize> {
        let pos = (t * self.stride + kk) as isize - self.padding as isize;
        (pos >= 0 && (pos as usize) < self.t_in).then_some(pos as usize)
    }

    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        for c in 0..self.c_in {
            for kk in 0..self.k {
                let row = &mut cols[(c * self.k + kk) * self.t_out..][..self.t_out];
                for (t, v) in row.iter_mut().enumerate() {
                    *v = self.source(t, kk).map_or(0.0, |p| x[c * self.t_in + p]);
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], x: &mut [f64]) {
        for c in 0..self.c_in {
            for kk in 0..self.k {
                let row = &cols[(c * self.k + kk) * self.t_out..][..self.t_out];
                for (t, v) in row.iter().enumerate() {
                    if let Some(p) = self.source(t, kk) {
                        x[c * self.t_in + p] += v;
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    (rsc, csc): (usize, usize),
    beta: f64,
) {
    gemm_scaled(m, k, n, 1.0, a, (rsa, csa), b, (rsb, csb), c, (rsc, csc), beta);
}

/// `C = alpha·A·B + beta·C` on strided views.
#[allow(clippy::too_many_arguments)]
fn gemm_scaled(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    (rsc, csc): (usize, usize),
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |r: usize, cc: usize, rs: usize, cs: usize| (r - 1) * rs + (cc - 1) * cs;
    if k > 0 {
        assert!(last(m, k, rsa, csa) < a.len() && last(k, n, rsb, csb) < b.len());
    }
    assert!(last(m, n, rsc, csc) < c.len());
    // SAFETY: the asserts above keep every strided access inside the slices,
    // and `c` is uniquely borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}
