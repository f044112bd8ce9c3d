use std::rc::Rc;

use super::deform::{DeformPlan, deform_backward, deform_forward};
use super::params::{Grads, ParamId, ParamStore};
use super::tensor::{Tensor, matmul_a_bt_acc, matmul_acc, matmul_at_b_acc};
use crate::scalar::{from_usize, lit, Real};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Row-sparse linear map: `out[i] = sum_k w_ik * in[j_ik]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseRows<T> {
    pub in_rows: usize,
    pub entries: Vec<Vec<(usize, T)>>,
}

enum Op<T: Real> {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    AddBias(Var, Var),
    MulBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Sigmoid(Var),
    LayerNorm { x: Var, rstd: Vec<T> },
    SoftmaxGroups(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols { x: Var, start: usize },
    SelectRows { x: Var, rows: Vec<usize> },
    Sparse { x: Var, map: Rc<SparseRows<T>> },
    Deform { value: Var, offsets: Var, weights: Var, plan: Rc<DeformPlan<T>> },
    Sum(Var),
    Mean(Var),
    MseConst { x: Var, target: Tensor<T> },
    L1Const { x: Var, target: Tensor<T> },
    BceLogits { x: Var, target: Tensor<T> },
    Focal { x: Var, target: Tensor<T>, alpha: T, gamma: T },
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Reverse-mode tape. Build a graph per forward pass; call
/// [`Graph::backward`] on a scalar node to get parameter gradients.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    track: bool,
}

impl<T: Real> Graph<T> {
    /// `track = false` builds an inference-only graph: parameters enter as
    /// constants and `backward` yields no gradients.
    pub fn new(track: bool) -> Self {
        Self {
            nodes: Vec::new(),
            track,
        }
    }

    pub fn tracking(&self) -> bool {
        self.track
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = self.track && inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: store.get(id).clone(),
            op: Op::Param(id),
            needs_grad: self.track,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (n, k) = self.shape(a);
        let (k2, m) = self.shape(b);
        assert_eq!(k, k2, "matmul inner dimensions differ");
        let mut out = Tensor::zeros(n, m);
        matmul_acc(self.value(a).data(), self.value(b).data(), out.data_mut(), n, k, m);
        self.push(out, Op::MatMul(a, b), &[a, b])
    }

    /// Adds a `1 x m` row to every row of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let (_, m) = self.shape(x);
        assert_eq!(self.shape(b), (1, m));
        let mut out = self.value(x).clone();
        let bias = self.value(b).data().to_vec();
        for r in out.data_mut().chunks_mut(m) {
            for (v, bv) in r.iter_mut().zip(&bias) {
                *v += *bv;
            }
        }
        self.push(out, Op::AddBias(x, b), &[x, b])
    }

    /// Multiplies every row of `x` elementwise by the `1 x m` row `g`.
    pub fn mul_bias(&mut self, x: Var, g: Var) -> Var {
        let (_, m) = self.shape(x);
        assert_eq!(self.shape(g), (1, m));
        let mut out = self.value(x).clone();
        let gain = self.value(g).data().to_vec();
        for r in out.data_mut().chunks_mut(m) {
            for (v, gv) in r.iter_mut().zip(&gain) {
                *v *= *gv;
            }
        }
        self.push(out, Op::MulBias(x, g), &[x, g])
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        assert_eq!(self.shape(a), self.shape(b), "elementwise shapes differ");
        let (r, c) = self.shape(a);
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        Tensor::from_vec(r, c, data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_with(a, b, |x, y| x + y);
        self.push(out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_with(a, b, |x, y| x - y);
        self.push(out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_with(a, b, |x, y| x * y);
        self.push(out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let mut out = self.value(a).clone();
        out.scale_assign(s);
        self.push(out, Op::Scale(a, s), &[a])
    }

    fn map(&self, a: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let t = self.value(a);
        Tensor::from_vec(t.rows(), t.cols(), t.data().iter().map(|v| f(*v)).collect())
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.map(a, |v| if v > T::zero() { v } else { T::zero() });
        self.push(out, Op::Relu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.map(a, sigmoid);
        self.push(out, Op::Sigmoid(a), &[a])
    }

    /// Per-row standardization without affine terms.
    pub fn layer_norm(&mut self, x: Var, eps: T) -> Var {
        let (n, m) = self.shape(x);
        let mut out = self.value(x).clone();
        let mut rstd = Vec::with_capacity(n);
        let inv_m = T::one() / from_usize(m);
        for r in out.data_mut().chunks_mut(m) {
            let mean = r.iter().copied().sum::<T>() * inv_m;
            let var = r.iter().map(|v| (*v - mean) * (*v - mean)).sum::<T>() * inv_m;
            let s = T::one() / (var + eps).sqrt();
            for v in r.iter_mut() {
                *v = (*v - mean) * s;
            }
            rstd.push(s);
        }
        self.push(out, Op::LayerNorm { x, rstd }, &[x])
    }

    /// Softmax over consecutive column groups of width `group`.
    pub fn softmax_groups(&mut self, x: Var, group: usize) -> Var {
        let (_, m) = self.shape(x);
        assert!(group > 0 && m % group == 0, "softmax group must divide columns");
        let mut out = self.value(x).clone();
        for g in out.data_mut().chunks_mut(group) {
            let mx = g.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for v in g.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            for v in g.iter_mut() {
                *v /= s;
            }
        }
        self.push(out, Op::SoftmaxGroups(x, group), &[x])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let n = self.shape(parts[0]).0;
        let total: usize = parts.iter().map(|p| self.shape(*p).1).sum();
        let mut out = Tensor::zeros(n, total);
        let mut off = 0;
        for p in parts {
            let t = self.value(*p);
            assert_eq!(t.rows(), n, "concat row counts differ");
            let w = t.cols();
            for r in 0..n {
                out.row_mut(r)[off..off + w].copy_from_slice(t.row(r));
            }
            off += w;
        }
        self.push(out, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let m = self.shape(parts[0]).1;
        let mut data = Vec::new();
        let mut n = 0;
        for p in parts {
            let t = self.value(*p);
            assert_eq!(t.cols(), m, "concat column counts differ");
            data.extend_from_slice(t.data());
            n += t.rows();
        }
        self.push(Tensor::from_vec(n, m, data), Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let t = self.value(x);
        assert!(start + len <= t.cols());
        let n = t.rows();
        let mut out = Tensor::zeros(n, len);
        for r in 0..n {
            out.row_mut(r).copy_from_slice(&t.row(r)[start..start + len]);
        }
        self.push(out, Op::SliceCols { x, start }, &[x])
    }

    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Var {
        let t = self.value(x);
        let m = t.cols();
        let mut out = Tensor::zeros(rows.len(), m);
        for (i, r) in rows.iter().enumerate() {
            out.row_mut(i).copy_from_slice(t.row(*r));
        }
        self.push(out, Op::SelectRows { x, rows: rows.to_vec() }, &[x])
    }

    pub fn sparse_rows(&mut self, x: Var, map: Rc<SparseRows<T>>) -> Var {
        let t = self.value(x);
        assert_eq!(t.rows(), map.in_rows);
        let m = t.cols();
        let mut out = Tensor::zeros(map.entries.len(), m);
        for (i, row) in map.entries.iter().enumerate() {
            let o = out.row_mut(i);
            for (j, w) in row {
                for (ov, xv) in o.iter_mut().zip(t.row(*j)) {
                    *ov += *w * *xv;
                }
            }
        }
        self.push(out, Op::Sparse { x, map }, &[x])
    }

    /// Multi-source deformable sampling; see [`DeformPlan`].
    pub fn deform(&mut self, value: Var, offsets: Var, weights: Var, plan: Rc<DeformPlan<T>>) -> Var {
        let out = deform_forward(
            &plan,
            self.value(value),
            self.value(offsets),
            self.value(weights),
        );
        self.push(out, Op::Deform { value, offsets, weights, plan }, &[value, offsets, weights])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().copied().sum::<T>() / from_usize(t.len().max(1));
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Mean squared difference to a constant target.
    pub fn mse_const(&mut self, x: Var, target: Tensor<T>) -> Var {
        let t = self.value(x);
        assert_eq!(t.shape(), target.shape());
        let s = t
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (*a - *b) * (*a - *b))
            .sum::<T>()
            / from_usize(t.len().max(1));
        self.push(Tensor::scalar(s), Op::MseConst { x, target }, &[x])
    }

    /// Summed absolute difference to a constant target.
    pub fn l1_const(&mut self, x: Var, target: Tensor<T>) -> Var {
        let t = self.value(x);
        assert_eq!(t.shape(), target.shape());
        let s = t
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (*a - *b).abs())
            .sum::<T>();
        self.push(Tensor::scalar(s), Op::L1Const { x, target }, &[x])
    }

    /// Mean binary cross-entropy of logits against {0,1} targets.
    pub fn bce_logits(&mut self, x: Var, target: Tensor<T>) -> Var {
        let t = self.value(x);
        assert_eq!(t.shape(), target.shape());
        let s = t
            .data()
            .iter()
            .zip(target.data())
            .map(|(z, y)| bce_term(*z, *y))
            .sum::<T>()
            / from_usize(t.len().max(1));
        self.push(Tensor::scalar(s), Op::BceLogits { x, target }, &[x])
    }

    /// Summed sigmoid focal loss of logits against {0,1} targets.
    pub fn focal(&mut self, x: Var, target: Tensor<T>, alpha: T, gamma: T) -> Var {
        let t = self.value(x);
        assert_eq!(t.shape(), target.shape());
        let s = t
            .data()
            .iter()
            .zip(target.data())
            .map(|(z, y)| focal_term(*z, *y, alpha, gamma).0)
            .sum::<T>();
        self.push(Tensor::scalar(s), Op::Focal { x, target, alpha, gamma }, &[x])
    }

    /// Gradients of the scalar `loss` with respect to every parameter leaf.
    pub fn backward(&self, loss: Var, num_params: usize) -> Grads<T> {
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar loss");
        let mut grads = Grads::empty(num_params);
        if !self.nodes[loss.0].needs_grad {
            return grads;
        }
        let mut adj: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[loss.0] = Some(Tensor::scalar(T::one()));
        for i in (0..=loss.0).rev() {
            let Some(gy) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.backprop_node(node, gy, &mut adj, &mut grads);
        }
        grads
    }

    fn backprop_node(
        &self,
        node: &Node<T>,
        gy: Tensor<T>,
        adj: &mut [Option<Tensor<T>>],
        grads: &mut Grads<T>,
    ) {
        let needs = |v: Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => grads.accumulate(*id, &gy),
            Op::MatMul(a, b) => {
                let (n, k) = self.shape(*a);
                let m = self.shape(*b).1;
                if needs(*a) {
                    let mut ga = Tensor::zeros(n, k);
                    matmul_a_bt_acc(gy.data(), self.value(*b).data(), ga.data_mut(), n, m, k);
                    acc(adj, *a, ga);
                }
                if needs(*b) {
                    let mut gb = Tensor::zeros(k, m);
                    matmul_at_b_acc(self.value(*a).data(), gy.data(), gb.data_mut(), n, k, m);
                    acc(adj, *b, gb);
                }
            }
            Op::AddBias(x, b) => {
                if needs(*b) {
                    acc(adj, *b, col_sum(&gy));
                }
                if needs(*x) {
                    acc(adj, *x, gy);
                }
            }
            Op::MulBias(x, g) => {
                let m = gy.cols();
                if needs(*g) {
                    let xv = self.value(*x);
                    let mut gg = Tensor::zeros(1, m);
                    for (gr, xr) in gy.data().chunks(m).zip(xv.data().chunks(m)) {
                        for ((o, a), b) in gg.data_mut().iter_mut().zip(gr).zip(xr) {
                            *o += *a * *b;
                        }
                    }
                    acc(adj, *g, gg);
                }
                if needs(*x) {
                    let gain = self.value(*g).data();
                    let mut gx = gy;
                    for r in gx.data_mut().chunks_mut(m) {
                        for (v, gv) in r.iter_mut().zip(gain) {
                            *v *= *gv;
                        }
                    }
                    acc(adj, *x, gx);
                }
            }
            Op::Add(a, b) => {
                if needs(*a) {
                    acc(adj, *a, gy.clone());
                }
                if needs(*b) {
                    acc(adj, *b, gy);
                }
            }
            Op::Sub(a, b) => {
                if needs(*a) {
                    acc(adj, *a, gy.clone());
                }
                if needs(*b) {
                    let mut g = gy;
                    g.scale_assign(-T::one());
                    acc(adj, *b, g);
                }
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    acc(adj, *a, hadamard(&gy, self.value(*b)));
                }
                if needs(*b) {
                    acc(adj, *b, hadamard(&gy, self.value(*a)));
                }
            }
            Op::Scale(a, s) => {
                let mut g = gy;
                g.scale_assign(*s);
                acc(adj, *a, g);
            }
            Op::Relu(a) => {
                let mut g = gy;
                for (gv, yv) in g.data_mut().iter_mut().zip(node.value.data()) {
                    if *yv <= T::zero() {
                        *gv = T::zero();
                    }
                }
                acc(adj, *a, g);
            }
            Op::Sigmoid(a) => {
                let mut g = gy;
                for (gv, yv) in g.data_mut().iter_mut().zip(node.value.data()) {
                    *gv *= *yv * (T::one() - *yv);
                }
                acc(adj, *a, g);
            }
            Op::LayerNorm { x, rstd } => {
                let m = gy.cols();
                let inv_m = T::one() / from_usize(m);
                let mut gx = Tensor::zeros(gy.rows(), m);
                for (r, s) in rstd.iter().enumerate() {
                    let g = gy.row(r);
                    let y = node.value.row(r);
                    let mg = g.iter().copied().sum::<T>() * inv_m;
                    let mgy = g.iter().zip(y).map(|(a, b)| *a * *b).sum::<T>() * inv_m;
                    for ((o, gv), yv) in gx.row_mut(r).iter_mut().zip(g).zip(y) {
                        *o = *s * (*gv - mg - *yv * mgy);
                    }
                }
                acc(adj, *x, gx);
            }
            Op::SoftmaxGroups(x, group) => {
                let mut gx = gy;
                for (gg, yg) in gx.data_mut().chunks_mut(*group).zip(node.value.data().chunks(*group)) {
                    let dot = gg.iter().zip(yg).map(|(a, b)| *a * *b).sum::<T>();
                    for (gv, yv) in gg.iter_mut().zip(yg) {
                        *gv = *yv * (*gv - dot);
                    }
                }
                acc(adj, *x, gx);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let (n, w) = self.shape(*p);
                    if needs(*p) {
                        let mut g = Tensor::zeros(n, w);
                        for r in 0..n {
                            g.row_mut(r).copy_from_slice(&gy.row(r)[off..off + w]);
                        }
                        acc(adj, *p, g);
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let (n, m) = self.shape(*p);
                    if needs(*p) {
                        let g = Tensor::from_vec(n, m, gy.data()[off * m..(off + n) * m].to_vec());
                        acc(adj, *p, g);
                    }
                    off += n;
                }
            }
            Op::SliceCols { x, start } => {
                let (n, m) = self.shape(*x);
                let w = gy.cols();
                let mut g = Tensor::zeros(n, m);
                for r in 0..n {
                    g.row_mut(r)[*start..*start + w].copy_from_slice(gy.row(r));
                }
                acc(adj, *x, g);
            }
            Op::SelectRows { x, rows } => {
                let (n, m) = self.shape(*x);
                let mut g = Tensor::zeros(n, m);
                for (i, r) in rows.iter().enumerate() {
                    for (o, v) in g.row_mut(*r).iter_mut().zip(gy.row(i)) {
                        *o += *v;
                    }
                }
                acc(adj, *x, g);
            }
            Op::Sparse { x, map } => {
                let (n, m) = self.shape(*x);
                let mut g = Tensor::zeros(n, m);
                for (i, row) in map.entries.iter().enumerate() {
                    let gi = gy.row(i);
                    for (j, w) in row {
                        for (o, v) in g.row_mut(*j).iter_mut().zip(gi) {
                            *o += *w * *v;
                        }
                    }
                }
                acc(adj, *x, g);
            }
            Op::Deform { value, offsets, weights, plan } => {
                let (gv, go, gw) = deform_backward(
                    plan,
                    self.value(*value),
                    self.value(*offsets),
                    self.value(*weights),
                    &gy,
                );
                if needs(*value) {
                    acc(adj, *value, gv);
                }
                if needs(*offsets) {
                    acc(adj, *offsets, go);
                }
                if needs(*weights) {
                    acc(adj, *weights, gw);
                }
            }
            Op::Sum(x) => {
                let (n, m) = self.shape(*x);
                acc(adj, *x, Tensor::full(n, m, gy.item()));
            }
            Op::Mean(x) => {
                let (n, m) = self.shape(*x);
                let s = gy.item() / from_usize((n * m).max(1));
                acc(adj, *x, Tensor::full(n, m, s));
            }
            Op::MseConst { x, target } => {
                let xv = self.value(*x);
                let s = gy.item() * lit::<T>(2.0) / from_usize(xv.len().max(1));
                let data = xv.data().iter().zip(target.data()).map(|(a, b)| s * (*a - *b)).collect();
                acc(adj, *x, Tensor::from_vec(xv.rows(), xv.cols(), data));
            }
            Op::L1Const { x, target } => {
                let xv = self.value(*x);
                let s = gy.item();
                let data = xv
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(a, b)| {
                        let d = *a - *b;
                        if d > T::zero() {
                            s
                        } else if d < T::zero() {
                            -s
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                acc(adj, *x, Tensor::from_vec(xv.rows(), xv.cols(), data));
            }
            Op::BceLogits { x, target } => {
                let xv = self.value(*x);
                let s = gy.item() / from_usize(xv.len().max(1));
                let data = xv
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(z, y)| s * (sigmoid(*z) - *y))
                    .collect();
                acc(adj, *x, Tensor::from_vec(xv.rows(), xv.cols(), data));
            }
            Op::Focal { x, target, alpha, gamma } => {
                let xv = self.value(*x);
                let s = gy.item();
                let data = xv
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(z, y)| s * focal_term(*z, *y, *alpha, *gamma).1)
                    .collect();
                acc(adj, *x, Tensor::from_vec(xv.rows(), xv.cols(), data));
            }
        }
    }
}

fn acc<T: Real>(adj: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut adj[v.0] {
        Some(t) => t.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn col_sum<T: Real>(g: &Tensor<T>) -> Tensor<T> {
    let m = g.cols();
    let mut out = Tensor::zeros(1, m);
    for r in g.data().chunks(m) {
        for (o, v) in out.data_mut().iter_mut().zip(r) {
            *o += *v;
        }
    }
    out
}

fn hadamard<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| *x * *y).collect();
    Tensor::from_vec(a.rows(), a.cols(), data)
}

pub fn sigmoid<T: Real>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

/// Numerically stable `-[y ln s(z) + (1-y) ln(1-s(z))]`.
pub fn bce_term<T: Real>(z: T, y: T) -> T {
    z.max(T::zero()) - z * y + (T::one() + (-z.abs()).exp()).ln()
}

/// Sigmoid focal loss term and its derivative with respect to the logit.
pub fn focal_term<T: Real>(z: T, y: T, alpha: T, gamma: T) -> (T, T) {
    let one = T::one();
    let p = sigmoid(z);
    // pt is the probability assigned to the true label.
    let (pt, at, dpt) = if y > lit(0.5) {
        (p, alpha, p * (one - p))
    } else {
        (one - p, one - alpha, -p * (one - p))
    };
    let ce = bce_term(z, y);
    let omp = (one - pt).max(T::zero());
    let mod_ = if gamma == T::zero() { one } else { omp.powf(gamma) };
    let loss = at * mod_ * ce;
    // d ce / dz = p - y
    let dce = p - y;
    let dmod = if gamma == T::zero() || omp == T::zero() {
        T::zero()
    } else {
        -gamma * omp.powf(gamma - one) * dpt
    };
    (loss, at * (dmod * ce + mod_ * dce))
}
