//! A small tape-based reverse-mode differentiation engine.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Parameters
//! are read straight out of a borrowed [`ParamStore`]; frozen parameters and
//! plain inputs never receive gradients, so the backward pass skips any
//! subgraph that cannot reach a trainable parameter.

mod attention;
mod conv;
mod loss;

use std::rc::Rc;

pub use attention::{AttentionPattern, INVALID_KEY};
pub use loss::log_softmax_row;

use crate::params::{ParamId, ParamStore};
use crate::tensor::{gemm, Float, MatRef, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Rectangular cell region of a feature map: rows `top..bottom`, columns
/// `left..right` of page `page`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RoiRegion {
    pub page: usize,
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

enum Op<T: Float> {
    Input,
    Param(ParamId),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    ScaleRows(Var, Rc<Vec<T>>),
    MatMul(Var, Var),
    Gelu(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    GatherRows(Var, Rc<Vec<usize>>),
    Conv2d { x: Var, w: Var, b: Var, stride: usize, pad: usize },
    Upsample { x: Var, factor: usize },
    AvgPool { x: Var, factor: usize },
    RoiMax { maps: Var, argmax: Vec<usize> },
    Attention { q: Var, k: Var, v: Var, pattern: Rc<AttentionPattern>, probs: Vec<T> },
    CrossEntropy { logits: Var, targets: Rc<Vec<Option<usize>>>, probs: Vec<T>, count: usize },
    SoftCrossEntropy { logits: Var, targets: Rc<Tensor<T>>, probs: Vec<T> },
}

struct Node<T: Float> {
    value: Option<Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

/// Per-parameter gradients produced by [`Graph::backward`].
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Float> Gradients<T> {
    pub fn empty(len: usize) -> Self {
        Self { grads: (0..len).map(|_| None).collect() }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.grads[id.index()].as_ref()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.iter().all(|g| g.is_none())
    }

    /// Adds `other` into `self`.
    pub fn accumulate(&mut self, other: Gradients<T>) {
        for (slot, g) in self.grads.iter_mut().zip(other.grads) {
            if let Some(g) = g {
                match slot {
                    Some(acc) => acc.add_assign(&g),
                    None => *slot = Some(g),
                }
            }
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Tensor<T>)> {
        self.grads
            .iter_mut()
            .enumerate()
            .filter_map(|(i, g)| g.as_mut().map(|g| (ParamId(i), g)))
    }

    pub fn global_norm(&self) -> f64 {
        self.grads.iter().flatten().map(|g| g.sum_sq()).sum::<f64>().sqrt()
    }

    pub fn clear(&mut self) {
        for g in self.grads.iter_mut() {
            *g = None;
        }
    }
}

pub struct Graph<'a, T: Float> {
    store: &'a ParamStore<T>,
    nodes: Vec<Node<T>>,
    track: bool,
}

impl<'a, T: Float> Graph<'a, T> {
    /// Graph that records gradients for trainable parameters.
    pub fn new(store: &'a ParamStore<T>) -> Self {
        Self { store, nodes: Vec::new(), track: true }
    }

    /// Graph in evaluation mode: no parameter requires a gradient.
    pub fn inference(store: &'a ParamStore<T>) -> Self {
        Self { store, nodes: Vec::new(), track: false }
    }

    pub fn store(&self) -> &'a ParamStore<T> {
        self.store
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.store.value(*id),
            (None, _) => unreachable!("non-parameter node without a value"),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value: Some(value), op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Input, false)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let needs = self.track && self.store.get(id).trainable;
        self.nodes.push(Node { value: None, op: Op::Param(id), needs_grad: needs });
        Var(self.nodes.len() - 1)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "add shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::from_vec(va.shape(), data).expect("same shape");
        let needs = self.needs(a) || self.needs(b);
        self.push(out, Op::Add(a, b), needs)
    }

    /// Sum of several same-shaped vars.
    pub fn sum(&mut self, vars: &[Var]) -> Var {
        let mut acc = vars[0];
        for &v in &vars[1..] {
            acc = self.add(acc, v);
        }
        acc
    }

    /// `x + bias` with the bias broadcast over rows of the last dimension.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Var {
        let (vx, vb) = (self.value(x), self.value(bias));
        let c = vx.last_dim();
        assert_eq!(vb.numel(), c, "bias length mismatch");
        let mut out = vx.clone();
        for row in out.data_mut().chunks_mut(c) {
            for (o, &b) in row.iter_mut().zip(vb.data()) {
                *o += b;
            }
        }
        let needs = self.needs(x) || self.needs(bias);
        self.push(out, Op::AddBias(x, bias), needs)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mul shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::from_vec(va.shape(), data).expect("same shape");
        let needs = self.needs(a) || self.needs(b);
        self.push(out, Op::Mul(a, b), needs)
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let mut out = self.value(x).clone();
        out.scale_in_place(s);
        let needs = self.needs(x);
        self.push(out, Op::Scale(x, s), needs)
    }

    /// Multiplies row `r` of `x` (viewed as a matrix over its last dim) by `s[r]`.
    pub fn scale_rows(&mut self, x: Var, s: Vec<T>) -> Var {
        let vx = self.value(x);
        let c = vx.last_dim();
        assert_eq!(vx.rows(), s.len(), "scale_rows length mismatch");
        let mut out = vx.clone();
        for (row, &f) in out.data_mut().chunks_mut(c).zip(&s) {
            for o in row.iter_mut() {
                *o *= f;
            }
        }
        let needs = self.needs(x);
        self.push(out, Op::ScaleRows(x, Rc::new(s)), needs)
    }

    /// `(n × k) · (k × m)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape().len(), 2, "matmul lhs must be 2-D");
        assert_eq!(vb.shape().len(), 2, "matmul rhs must be 2-D");
        let (n, k) = (va.shape()[0], va.shape()[1]);
        let (k2, m) = (vb.shape()[0], vb.shape()[1]);
        assert_eq!(k, k2, "matmul inner dimension mismatch");
        let mut out = Tensor::zeros(&[n, m]);
        gemm(MatRef::new(va.data(), n, k), MatRef::new(vb.data(), k, m), T::zero(), out.data_mut());
        let needs = self.needs(a) || self.needs(b);
        self.push(out, Op::MatMul(a, b), needs)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let data = vx.data().iter().map(|&v| gelu(v)).collect();
        let out = Tensor::from_vec(vx.shape(), data).expect("same shape");
        let needs = self.needs(x);
        self.push(out, Op::Gelu(x), needs)
    }

    /// Layer normalisation over the last dimension.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let (vx, vg, vb) = (self.value(x), self.value(gamma), self.value(beta));
        let c = vx.last_dim();
        assert_eq!(vg.numel(), c);
        assert_eq!(vb.numel(), c);
        let rows = vx.rows();
        let mut out = Tensor::zeros(vx.shape());
        let mut xhat = vec![T::zero(); vx.numel()];
        let mut rstd = vec![T::zero(); rows];
        let inv_c = T::of(1.0 / c as f64);
        for r in 0..rows {
            let row = vx.row(r);
            let mean = row.iter().copied().sum::<T>() * inv_c;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_c;
            let rs = T::one() / (var + T::of(eps)).sqrt();
            rstd[r] = rs;
            let o = &mut out.data_mut()[r * c..(r + 1) * c];
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[r * c + j] = h;
                o[j] = h * vg.data()[j] + vb.data()[j];
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(out, Op::LayerNorm { x, gamma, beta, xhat, rstd }, needs)
    }

    /// Selects rows of a `(R, C)` matrix.
    pub fn gather_rows(&mut self, x: Var, idx: Vec<usize>) -> Var {
        let vx = self.value(x);
        let c = vx.last_dim();
        let r = vx.rows();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in &idx {
            assert!(i < r, "gather_rows index {i} out of range {r}");
            data.extend_from_slice(vx.row(i));
        }
        let out = Tensor::from_vec(&[idx.len(), c], data).expect("shape");
        let needs = self.needs(x);
        self.push(out, Op::GatherRows(x, Rc::new(idx)), needs)
    }

    /// 2-D convolution over `(N, C, H, W)` with square kernels.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let out = conv::conv2d_forward(self.value(x), self.value(w), self.value(b), stride, pad);
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(out, Op::Conv2d { x, w, b, stride, pad }, needs)
    }

    /// Nearest-neighbour upsampling by `factor`, cropped to `(out_h, out_w)`.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize, out_h: usize, out_w: usize) -> Var {
        let out = conv::upsample_forward(self.value(x), factor, out_h, out_w);
        let needs = self.needs(x);
        self.push(out, Op::Upsample { x, factor }, needs)
    }

    /// Average pooling with window = stride = `factor`; output sizes round
    /// up and partial windows average over their valid cells.
    pub fn avg_pool(&mut self, x: Var, factor: usize) -> Var {
        let out = conv::avg_pool_forward(self.value(x), factor);
        let needs = self.needs(x);
        self.push(out, Op::AvgPool { x, factor }, needs)
    }

    /// Per-channel maximum over each region of a `(P, C, H, W)` map stack.
    /// Returns `(regions, C)`.
    pub fn roi_max_pool(&mut self, maps: Var, regions: &[RoiRegion]) -> Var {
        let vm = self.value(maps);
        let (out, argmax) = roi_max_forward(vm, regions);
        let needs = self.needs(maps);
        self.push(out, Op::RoiMax { maps, argmax }, needs)
    }

    /// Multi-head attention restricted to `pattern`. `q`, `k`, `v` are `(N, d)`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, pattern: Rc<AttentionPattern>) -> Var {
        let (out, probs) = attention::forward(self.value(q), self.value(k), self.value(v), &pattern);
        let needs = self.needs(q) || self.needs(k) || self.needs(v);
        self.push(out, Op::Attention { q, k, v, pattern, probs }, needs)
    }

    /// Mean cross-entropy over rows with a target; rows with `None` are
    /// ignored. With no targeted rows the loss is exactly zero.
    pub fn cross_entropy(&mut self, logits: Var, targets: Vec<Option<usize>>) -> Var {
        let (loss, probs, count) = loss::cross_entropy_forward(self.value(logits), &targets);
        let needs = self.needs(logits);
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, targets: Rc::new(targets), probs, count },
            needs,
        )
    }

    /// Mean over rows of `-Σ_k θ_k log softmax(z)_k` against probability targets.
    pub fn soft_cross_entropy(&mut self, logits: Var, targets: Tensor<T>) -> Var {
        let (loss, probs) = loss::soft_cross_entropy_forward(self.value(logits), &targets);
        let needs = self.needs(logits);
        self.push(
            Tensor::scalar(loss),
            Op::SoftCrossEntropy { logits, targets: Rc::new(targets), probs },
            needs,
        )
    }

    /// Reverse pass from a scalar `loss`; returns gradients for every
    /// trainable parameter reached.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.value(loss).numel(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut out = Gradients::empty(self.store.len());
        if !self.needs(loss) {
            return out;
        }
        grads[loss.0] = Some(Tensor::scalar(T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, g, &mut grads, &mut out);
        }
        out
    }

    fn accum(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backward_node(
        &self,
        node: &Node<T>,
        g: Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
        out: &mut Gradients<T>,
    ) {
        match &node.op {
            Op::Input => {}
            Op::Param(id) => match &mut out.grads[id.index()] {
                Some(acc) => acc.add_assign(&g),
                slot @ None => *slot = Some(g),
            },
            Op::Add(a, b) => {
                if self.needs(*a) && self.needs(*b) {
                    self.accum(grads, *a, g.clone());
                    self.accum(grads, *b, g);
                } else if self.needs(*a) {
                    self.accum(grads, *a, g);
                } else {
                    self.accum(grads, *b, g);
                }
            }
            Op::AddBias(x, bias) => {
                if self.needs(*bias) {
                    let c = g.last_dim();
                    let mut gb = Tensor::zeros(self.shape(*bias));
                    for row in g.data().chunks(c) {
                        for (acc, &v) in gb.data_mut().iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    self.accum(grads, *bias, gb);
                }
                self.accum(grads, *x, g);
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let vb = self.value(*b);
                    let data = g.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
                    self.accum(grads, *a, Tensor::from_vec(g.shape(), data).expect("shape"));
                }
                if self.needs(*b) {
                    let va = self.value(*a);
                    let data = g.data().iter().zip(va.data()).map(|(&x, &y)| x * y).collect();
                    self.accum(grads, *b, Tensor::from_vec(g.shape(), data).expect("shape"));
                }
            }
            Op::Scale(x, s) => {
                let mut g = g;
                g.scale_in_place(*s);
                self.accum(grads, *x, g);
            }
            Op::ScaleRows(x, s) => {
                let mut g = g;
                let c = g.last_dim();
                for (row, &f) in g.data_mut().chunks_mut(c).zip(s.iter()) {
                    for o in row.iter_mut() {
                        *o *= f;
                    }
                }
                self.accum(grads, *x, g);
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (n, k) = (va.shape()[0], va.shape()[1]);
                let m = vb.shape()[1];
                if self.needs(*a) {
                    let mut ga = Tensor::zeros(&[n, k]);
                    gemm(MatRef::new(g.data(), n, m), MatRef::new(vb.data(), k, m).t(), T::zero(), ga.data_mut());
                    self.accum(grads, *a, ga);
                }
                if self.needs(*b) {
                    let mut gb = Tensor::zeros(&[k, m]);
                    gemm(MatRef::new(va.data(), n, k).t(), MatRef::new(g.data(), n, m), T::zero(), gb.data_mut());
                    self.accum(grads, *b, gb);
                }
            }
            Op::Gelu(x) => {
                let vx = self.value(*x);
                let data = g.data().iter().zip(vx.data()).map(|(&gv, &xv)| gv * gelu_grad(xv)).collect();
                self.accum(grads, *x, Tensor::from_vec(g.shape(), data).expect("shape"));
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let vg = self.value(*gamma);
                let c = vg.numel();
                if self.needs(*gamma) || self.needs(*beta) {
                    let mut gg = Tensor::zeros(&[c]);
                    let mut gb = Tensor::zeros(&[c]);
                    for (row, hrow) in g.data().chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            gg.data_mut()[j] += row[j] * hrow[j];
                            gb.data_mut()[j] += row[j];
                        }
                    }
                    self.accum(grads, *gamma, gg);
                    self.accum(grads, *beta, gb);
                }
                if self.needs(*x) {
                    let inv_c = T::of(1.0 / c as f64);
                    let mut gx = Tensor::zeros(g.shape());
                    let mut dxhat = vec![T::zero(); c];
                    for (r, (row, hrow)) in g.data().chunks(c).zip(xhat.chunks(c)).enumerate() {
                        let mut mean_d = T::zero();
                        let mut mean_dh = T::zero();
                        for j in 0..c {
                            dxhat[j] = row[j] * vg.data()[j];
                            mean_d += dxhat[j];
                            mean_dh += dxhat[j] * hrow[j];
                        }
                        mean_d *= inv_c;
                        mean_dh *= inv_c;
                        let o = &mut gx.data_mut()[r * c..(r + 1) * c];
                        for j in 0..c {
                            o[j] = rstd[r] * (dxhat[j] - mean_d - hrow[j] * mean_dh);
                        }
                    }
                    self.accum(grads, *x, gx);
                }
            }
            Op::GatherRows(x, idx) => {
                let vx = self.value(*x);
                let c = vx.last_dim();
                let mut gx = Tensor::zeros(vx.shape());
                for (k, &i) in idx.iter().enumerate() {
                    let dst = &mut gx.data_mut()[i * c..(i + 1) * c];
                    for (d, &s) in dst.iter_mut().zip(&g.data()[k * c..(k + 1) * c]) {
                        *d += s;
                    }
                }
                self.accum(grads, *x, gx);
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let (dx, dw, db) = conv::conv2d_backward(
                    self.value(*x),
                    self.value(*w),
                    &g,
                    *stride,
                    *pad,
                    self.needs(*x),
                    self.needs(*w) || self.needs(*b),
                );
                if let Some(dx) = dx {
                    self.accum(grads, *x, dx);
                }
                if let Some((dw, db)) = dw.zip(db) {
                    self.accum(grads, *w, dw);
                    self.accum(grads, *b, db);
                }
            }
            Op::Upsample { x, factor } => {
                let gx = conv::upsample_backward(&g, self.shape(*x), *factor);
                self.accum(grads, *x, gx);
            }
            Op::AvgPool { x, factor } => {
                let gx = conv::avg_pool_backward(&g, self.shape(*x), *factor);
                self.accum(grads, *x, gx);
            }
            Op::RoiMax { maps, argmax } => {
                let mut gm = Tensor::zeros(self.shape(*maps));
                for (&pos, &gv) in argmax.iter().zip(g.data()) {
                    gm.data_mut()[pos] += gv;
                }
                self.accum(grads, *maps, gm);
            }
            Op::Attention { q, k, v, pattern, probs } => {
                let (dq, dk, dv) =
                    attention::backward(self.value(*q), self.value(*k), self.value(*v), pattern, probs, &g);
                self.accum(grads, *q, dq);
                self.accum(grads, *k, dk);
                self.accum(grads, *v, dv);
            }
            Op::CrossEntropy { logits, targets, probs, count } => {
                let gl = loss::cross_entropy_backward(self.shape(*logits), targets, probs, *count, g.item());
                self.accum(grads, *logits, gl);
            }
            Op::SoftCrossEntropy { logits, targets, probs } => {
                let gl = loss::soft_cross_entropy_backward(self.shape(*logits), targets, probs, g.item());
                self.accum(grads, *logits, gl);
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub(crate) fn gelu<T: Float>(x: T) -> T {
    let u = T::of(GELU_C) * (x + T::of(GELU_A) * x * x * x);
    T::of(0.5) * x * (T::one() + u.tanh())
}

fn gelu_grad<T: Float>(x: T) -> T {
    let u = T::of(GELU_C) * (x + T::of(GELU_A) * x * x * x);
    let t = u.tanh();
    let du = T::of(GELU_C) * (T::one() + T::of(3.0 * GELU_A) * x * x);
    T::of(0.5) * (T::one() + t) + T::of(0.5) * x * (T::one() - t * t) * du
}

/// Forward RoI max pooling; also returns the flat argmax position per output.
pub(crate) fn roi_max_forward<T: Float>(maps: &Tensor<T>, regions: &[RoiRegion]) -> (Tensor<T>, Vec<usize>) {
    let s = maps.shape();
    assert_eq!(s.len(), 4, "roi pooling expects (P, C, H, W)");
    let (p, c, h, w) = (s[0], s[1], s[2], s[3]);
    let mut out = Tensor::zeros(&[regions.len(), c]);
    let mut argmax = vec![0usize; regions.len() * c];
    let data = maps.data();
    for (r, reg) in regions.iter().enumerate() {
        assert!(reg.page < p, "roi page {} out of range {}", reg.page, p);
        assert!(reg.top < reg.bottom && reg.bottom <= h, "invalid roi rows {:?}", reg);
        assert!(reg.left < reg.right && reg.right <= w, "invalid roi cols {:?}", reg);
        for ch in 0..c {
            let base = (reg.page * c + ch) * h * w;
            let mut best = base + reg.top * w + reg.left;
            let mut best_v = data[best];
            for y in reg.top..reg.bottom {
                let row = base + y * w;
                for pos in row + reg.left..row + reg.right {
                    if data[pos] > best_v {
                        best_v = data[pos];
                        best = pos;
                    }
                }
            }
            out.data_mut()[r * c + ch] = best_v;
            argmax[r * c + ch] = best;
        }
    }
    (out, argmax)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(values: Vec<(&str, Tensor<f64>)>) -> (ParamStore<f64>, Vec<ParamId>) {
        let mut s = ParamStore::new();
        let ids = values.into_iter().map(|(n, t)| s.add(n, "g", t, true)).collect();
        (s, ids)
    }

    /// Central finite differences of `f` with respect to every element of
    /// parameter `id`.
    fn numeric_grad(
        store: &mut ParamStore<f64>,
        id: ParamId,
        f: &dyn Fn(&ParamStore<f64>) -> f64,
    ) -> Vec<f64> {
        let n = store.value(id).numel();
        let h = 1e-6;
        (0..n)
            .map(|i| {
                let orig = store.value(id).data()[i];
                store.get_mut(id).value.data_mut()[i] = orig + h;
                let fp = f(store);
                store.get_mut(id).value.data_mut()[i] = orig - h;
                let fm = f(store);
                store.get_mut(id).value.data_mut()[i] = orig;
                (fp - fm) / (2.0 * h)
            })
            .collect()
    }

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            let scale = x.abs().max(y.abs()).max(1e-3);
            assert!((x - y).abs() / scale < tol, "analytic {x} vs numeric {y}");
        }
    }

    #[test]
    fn linear_gelu_layernorm_gradients() {
        let mut init_rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(3);
        let mut init = crate::params::Init::new(&mut init_rng);
        let (mut store, ids) = store_with(vec![
            ("x", init.normal(&[3, 4], 1.0)),
            ("w", init.normal(&[4, 5], 0.5)),
            ("b", init.normal(&[5], 0.5)),
            ("gamma", init.normal(&[5], 1.0)),
            ("beta", init.normal(&[5], 1.0)),
        ]);
        let f = |s: &ParamStore<f64>| -> (f64, Gradients<f64>) {
            let mut g = Graph::new(s);
            let x = g.param(ids[0]);
            let w = g.param(ids[1]);
            let b = g.param(ids[2]);
            let h = g.matmul(x, w);
            let h = g.add_bias(h, b);
            let h = g.gelu(h);
            let gm = g.param(ids[3]);
            let bt = g.param(ids[4]);
            let h = g.layer_norm(h, gm, bt, 1e-5);
            let loss = g.cross_entropy(h, vec![Some(1), None, Some(4)]);
            (g.value(loss).item(), g.backward(loss))
        };
        let (_, grads) = f(&store);
        for &id in &ids {
            let num = numeric_grad(&mut store, id, &|s| f(s).0);
            assert_close(grads.get(id).unwrap().data(), &num, 1e-6);
        }
    }

    #[test]
    fn conv_pool_roi_gradients() {
        let mut init_rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(5);
        let mut init = crate::params::Init::new(&mut init_rng);
        let (mut store, ids) = store_with(vec![
            ("x", init.normal(&[2, 2, 7, 5], 1.0)),
            ("w", init.normal(&[3, 2, 3, 3], 0.5)),
            ("b", init.normal(&[3], 0.5)),
        ]);
        let f = |s: &ParamStore<f64>| -> (f64, Gradients<f64>) {
            let mut g = Graph::new(s);
            let x = g.param(ids[0]);
            let w = g.param(ids[1]);
            let b = g.param(ids[2]);
            let y = g.conv2d(x, w, b, 2, 1); // (2,3,4,3)
            let up = g.upsample_nearest(y, 2, 7, 5);
            let pooled = g.avg_pool(up, 2);
            let z = g.add(pooled, y);
            let regions = [
                RoiRegion { page: 0, top: 0, bottom: 4, left: 0, right: 3 },
                RoiRegion { page: 1, top: 1, bottom: 3, left: 1, right: 2 },
            ];
            let r = g.roi_max_pool(z, &regions);
            let loss = g.soft_cross_entropy(r, Tensor::from_f64(&[2, 3], &[0.2, 0.3, 0.5, 1.0, 0.0, 0.0]).unwrap());
            (g.value(loss).item(), g.backward(loss))
        };
        let (_, grads) = f(&store);
        for &id in &ids {
            let num = numeric_grad(&mut store, id, &|s| f(s).0);
            assert_close(grads.get(id).unwrap().data(), &num, 1e-6);
        }
    }

    #[test]
    fn frozen_params_get_no_gradient() {
        let (mut store, ids) = store_with(vec![
            ("a", Tensor::from_f64(&[1, 2], &[1.0, 2.0]).unwrap()),
            ("b", Tensor::from_f64(&[2, 1], &[3.0, 4.0]).unwrap()),
        ]);
        store.get_mut(ids[0]).trainable = false;
        let mut g = Graph::new(&store);
        let a = g.param(ids[0]);
        let b = g.param(ids[1]);
        let y = g.matmul(a, b);
        let grads = g.backward(y);
        assert!(grads.get(ids[0]).is_none());
        assert_eq!(grads.get(ids[1]).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn cross_entropy_without_targets_is_zero() {
        let (store, ids) = store_with(vec![("z", Tensor::from_f64(&[2, 3], &[1.0, 2.0, 3.0, 0.0, 0.0, 0.0]).unwrap())]);
        let mut g = Graph::new(&store);
        let z = g.param(ids[0]);
        let l = g.cross_entropy(z, vec![None, None]);
        assert_eq!(g.value(l).item(), 0.0);
        let grads = g.backward(l);
        assert!(grads.get(ids[0]).unwrap().data().iter().all(|&v| v == 0.0));
    }
}
