//! Tape-based reverse-mode automatic differentiation over small dense tensors.
//!
//! A [`Graph`] is an append-only list of nodes; parents always have smaller
//! ids than their children, so insertion order is a topological order and the
//! backward sweep simply walks ids downward. Values are `[C, H, W]` tensors;
//! a scalar is `[1, 1, 1]`. Binary elementwise ops broadcast a scalar operand.

mod gradcheck;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport};
pub use tensor::{bilinear_resize, Shape, Tensor};

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Scale(NodeId, f64),
    Offset(NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    Log(NodeId, f64),
    Sqrt(NodeId),
    Abs(NodeId),
    Clamp(NodeId, f64, f64),
    Sum(NodeId),
    Mean(NodeId),
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
    },
    Upsample2x(NodeId),
    Bilinear(NodeId),
    MaxPool3 {
        x: NodeId,
        argmax: Vec<u32>,
    },
    Concat(Vec<NodeId>),
    GlobalAvgPool(NodeId),
    StopGrad,
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// One computation tape. Single-owner; build a fresh graph per sample/step.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

type Adjoints = Vec<Option<Vec<f64>>>;

fn accumulate(adj: &mut Adjoints, id: NodeId, len: usize, f: impl FnOnce(&mut [f64])) {
    let slot = adj[id.0].get_or_insert_with(|| vec![0.0; len]);
    f(slot);
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> Shape {
        self.nodes[id.0].value.shape
    }

    /// Value of a scalar node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value.data[0]
    }

    /// Accumulated adjoint of `id` (zeros if backward never reached it).
    pub fn grad(&self, id: NodeId) -> Tensor {
        let shape = self.shape(id);
        match self.grads.get(id.0).and_then(|g| g.as_ref()) {
            Some(g) => Tensor::new(shape, g.clone()).expect("grad shape"),
            None => Tensor::zeros(shape),
        }
    }

    pub fn zero_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        self.grads.push(None);
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Constant input; never receives gradient.
    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(Op::Leaf, t, false)
    }

    pub fn constant_scalar(&mut self, v: f64) -> NodeId {
        self.constant(Tensor::scalar(v))
    }

    /// Differentiable leaf (parameter or probed input).
    pub fn variable(&mut self, t: Tensor) -> NodeId {
        self.push(Op::Leaf, t, true)
    }

    fn binary(
        &mut self,
        a: NodeId,
        b: NodeId,
        name: &str,
        f: impl Fn(f64, f64) -> f64,
        mk: fn(NodeId, NodeId) -> Op,
    ) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        let value = if va.shape == vb.shape {
            Tensor::new_unchecked(
                va.shape,
                va.data.iter().zip(&vb.data).map(|(&x, &y)| f(x, y)).collect(),
            )
        } else if vb.len() == 1 {
            let y = vb.data[0];
            Tensor::new_unchecked(va.shape, va.data.iter().map(|&x| f(x, y)).collect())
        } else if va.len() == 1 {
            let x = va.data[0];
            Tensor::new_unchecked(vb.shape, vb.data.iter().map(|&y| f(x, y)).collect())
        } else {
            return Err(Error::Shape {
                left: format!("{name} lhs {:?}", va.shape),
                right: format!("rhs {:?}", vb.shape),
            });
        };
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(mk(a, b), value, ng))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, "div", |x, y| x / y, Op::Div)
    }

    fn unary(&mut self, a: NodeId, op: Op, f: impl Fn(f64) -> f64) -> NodeId {
        let v = self.value(a);
        let value = Tensor::new_unchecked(v.shape, v.data.iter().map(|&x| f(x)).collect());
        let ng = self.needs(a);
        self.push(op, value, ng)
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> NodeId {
        self.unary(a, Op::Scale(a, k), |x| k * x)
    }

    pub fn offset(&mut self, a: NodeId, k: f64) -> NodeId {
        self.unary(a, Op::Offset(a), |x| x + k)
    }

    /// `1 - a`
    pub fn one_minus(&mut self, a: NodeId) -> NodeId {
        let n = self.scale(a, -1.0);
        self.offset(n, 1.0)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    /// `ln(a + eps)`
    pub fn log(&mut self, a: NodeId, eps: f64) -> NodeId {
        self.unary(a, Op::Log(a, eps), |x| (x + eps).ln())
    }

    /// `sqrt(a + eps)`
    pub fn sqrt(&mut self, a: NodeId, eps: f64) -> NodeId {
        self.unary(a, Op::Sqrt(a), |x| (x + eps).sqrt())
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Abs(a), f64::abs)
    }

    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        self.unary(a, Op::Clamp(a, lo, hi), |x| x.clamp(lo, hi))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.value(a).data.iter().sum();
        let ng = self.needs(a);
        self.push(Op::Sum(a), Tensor::scalar(s), ng)
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let m = v.data.iter().sum::<f64>() / v.len() as f64;
        let ng = self.needs(a);
        self.push(Op::Mean(a), Tensor::scalar(m), ng)
    }

    pub fn stop_gradient(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).clone();
        self.push(Op::StopGrad, value, false)
    }

    /// 2-D convolution with zero padding `k / 2`. `w` is `[C_out, C_in, k*k]`
    /// (odd `k`), `b` is `[C_out, 1, 1]`.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
    ) -> Result<NodeId> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        let k = (ws.w as f64).sqrt().round() as usize;
        if k * k != ws.w || k % 2 == 0 || ws.h != xs.c || !(stride == 1 || stride == 2) {
            return Err(Error::Shape {
                left: format!("conv2d input {xs:?} stride {stride}"),
                right: format!("weight {ws:?}"),
            });
        }
        if let Some(b) = b {
            if self.shape(b) != Shape::new(ws.c, 1, 1) {
                return Err(Error::shape(self.shape(b), Shape::new(ws.c, 1, 1)));
            }
        }
        let value = tensor::conv2d_forward(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            k,
            stride,
        );
        let ng = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(Op::Conv2d { x, w, b, stride }, value, ng))
    }

    pub fn upsample2x(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let s = v.shape;
        let out = Shape::new(s.c, s.h * 2, s.w * 2);
        let mut data = Vec::with_capacity(out.len());
        for c in 0..s.c {
            for y in 0..out.h {
                for x in 0..out.w {
                    data.push(v.data[(c * s.h + y / 2) * s.w + x / 2]);
                }
            }
        }
        let ng = self.needs(a);
        self.push(Op::Upsample2x(a), Tensor::new_unchecked(out, data), ng)
    }

    /// Bilinear resize (half-pixel centers, edge clamped) to `h x w`.
    pub fn bilinear(&mut self, a: NodeId, h: usize, w: usize) -> NodeId {
        let value = bilinear_resize(self.value(a), h, w);
        let ng = self.needs(a);
        self.push(Op::Bilinear(a), value, ng)
    }

    /// 3x3 max filter, stride 1, replicate padding. Ties route to the first
    /// neighbor in row-major scan order.
    pub fn maxpool3(&mut self, a: NodeId) -> NodeId {
        let (value, argmax) = tensor::maxpool3_forward(self.value(a));
        let ng = self.needs(a);
        self.push(Op::MaxPool3 { x: a, argmax }, value, ng)
    }

    /// `-maxpool3(-a)`
    pub fn minpool3(&mut self, a: NodeId) -> NodeId {
        let n = self.scale(a, -1.0);
        let m = self.maxpool3(n);
        self.scale(m, -1.0)
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Invalid("concat of nothing".into()))?;
        let s0 = self.shape(first);
        let mut c = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if (s.h, s.w) != (s0.h, s0.w) {
                return Err(Error::shape(s0, s));
            }
            c += s.c;
            data.extend_from_slice(&self.value(p).data);
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            Op::Concat(parts.to_vec()),
            Tensor::new_unchecked(Shape::new(c, s0.h, s0.w), data),
            ng,
        ))
    }

    pub fn global_avg_pool(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let s = v.shape;
        let hw = s.h * s.w;
        let data = v
            .data
            .chunks_exact(hw)
            .map(|ch| ch.iter().sum::<f64>() / hw as f64)
            .collect();
        let ng = self.needs(a);
        self.push(
            Op::GlobalAvgPool(a),
            Tensor::new_unchecked(Shape::new(s.c, 1, 1), data),
            ng,
        )
    }

    /// Accumulates `d root / d node` into every node's gradient.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        let adj = self.propagate(root)?;
        for (i, a) in adj.into_iter().enumerate() {
            if let Some(a) = a {
                match &mut self.grads[i] {
                    Some(g) => g.iter_mut().zip(&a).for_each(|(g, v)| *g += v),
                    slot => *slot = Some(a),
                }
            }
        }
        Ok(())
    }

    /// Gradients of `root` w.r.t. `wrt`, leaving accumulated grads untouched.
    pub fn grad_of(&self, root: NodeId, wrt: &[NodeId]) -> Result<Vec<Tensor>> {
        let mut adj = self.propagate(root)?;
        Ok(wrt
            .iter()
            .map(|&id| match adj.get_mut(id.0).and_then(Option::take) {
                Some(a) => Tensor::new_unchecked(self.shape(id), a),
                None => Tensor::zeros(self.shape(id)),
            })
            .collect())
    }

    fn propagate(&self, root: NodeId) -> Result<Adjoints> {
        if self.value(root).len() != 1 {
            return Err(Error::Invalid(format!(
                "backward root must be scalar, got {:?}",
                self.shape(root)
            )));
        }
        let mut adj: Adjoints = vec![None; root.0 + 1];
        adj[root.0] = Some(vec![1.0]);
        for id in (0..=root.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = adj[id].take() else { continue };
            self.local_backward(NodeId(id), &g, &mut adj);
            adj[id] = Some(g);
        }
        Ok(adj)
    }

    fn local_backward(&self, id: NodeId, g: &[f64], adj: &mut Adjoints) {
        let node = &self.nodes[id.0];
        let out = &node.value.data;
        let len_of = |n: NodeId| self.nodes[n.0].value.len();
        let val = |n: NodeId| &self.nodes[n.0].value.data;
        let want = |n: NodeId| self.nodes[n.0].needs_grad;

        // elementwise adjoint for a binary op with possible scalar broadcast
        let binary = |adj: &mut Adjoints, a: NodeId, b: NodeId, da: &dyn Fn(f64, f64) -> f64, db: &dyn Fn(f64, f64) -> f64| {
            let (va, vb) = (val(a), val(b));
            let n = g.len();
            let at = |v: &Vec<f64>, i: usize| if v.len() == 1 { v[0] } else { v[i] };
            if want(a) {
                accumulate(adj, a, va.len(), |s| {
                    for i in 0..n {
                        let d = g[i] * da(at(va, i), at(vb, i));
                        if s.len() == 1 { s[0] += d } else { s[i] += d }
                    }
                });
            }
            if want(b) {
                accumulate(adj, b, vb.len(), |s| {
                    for i in 0..n {
                        let d = g[i] * db(at(va, i), at(vb, i));
                        if s.len() == 1 { s[0] += d } else { s[i] += d }
                    }
                });
            }
        };

        match &node.op {
            Op::Leaf | Op::StopGrad => {}
            Op::Add(a, b) => binary(adj, *a, *b, &|_, _| 1.0, &|_, _| 1.0),
            Op::Sub(a, b) => binary(adj, *a, *b, &|_, _| 1.0, &|_, _| -1.0),
            Op::Mul(a, b) => binary(adj, *a, *b, &|_, y| y, &|x, _| x),
            Op::Div(a, b) => binary(adj, *a, *b, &|_, y| 1.0 / y, &|x, y| -x / (y * y)),
            Op::Scale(a, k) => {
                accumulate(adj, *a, g.len(), |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += k * g))
            }
            Op::Offset(a) => {
                accumulate(adj, *a, g.len(), |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g))
            }
            Op::Relu(a) => {
                let x = val(*a);
                accumulate(adj, *a, g.len(), |s| {
                    for i in 0..g.len() {
                        if x[i] > 0.0 {
                            s[i] += g[i];
                        }
                    }
                })
            }
            Op::Sigmoid(a) => accumulate(adj, *a, g.len(), |s| {
                for i in 0..g.len() {
                    s[i] += g[i] * out[i] * (1.0 - out[i]);
                }
            }),
            Op::Log(a, eps) => {
                let x = val(*a);
                accumulate(adj, *a, g.len(), |s| {
                    for i in 0..g.len() {
                        s[i] += g[i] / (x[i] + eps);
                    }
                })
            }
            Op::Sqrt(a) => accumulate(adj, *a, g.len(), |s| {
                for i in 0..g.len() {
                    s[i] += g[i] * 0.5 / out[i];
                }
            }),
            Op::Abs(a) => {
                let x = val(*a);
                accumulate(adj, *a, g.len(), |s| {
                    for i in 0..g.len() {
                        s[i] += g[i] * if x[i] > 0.0 { 1.0 } else if x[i] < 0.0 { -1.0 } else { 0.0 };
                    }
                })
            }
            Op::Clamp(a, lo, hi) => {
                let x = val(*a);
                accumulate(adj, *a, g.len(), |s| {
                    for i in 0..g.len() {
                        if x[i] > *lo && x[i] < *hi {
                            s[i] += g[i];
                        }
                    }
                })
            }
            Op::Sum(a) => {
                accumulate(adj, *a, len_of(*a), |s| s.iter_mut().for_each(|s| *s += g[0]))
            }
            Op::Mean(a) => {
                let n = len_of(*a);
                let d = g[0] / n as f64;
                accumulate(adj, *a, n, |s| s.iter_mut().for_each(|s| *s += d))
            }
            Op::Conv2d { x, w, b, stride } => {
                let xv = &self.nodes[x.0].value;
                let wv = &self.nodes[w.0].value;
                let gt = Tensor::new_unchecked(node.value.shape, g.to_vec());
                if want(*x) {
                    accumulate(adj, *x, xv.len(), |s| {
                        tensor::conv2d_backward_input(&gt, wv, xv.shape, *stride, s)
                    });
                }
                if want(*w) {
                    accumulate(adj, *w, wv.len(), |s| {
                        tensor::conv2d_backward_weight(&gt, xv, wv.shape, *stride, s)
                    });
                }
                if let Some(b) = b {
                    if want(*b) {
                        let hw = node.value.shape.h * node.value.shape.w;
                        accumulate(adj, *b, len_of(*b), |s| {
                            for (c, ch) in g.chunks_exact(hw).enumerate() {
                                s[c] += ch.iter().sum::<f64>();
                            }
                        });
                    }
                }
            }
            Op::Upsample2x(a) => {
                let s_in = self.shape(*a);
                let ow = s_in.w * 2;
                accumulate(adj, *a, s_in.len(), |s| {
                    for c in 0..s_in.c {
                        for y in 0..s_in.h * 2 {
                            for x in 0..ow {
                                s[(c * s_in.h + y / 2) * s_in.w + x / 2] +=
                                    g[(c * s_in.h * 2 + y) * ow + x];
                            }
                        }
                    }
                })
            }
            Op::Bilinear(a) => {
                let s_in = self.shape(*a);
                let s_out = node.value.shape;
                accumulate(adj, *a, s_in.len(), |s| {
                    tensor::bilinear_backward(g, s_in, s_out, s)
                })
            }
            Op::MaxPool3 { x, argmax } => accumulate(adj, *x, g.len(), |s| {
                for (i, &src) in argmax.iter().enumerate() {
                    s[src as usize] += g[i];
                }
            }),
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = len_of(p);
                    if want(p) {
                        accumulate(adj, p, n, |s| {
                            s.iter_mut().zip(&g[off..off + n]).for_each(|(s, g)| *s += g)
                        });
                    }
                    off += n;
                }
            }
            Op::GlobalAvgPool(a) => {
                let sa = self.shape(*a);
                let hw = sa.h * sa.w;
                accumulate(adj, *a, sa.len(), |s| {
                    for (c, ch) in s.chunks_exact_mut(hw).enumerate() {
                        let d = g[c] / hw as f64;
                        ch.iter_mut().for_each(|v| *v += d);
                    }
                })
            }
        }
    }

    /// Hash of every discrete branch taken in the forward pass (relu signs,
    /// pooling argmaxes, clamp and abs regions). Equal signatures mean the
    /// graph is a single smooth piece between two evaluations.
    pub fn branch_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(a) | Op::Abs(a) => {
                    for &x in &self.value(*a).data {
                        (x > 0.0).hash(&mut h);
                        (x < 0.0).hash(&mut h);
                    }
                }
                Op::Clamp(a, lo, hi) => {
                    for &x in &self.value(*a).data {
                        (x > *lo).hash(&mut h);
                        (x < *hi).hash(&mut h);
                    }
                }
                Op::MaxPool3 { argmax, .. } => argmax.hash(&mut h),
                _ => {}
            }
        }
        h.finish()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
