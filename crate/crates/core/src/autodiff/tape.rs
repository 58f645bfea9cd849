use super::ops::{self, ConvGeom};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(&self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy)]
enum Unary {
    Swish,
    Sigmoid,
    Relu,
}

enum Op {
    Leaf,
    Conv2d {
        x: Var,
        k: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Dense {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    AvgPool {
        x: Var,
        size: usize,
    },
    Upsample {
        x: Var,
        factor: usize,
    },
    Unary {
        x: Var,
        f: Unary,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    Reshape {
        x: Var,
    },
    Concat {
        xs: Vec<Var>,
        axis: usize,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Affine {
        x: Var,
        scale: f64,
    },
    Sum {
        x: Var,
    },
    Mean {
        x: Var,
    },
    Mse {
        a: Var,
        b: Var,
    },
    Squash {
        x: Var,
    },
    NormLast {
        x: Var,
    },
    CapsPredict {
        u: Var,
        w: Var,
    },
    RouteSum {
        c: Var,
        uhat: Var,
    },
    Agreement {
        uhat: Var,
        v: Var,
    },
    Select {
        v: Var,
        idx: Vec<usize>,
    },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Records operations in execution order (which is a topological order) so
/// `backward` can walk them in reverse.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    done: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_node(value, op, requires_grad)
    }

    fn push_node(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// A constant: no gradient is accumulated for it.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_node(t, Op::Leaf, false)
    }

    /// A leaf whose gradient is wanted.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push_node(t, Op::Leaf, true)
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.push_node(t, Op::Leaf, requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// d(loss)/d(v) after [`Tape::backward`]; `None` when `v` does not depend
    /// on any gradient-carrying leaf or lies off the loss path.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.nodes[v.0].value.shape(), g.clone()).expect("grad matches value"))
    }

    pub fn conv2d(&mut self, x: Var, k: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (xv, kv) = (self.value(x), self.value(k));
        let bv = b.map(|b| self.value(b));
        let geom = ops::conv_geom(xv, kv, bv, stride, pad)?;
        let out = ops::conv2d(xv, kv, bv, stride, pad)?;
        let mut inputs = vec![x, k];
        inputs.extend(b);
        Ok(self.push(out, Op::Conv2d { x, k, b, geom }, &inputs))
    }

    pub fn dense(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let out = ops::dense(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(out, Op::Dense { x, w, b }, &inputs))
    }

    pub fn max_pool2d(&mut self, x: Var, size: usize) -> Result<Var> {
        let (out, argmax) = ops::max_pool2d(self.value(x), size)?;
        Ok(self.push(out, Op::MaxPool { x, argmax }, &[x]))
    }

    pub fn avg_pool2d(&mut self, x: Var, size: usize) -> Result<Var> {
        let out = ops::avg_pool2d(self.value(x), size)?;
        Ok(self.push(out, Op::AvgPool { x, size }, &[x]))
    }

    pub fn upsample2d(&mut self, x: Var, factor: usize) -> Result<Var> {
        let out = ops::upsample2d(self.value(x), factor)?;
        Ok(self.push(out, Op::Upsample { x, factor }, &[x]))
    }

    fn unary(&mut self, x: Var, f: Unary) -> Var {
        let xv = self.value(x);
        let out = match f {
            Unary::Swish => ops::swish(xv),
            Unary::Sigmoid => ops::sigmoid(xv),
            Unary::Relu => ops::relu(xv),
        };
        self.push(out, Op::Unary { x, f }, &[x])
    }

    pub fn swish(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Swish)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Relu)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = ops::softmax(self.value(x), axis)?;
        Ok(self.push(out, Op::Softmax { x, axis }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape { x }, &[x]))
    }

    /// Collapses everything after the leading (batch) axis.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).shape();
        let n = s.first().copied().unwrap_or(1);
        let rest: usize = s.iter().skip(1).product();
        self.reshape(x, &[n, rest])
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let vals: Vec<&Tensor> = xs.iter().map(|&v| self.value(v)).collect();
        let out = ops::concat(&vals, axis)?;
        Ok(self.push(out, Op::Concat { xs: xs.to_vec(), axis }, xs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::add(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::Add { a, b }, &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::sub(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::Sub { a, b }, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::mul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::Mul { a, b }, &[a, b]))
    }

    /// `scale * x + shift`, elementwise.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let xv = self.value(x);
        let out = Tensor::new(xv.shape(), xv.data().iter().map(|v| scale * v + shift).collect())
            .expect("same shape");
        self.push(out, Op::Affine { x, scale }, &[x])
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.affine(x, s, 0.0)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = ops::sum(self.value(x));
        self.push(out, Op::Sum { x }, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let out = ops::mean(self.value(x));
        self.push(out, Op::Mean { x }, &[x])
    }

    pub fn mse_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::mse_loss(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::Mse { a, b }, &[a, b]))
    }

    pub fn squash(&mut self, x: Var) -> Result<Var> {
        let out = ops::squash(self.value(x))?;
        Ok(self.push(out, Op::Squash { x }, &[x]))
    }

    pub fn norm_last(&mut self, x: Var) -> Result<Var> {
        let out = ops::norm_last(self.value(x))?;
        Ok(self.push(out, Op::NormLast { x }, &[x]))
    }

    pub fn capsule_predict(&mut self, u: Var, w: Var) -> Result<Var> {
        let out = ops::capsule_predict(self.value(u), self.value(w))?;
        Ok(self.push(out, Op::CapsPredict { u, w }, &[u, w]))
    }

    pub fn route_sum(&mut self, c: Var, uhat: Var) -> Result<Var> {
        let out = ops::route_sum(self.value(c), self.value(uhat))?;
        Ok(self.push(out, Op::RouteSum { c, uhat }, &[c, uhat]))
    }

    pub fn agreement(&mut self, uhat: Var, v: Var) -> Result<Var> {
        let out = ops::agreement(self.value(uhat), self.value(v))?;
        Ok(self.push(out, Op::Agreement { uhat, v }, &[uhat, v]))
    }

    pub fn select_capsule(&mut self, v: Var, idx: &[usize]) -> Result<Var> {
        let out = ops::select_capsule(self.value(v), idx)?;
        Ok(self.push(out, Op::Select { v, idx: idx.to_vec() }, &[v]))
    }

    /// Propagates d(loss)/d(node) to every node that depends on a
    /// gradient-carrying leaf. Gradients of all such nodes stay readable
    /// through [`Tape::grad`]. A tape can be differentiated once.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.done {
            return Err(Error::Contract("backward already ran on this tape".into()));
        }
        if self.nodes[loss.0].value.len() != 1 || self.nodes[loss.0].value.rank() > 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        self.done = true;
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        let Tape { nodes, grads, .. } = self;

        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            let node = &nodes[i];
            let want = |v: Var| nodes[v.0].requires_grad;
            let mut acc = |v: Var, g: Vec<f64>| match &mut grads[v.0] {
                Some(cur) => cur.iter_mut().zip(g).for_each(|(c, x)| *c += x),
                slot => *slot = Some(g),
            };
            let val = |v: Var| &nodes[v.0].value;
            match &node.op {
                Op::Leaf => {}
                Op::Conv2d { x, k, b, geom } => {
                    let w = [want(*x), want(*k), b.is_some_and(want)];
                    let (dx, dk, db) = ops::conv2d_backward(val(*x), val(*k), geom, &gy, w);
                    if let Some(g) = dx {
                        acc(*x, g);
                    }
                    if let Some(g) = dk {
                        acc(*k, g);
                    }
                    if let (Some(b), Some(g)) = (b, db) {
                        acc(*b, g);
                    }
                }
                Op::Dense { x, w, b } => {
                    let wt = [want(*x), want(*w), b.is_some_and(want)];
                    let (dx, dw, db) = ops::dense_backward(val(*x), val(*w), &gy, wt);
                    if let Some(g) = dx {
                        acc(*x, g);
                    }
                    if let Some(g) = dw {
                        acc(*w, g);
                    }
                    if let (Some(b), Some(g)) = (b, db) {
                        acc(*b, g);
                    }
                }
                Op::MaxPool { x, argmax } => {
                    let mut dx = vec![0.0; val(*x).len()];
                    for (&src, g) in argmax.iter().zip(&gy) {
                        dx[src] += g;
                    }
                    acc(*x, dx);
                }
                Op::AvgPool { x, size } => acc(*x, ops::avg_pool2d_backward(val(*x).shape(), *size, &gy)),
                Op::Upsample { x, factor } => {
                    acc(*x, ops::upsample2d_backward(val(*x).shape(), *factor, &gy))
                }
                Op::Unary { x, f } => {
                    let xs = val(*x).data();
                    let ys = node.value.data();
                    let dx = xs
                        .iter()
                        .zip(ys)
                        .zip(&gy)
                        .map(|((&xv, &yv), &g)| {
                            g * match f {
                                Unary::Swish => {
                                    let s = ops::sigmoid_scalar(xv);
                                    s + xv * s * (1.0 - s)
                                }
                                Unary::Sigmoid => yv * (1.0 - yv),
                                Unary::Relu => {
                                    if xv > 0.0 {
                                        1.0
                                    } else {
                                        0.0
                                    }
                                }
                            }
                        })
                        .collect();
                    acc(*x, dx);
                }
                Op::Softmax { x, axis } => acc(*x, ops::softmax_backward(&node.value, *axis, &gy)),
                Op::Reshape { x } => acc(*x, gy.clone()),
                Op::Concat { xs, axis } => {
                    let shapes: Vec<Vec<usize>> = xs.iter().map(|v| val(*v).shape().to_vec()).collect();
                    for (v, g) in xs.iter().zip(ops::concat_backward(&shapes, *axis, &gy)) {
                        if want(*v) {
                            acc(*v, g);
                        }
                    }
                }
                Op::Add { a, b } => {
                    if want(*a) {
                        acc(*a, gy.clone());
                    }
                    if want(*b) {
                        acc(*b, gy.clone());
                    }
                }
                Op::Sub { a, b } => {
                    if want(*a) {
                        acc(*a, gy.clone());
                    }
                    if want(*b) {
                        acc(*b, gy.iter().map(|g| -g).collect());
                    }
                }
                Op::Mul { a, b } => {
                    let (av, bv) = (val(*a).data(), val(*b).data());
                    if want(*a) {
                        acc(*a, gy.iter().zip(bv).map(|(g, y)| g * y).collect());
                    }
                    if want(*b) {
                        acc(*b, gy.iter().zip(av).map(|(g, y)| g * y).collect());
                    }
                }
                Op::Affine { x, scale } => acc(*x, gy.iter().map(|g| g * scale).collect()),
                Op::Sum { x } => acc(*x, vec![gy[0]; val(*x).len()]),
                Op::Mean { x } => {
                    let n = val(*x).len().max(1) as f64;
                    acc(*x, vec![gy[0] / n; val(*x).len()]);
                }
                Op::Mse { a, b } => {
                    let (av, bv) = (val(*a).data(), val(*b).data());
                    let k = 2.0 * gy[0] / av.len().max(1) as f64;
                    let d: Vec<f64> = av.iter().zip(bv).map(|(p, q)| k * (p - q)).collect();
                    if want(*b) {
                        acc(*b, d.iter().map(|v| -v).collect());
                    }
                    if want(*a) {
                        acc(*a, d);
                    }
                }
                Op::Squash { x } => acc(*x, ops::squash_backward(val(*x), &gy)),
                Op::NormLast { x } => acc(*x, ops::norm_last_backward(val(*x), &node.value, &gy)),
                Op::CapsPredict { u, w } => {
                    let (du, dw) = ops::capsule_predict_backward(val(*u), val(*w), &gy, [want(*u), want(*w)]);
                    if let Some(g) = du {
                        acc(*u, g);
                    }
                    if let Some(g) = dw {
                        acc(*w, g);
                    }
                }
                Op::RouteSum { c, uhat } => {
                    let (dc, du) = ops::route_sum_backward(val(*c), val(*uhat), &gy, [want(*c), want(*uhat)]);
                    if let Some(g) = dc {
                        acc(*c, g);
                    }
                    if let Some(g) = du {
                        acc(*uhat, g);
                    }
                }
                Op::Agreement { uhat, v } => {
                    let (du, dv) = ops::agreement_backward(val(*uhat), val(*v), &gy, [want(*uhat), want(*v)]);
                    if let Some(g) = du {
                        acc(*uhat, g);
                    }
                    if let Some(g) = dv {
                        acc(*v, g);
                    }
                }
                Op::Select { v, idx } => {
                    let s = val(*v).shape();
                    let (n, d) = (s[1], s[2]);
                    let mut dv = vec![0.0; val(*v).len()];
                    for (b, &j) in idx.iter().enumerate() {
                        dv[(b * n + j) * d..][..d].copy_from_slice(&gy[b * d..][..d]);
                    }
                    acc(*v, dv);
                }
            }
            grads[i] = Some(gy);
        }
        Ok(())
    }
}
