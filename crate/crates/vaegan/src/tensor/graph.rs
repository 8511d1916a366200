//! Append-only computation tape with reverse-mode differentiation.
//!
//! Operations execute eagerly and record a node per result. `backward(root)`
//! walks the tape in reverse, accumulating vector-Jacobian products into every
//! node that requires gradients. A node created by [`Graph::stop_gradient`]
//! propagates values but never gradients, which is how training limits each
//! error signal to the networks that are supposed to receive it.
//!
//! Node inputs always reference earlier node ids, so the tape is topologically
//! ordered by construction and a single reverse sweep suffices.

use super::kernels::{self, Broadcast};
use super::{Result, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(&self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub enum Op {
    Leaf,
    StopGradient,
    Add(Broadcast),
    Sub(Broadcast),
    Mul(Broadcast),
    Div(Broadcast),
    Neg,
    Exp,
    Ln,
    Sqrt,
    Relu,
    Tanh,
    Sigmoid,
    Clamp { lo: f64, hi: f64 },
    AddScalar(f64),
    MulScalar(f64),
    Matmul,
    Conv2d { stride: usize, pad: usize },
    ConvTranspose2d { stride: usize, pad: usize, out_pad: usize },
    SumAll,
    MeanChannels,
    Reshape,
    ConcatCols,
}

struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    value: Tensor,
    grad: Option<Tensor>,
    requires_grad: bool,
}

/// Dynamically built computation graph (a tape).
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
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

    /// Gradient populated by the most recent `backward()`; `None` when no
    /// gradient reached the node (an exact zero).
    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id.0].grad.as_ref()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, value: Tensor) -> NodeId {
        let requires_grad = match op {
            Op::Leaf => value.requires_grad(),
            Op::StopGradient => false,
            _ => inputs.iter().any(|&i| self.nodes[i.0].requires_grad),
        };
        self.nodes.push(Node {
            op,
            inputs,
            value,
            grad: None,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    // -- graph inputs ------------------------------------------------------

    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, vec![], value)
    }

    /// Leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, vec![], value.detached())
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.constant(Tensor::scalar(v))
    }

    /// Value passes through unchanged; backward treats the result as a
    /// constant, so every node upstream of the mark sees an exact zero.
    pub fn stop_gradient(&mut self, x: NodeId) -> NodeId {
        let value = self.nodes[x.0].value.clone();
        self.push(Op::StopGradient, vec![x], value)
    }

    // -- elementwise -------------------------------------------------------

    fn binary(
        &mut self,
        name: &'static str,
        make: impl Fn(Broadcast) -> Op,
        f: impl Fn(f64, f64) -> f64,
        a: NodeId,
        b: NodeId,
    ) -> Result<NodeId> {
        let (_, bc) = kernels::resolve_broadcast(name, self.nodes[a.0].value.shape(), self.nodes[b.0].value.shape())?;
        let value = kernels::binary_map(&self.nodes[a.0].value, &self.nodes[b.0].value, bc, f);
        Ok(self.push(make(bc), vec![a, b], value))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("add", Op::Add, |x, y| x + y, a, b)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("sub", Op::Sub, |x, y| x - y, a, b)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("mul", Op::Mul, |x, y| x * y, a, b)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("div", Op::Div, |x, y| x / y, a, b)
    }

    fn unary(&mut self, op: Op, f: impl Fn(f64) -> f64, x: NodeId) -> NodeId {
        let value = self.nodes[x.0].value.map(f);
        self.push(op, vec![x], value)
    }

    pub fn neg(&mut self, x: NodeId) -> NodeId {
        self.unary(Op::Neg, |v| -v, x)
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        self.unary(Op::Exp, f64::exp, x)
    }

    pub fn ln(&mut self, x: NodeId) -> NodeId {
        self.unary(Op::Ln, f64::ln, x)
    }

    pub fn sqrt(&mut self, x: NodeId) -> NodeId {
        self.unary(Op::Sqrt, f64::sqrt, x)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.unary(Op::Relu, |v| if v > 0.0 { v } else { 0.0 }, x)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        self.unary(Op::Tanh, f64::tanh, x)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.unary(Op::Sigmoid, sigmoid, x)
    }

    pub fn clamp(&mut self, x: NodeId, lo: f64, hi: f64) -> NodeId {
        self.unary(Op::Clamp { lo, hi }, |v| v.clamp(lo, hi), x)
    }

    pub fn add_scalar(&mut self, x: NodeId, c: f64) -> NodeId {
        self.unary(Op::AddScalar(c), |v| v + c, x)
    }

    pub fn mul_scalar(&mut self, x: NodeId, c: f64) -> NodeId {
        self.unary(Op::MulScalar(c), |v| v * c, x)
    }

    // -- linear algebra ----------------------------------------------------

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ashape, bshape) = (self.nodes[a.0].value.shape(), self.nodes[b.0].value.shape());
        if ashape.len() != 2 || bshape.len() != 2 || ashape[1] != bshape[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: ashape.to_vec(),
                rhs: bshape.to_vec(),
            });
        }
        let (m, k, n) = (ashape[0], ashape[1], bshape[1]);
        let data = kernels::matmul(self.nodes[a.0].value.data(), m, k, self.nodes[b.0].value.data(), n);
        let value = Tensor::from_vec(&[m, n], data).unwrap();
        Ok(self.push(Op::Matmul, vec![a, b], value))
    }

    // -- convolution -------------------------------------------------------

    /// `x` [N,C,H,W] * kernel [F,C,kh,kw] with zero padding.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
        let xs = shape4("conv2d", self.nodes[x.0].value.shape())?;
        let ws = shape4("conv2d", self.nodes[w.0].value.shape())?;
        if xs[1] != ws[1] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: xs.to_vec(),
                rhs: ws.to_vec(),
            });
        }
        let oh = kernels::conv2d_out_extent(xs[2], ws[2], stride, pad);
        let ow = kernels::conv2d_out_extent(xs[3], ws[3], stride, pad);
        if oh.is_none() || ow.is_none() {
            return Err(TensorError::NonPositiveOutput {
                op: "conv2d",
                input: xs.to_vec(),
                kernel: ws.to_vec(),
                stride,
                pad,
            });
        }
        let (data, os) = kernels::conv2d_forward(
            self.nodes[x.0].value.data(),
            &xs,
            self.nodes[w.0].value.data(),
            &ws,
            stride,
            pad,
        );
        let value = Tensor::from_vec(&os, data).unwrap();
        Ok(self.push(Op::Conv2d { stride, pad }, vec![x, w], value))
    }

    /// Fractionally strided (transposed) convolution: `x` [N,Cin,H,W] with
    /// kernel [Cin,Cout,kh,kw]. Output extent is
    /// `(H-1)*stride - 2*pad + kh + out_pad`. Defined as the gradient of
    /// `conv2d` with respect to its input and computed by the same kernel, so
    /// the two agree bit-for-bit.
    pub fn conv2d_transpose(
        &mut self,
        x: NodeId,
        w: NodeId,
        stride: usize,
        pad: usize,
        out_pad: usize,
    ) -> Result<NodeId> {
        let xs = shape4("conv2d_transpose", self.nodes[x.0].value.shape())?;
        let ws = shape4("conv2d_transpose", self.nodes[w.0].value.shape())?;
        if xs[1] != ws[0] || stride < 1 || out_pad >= stride {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d_transpose",
                lhs: xs.to_vec(),
                rhs: ws.to_vec(),
            });
        }
        let oh = (xs[2] - 1) * stride + ws[2] + out_pad;
        let ow = (xs[3] - 1) * stride + ws[3] + out_pad;
        if oh <= 2 * pad || ow <= 2 * pad {
            return Err(TensorError::NonPositiveOutput {
                op: "conv2d_transpose",
                input: xs.to_vec(),
                kernel: ws.to_vec(),
                stride,
                pad,
            });
        }
        let (oh, ow) = (oh - 2 * pad, ow - 2 * pad);
        // Kernel layout for the underlying adjoint: [F=Cin, C=Cout, kh, kw].
        let gs = xs;
        let adjoint_ws = [ws[0], ws[1], ws[2], ws[3]];
        let data = kernels::conv2d_input_grad(
            self.nodes[x.0].value.data(),
            &gs,
            self.nodes[w.0].value.data(),
            &adjoint_ws,
            stride,
            pad,
            oh,
            ow,
        );
        let value = Tensor::from_vec(&[xs[0], ws[1], oh, ow], data).unwrap();
        Ok(self.push(Op::ConvTranspose2d { stride, pad, out_pad }, vec![x, w], value))
    }

    // -- reductions & shape ------------------------------------------------

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let s = kernels::sum_all(self.nodes[x.0].value.data());
        self.push(Op::SumAll, vec![x], Tensor::scalar(s))
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let n = self.nodes[x.0].value.numel() as f64;
        let s = self.sum_all(x);
        self.mul_scalar(s, 1.0 / n)
    }

    /// Mean over all axes except the channel axis of a rank-2/rank-4 tensor.
    pub fn mean_channels(&mut self, x: NodeId) -> Result<NodeId> {
        let rank = self.nodes[x.0].value.rank();
        if rank != 2 && rank != 4 {
            return Err(TensorError::RankMismatch {
                op: "mean_channels",
                expected: 2,
                shape: self.nodes[x.0].value.shape().to_vec(),
            });
        }
        let value = kernels::mean_channels(&self.nodes[x.0].value);
        Ok(self.push(Op::MeanChannels, vec![x], value))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let value = self.nodes[x.0].value.reshaped(shape)?;
        Ok(self.push(Op::Reshape, vec![x], value))
    }

    /// Concatenate two rank-2 tensors along axis 1.
    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ashape, bshape) = (self.nodes[a.0].value.shape(), self.nodes[b.0].value.shape());
        if ashape.len() != 2 || bshape.len() != 2 || ashape[0] != bshape[0] {
            return Err(TensorError::ShapeMismatch {
                op: "concat_cols",
                lhs: ashape.to_vec(),
                rhs: bshape.to_vec(),
            });
        }
        let (n, ca, cb) = (ashape[0], ashape[1], bshape[1]);
        let mut data = Vec::with_capacity(n * (ca + cb));
        let (ad, bd) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
        for i in 0..n {
            data.extend_from_slice(&ad[i * ca..(i + 1) * ca]);
            data.extend_from_slice(&bd[i * cb..(i + 1) * cb]);
        }
        let value = Tensor::from_vec(&[n, ca + cb], data).unwrap();
        Ok(self.push(Op::ConcatCols, vec![a, b], value))
    }

    // -- reverse sweep -----------------------------------------------------

    /// Populate gradients for every grad-requiring node reachable from
    /// `root`. All stale gradients are cleared first, so repeated calls on
    /// the same graph produce identical results.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        if !self.nodes[root.0].value.is_scalar() {
            return Err(TensorError::NotScalar {
                shape: self.nodes[root.0].value.shape().to_vec(),
            });
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        let root_shape = self.nodes[root.0].value.shape().to_vec();
        self.nodes[root.0].grad = Some(Tensor::ones(&root_shape));

        for i in (0..=root.0).rev() {
            if self.nodes[i].grad.is_none() || !self.nodes[i].requires_grad {
                continue;
            }
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            let g = node.grad.as_ref().unwrap().clone();
            match &node.op {
                Op::Leaf | Op::StopGradient => {}
                Op::Add(_) => {
                    accumulate_reduced(before, node.inputs[0], &g);
                    accumulate_reduced(before, node.inputs[1], &g);
                }
                Op::Sub(_) => {
                    accumulate_reduced(before, node.inputs[0], &g);
                    let neg = g.map(|v| -v);
                    accumulate_reduced(before, node.inputs[1], &neg);
                }
                Op::Mul(_) => {
                    let (a, b) = (node.inputs[0], node.inputs[1]);
                    if before[a.0].requires_grad {
                        let da = broadcast_apply(&g, &before[b.0].value, |gv, bv| gv * bv);
                        accumulate_reduced(before, a, &da);
                    }
                    if before[b.0].requires_grad {
                        let db = broadcast_apply(&g, &before[a.0].value, |gv, av| gv * av);
                        accumulate_reduced(before, b, &db);
                    }
                }
                Op::Div(_) => {
                    let (a, b) = (node.inputs[0], node.inputs[1]);
                    if before[a.0].requires_grad {
                        let da = broadcast_apply(&g, &before[b.0].value, |gv, bv| gv / bv);
                        accumulate_reduced(before, a, &da);
                    }
                    if before[b.0].requires_grad {
                        let ga = broadcast_apply(&g, &before[a.0].value, |gv, av| gv * av);
                        let db = broadcast_apply(&ga, &before[b.0].value, |gv, bv| -gv / (bv * bv));
                        accumulate_reduced(before, b, &db);
                    }
                }
                Op::Neg => accumulate_map(before, node.inputs[0], &g, |gv, _, _| -gv, node),
                Op::Exp => accumulate_map(before, node.inputs[0], &g, |gv, _, yv| gv * yv, node),
                Op::Ln => accumulate_map(before, node.inputs[0], &g, |gv, xv, _| gv / xv, node),
                Op::Sqrt => accumulate_map(before, node.inputs[0], &g, |gv, _, yv| gv * 0.5 / yv, node),
                Op::Relu => accumulate_map(
                    before,
                    node.inputs[0],
                    &g,
                    |gv, xv, _| if xv > 0.0 { gv } else { 0.0 },
                    node,
                ),
                Op::Tanh => accumulate_map(before, node.inputs[0], &g, |gv, _, yv| gv * (1.0 - yv * yv), node),
                Op::Sigmoid => {
                    accumulate_map(before, node.inputs[0], &g, |gv, _, yv| gv * yv * (1.0 - yv), node)
                }
                Op::Clamp { lo, hi } => {
                    let (lo, hi) = (*lo, *hi);
                    accumulate_map(
                        before,
                        node.inputs[0],
                        &g,
                        move |gv, xv, _| if xv >= lo && xv <= hi { gv } else { 0.0 },
                        node,
                    )
                }
                Op::AddScalar(_) => accumulate_map(before, node.inputs[0], &g, |gv, _, _| gv, node),
                Op::MulScalar(c) => {
                    let c = *c;
                    accumulate_map(before, node.inputs[0], &g, move |gv, _, _| gv * c, node)
                }
                Op::Matmul => {
                    let (a, b) = (node.inputs[0], node.inputs[1]);
                    let (m, k) = (before[a.0].value.shape()[0], before[a.0].value.shape()[1]);
                    let n = before[b.0].value.shape()[1];
                    if before[a.0].requires_grad {
                        let da = kernels::matmul_nt(g.data(), m, n, before[b.0].value.data(), k);
                        accumulate(before, a, Tensor::from_vec(&[m, k], da).unwrap());
                    }
                    if before[b.0].requires_grad {
                        let db = kernels::matmul_tn(before[a.0].value.data(), m, k, g.data(), n);
                        accumulate(before, b, Tensor::from_vec(&[k, n], db).unwrap());
                    }
                }
                Op::Conv2d { stride, pad } => {
                    let (stride, pad) = (*stride, *pad);
                    let (x, w) = (node.inputs[0], node.inputs[1]);
                    let xs = shape4_unchecked(before[x.0].value.shape());
                    let ws = shape4_unchecked(before[w.0].value.shape());
                    let gs = shape4_unchecked(node.value.shape());
                    if before[x.0].requires_grad {
                        let dx = kernels::conv2d_input_grad(
                            g.data(),
                            &gs,
                            before[w.0].value.data(),
                            &ws,
                            stride,
                            pad,
                            xs[2],
                            xs[3],
                        );
                        accumulate(before, x, Tensor::from_vec(&xs, dx).unwrap());
                    }
                    if before[w.0].requires_grad {
                        let dw = kernels::conv2d_kernel_grad(
                            g.data(),
                            &gs,
                            before[x.0].value.data(),
                            &xs,
                            &ws,
                            stride,
                            pad,
                        );
                        accumulate(before, w, Tensor::from_vec(&ws, dw).unwrap());
                    }
                }
                Op::ConvTranspose2d { stride, pad, .. } => {
                    let (stride, pad) = (*stride, *pad);
                    let (x, w) = (node.inputs[0], node.inputs[1]);
                    let xs = shape4_unchecked(before[x.0].value.shape());
                    let ws = shape4_unchecked(before[w.0].value.shape());
                    let gs = shape4_unchecked(node.value.shape());
                    if before[x.0].requires_grad {
                        // Adjoint of the adjoint: a plain strided convolution.
                        let (dx, os) =
                            kernels::conv2d_forward(g.data(), &gs, before[w.0].value.data(), &ws, stride, pad);
                        debug_assert_eq!(os, xs);
                        accumulate(before, x, Tensor::from_vec(&os, dx).unwrap());
                    }
                    if before[w.0].requires_grad {
                        // Same contraction as conv2d's kernel gradient with the
                        // roles of input and incoming gradient exchanged.
                        let dw = kernels::conv2d_kernel_grad(
                            before[x.0].value.data(),
                            &xs,
                            g.data(),
                            &gs,
                            &ws,
                            stride,
                            pad,
                        );
                        accumulate(before, w, Tensor::from_vec(&ws, dw).unwrap());
                    }
                }
                Op::SumAll => {
                    let x = node.inputs[0];
                    let shape = before[x.0].value.shape().to_vec();
                    accumulate(before, x, Tensor::filled(&shape, g.item()));
                }
                Op::MeanChannels => {
                    let x = node.inputs[0];
                    let d = kernels::mean_channels_grad(&g, before[x.0].value.shape());
                    accumulate(before, x, d);
                }
                Op::Reshape => {
                    let x = node.inputs[0];
                    let shape = before[x.0].value.shape().to_vec();
                    accumulate(before, x, g.reshaped(&shape).unwrap());
                }
                Op::ConcatCols => {
                    let (a, b) = (node.inputs[0], node.inputs[1]);
                    let ca = before[a.0].value.shape()[1];
                    let cb = before[b.0].value.shape()[1];
                    let n = before[a.0].value.shape()[0];
                    let gd = g.data();
                    if before[a.0].requires_grad {
                        let mut da = Vec::with_capacity(n * ca);
                        for i in 0..n {
                            da.extend_from_slice(&gd[i * (ca + cb)..i * (ca + cb) + ca]);
                        }
                        accumulate(before, a, Tensor::from_vec(&[n, ca], da).unwrap());
                    }
                    if before[b.0].requires_grad {
                        let mut db = Vec::with_capacity(n * cb);
                        for i in 0..n {
                            db.extend_from_slice(&gd[i * (ca + cb) + ca..(i + 1) * (ca + cb)]);
                        }
                        accumulate(before, b, Tensor::from_vec(&[n, cb], db).unwrap());
                    }
                }
            }
        }
        Ok(())
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn shape4(op: &'static str, shape: &[usize]) -> Result<[usize; 4]> {
    if shape.len() != 4 {
        return Err(TensorError::RankMismatch {
            op,
            expected: 4,
            shape: shape.to_vec(),
        });
    }
    Ok([shape[0], shape[1], shape[2], shape[3]])
}

fn shape4_unchecked(shape: &[usize]) -> [usize; 4] {
    [shape[0], shape[1], shape[2], shape[3]]
}

fn accumulate(nodes: &mut [Node], target: NodeId, delta: Tensor) {
    if !nodes[target.0].requires_grad {
        return;
    }
    match &mut nodes[target.0].grad {
        Some(t) => {
            for (o, d) in t.data_mut().iter_mut().zip(delta.data()) {
                *o += d;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

/// Accumulate `g`, reduced over broadcast axes, into a binary operand.
fn accumulate_reduced(nodes: &mut [Node], target: NodeId, g: &Tensor) {
    if !nodes[target.0].requires_grad {
        return;
    }
    let reduced = kernels::reduce_to_shape(g, &nodes[target.0].value.shape().to_vec());
    accumulate(nodes, target, reduced);
}

/// Combine a full-shape gradient with a (possibly smaller) operand value.
fn broadcast_apply(g: &Tensor, operand: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let (_, bc) = kernels::resolve_broadcast("backward", g.shape(), operand.shape())
        .expect("forward already resolved this broadcast");
    kernels::binary_map(g, operand, bc, f)
}

/// Unary backward: delta[i] = f(g[i], x[i], y[i]).
fn accumulate_map(
    nodes: &mut [Node],
    target: NodeId,
    g: &Tensor,
    f: impl Fn(f64, f64, f64) -> f64,
    node: &Node,
) {
    if !nodes[target.0].requires_grad {
        return;
    }
    let x = nodes[target.0].value.data();
    let y = node.value.data();
    let data: Vec<f64> = g
        .data()
        .iter()
        .zip(x.iter().zip(y))
        .map(|(&gv, (&xv, &yv))| f(gv, xv, yv))
        .collect();
    let delta = Tensor::from_vec(&g.shape().to_vec(), data).unwrap();
    accumulate(nodes, target, delta);
}
