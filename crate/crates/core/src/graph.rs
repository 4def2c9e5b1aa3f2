//! Tape-based reverse-mode automatic differentiation.
//!
//! Nodes are appended in topological order; `backward` walks the tape in
//! reverse and accumulates gradients. Parameters are persistent leaves at
//! the front of the tape; `reset` truncates everything built after
//! `mark_persistent`, so a training loop rebuilds only the forward pass.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Conv3d {
        input: NodeId,
        kernel: NodeId,
        stride: [usize; 3],
        pad: [usize; 3],
    },
    Conv2d {
        input: NodeId,
        kernel: NodeId,
        stride: [usize; 2],
        pad: [usize; 2],
        dilation: [usize; 2],
    },
    MatMul {
        a: NodeId,
        b: NodeId,
    },
    Transpose2d {
        x: NodeId,
    },
    MatVec {
        m: NodeId,
        v: NodeId,
    },
    /// out[j] = sum_i m[i,j] * v[i]
    TMatVec {
        m: NodeId,
        v: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Sub {
        a: NodeId,
        b: NodeId,
    },
    /// Column-broadcast bias: out[a,r] = m[a,r] + b[a].
    AddBiasCols {
        m: NodeId,
        b: NodeId,
    },
    ScaleConst {
        x: NodeId,
        c: f64,
    },
    /// out = s * x with s a scalar node (shape [1]).
    MulScalar {
        s: NodeId,
        x: NodeId,
    },
    LeakyRelu {
        x: NodeId,
        slope: f64,
    },
    Tanh {
        x: NodeId,
    },
    Softmax {
        x: NodeId,
        axis: usize,
    },
    MaxPool2d {
        x: NodeId,
        argmax: Vec<usize>,
    },
    AvgPool2d {
        x: NodeId,
    },
    Concat {
        inputs: Vec<NodeId>,
        axis: usize,
    },
    /// Stack R vectors of length F into an [F, R] matrix (vectors as columns).
    StackCols {
        inputs: Vec<NodeId>,
    },
    /// Remove `axis`, keeping slice `index` of it.
    SliceAxis {
        x: NodeId,
        axis: usize,
        index: usize,
    },
    Reshape {
        x: NodeId,
    },
    Sum {
        x: NodeId,
    },
    SumSq {
        x: NodeId,
    },
    Abs {
        x: NodeId,
    },
}

struct Node {
    value: Tensor,
    grad: Tensor,
    op: Op,
}

pub struct Graph {
    nodes: Vec<Node>,
    n_persistent: usize,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn conv_out_extent(input: usize, k_eff: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = input + 2 * pad;
    if k_eff > padded {
        return Err(Error::Dimension(format!(
            "kernel extent {k_eff} exceeds padded input extent {padded}"
        )));
    }
    Ok((padded - k_eff) / stride + 1)
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            n_persistent: 0,
        }
    }

    /// Insert a leaf (input or parameter).
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        let grad = Tensor::zeros(value.shape());
        self.nodes.push(Node {
            value,
            grad,
            op: Op::Leaf,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Freeze the current tape prefix: `reset` keeps these nodes.
    pub fn mark_persistent(&mut self) {
        self.n_persistent = self.nodes.len();
    }

    /// Drop everything built after `mark_persistent`.
    pub fn reset(&mut self) {
        self.nodes.truncate(self.n_persistent);
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

    pub fn value_mut(&mut self, id: NodeId) -> &mut Tensor {
        &mut self.nodes[id.0].value
    }

    pub fn set_value(&mut self, id: NodeId, t: Tensor) -> Result<()> {
        if t.shape() != self.nodes[id.0].value.shape() {
            return Err(Error::Dimension(format!(
                "set_value shape {:?} != node shape {:?}",
                t.shape(),
                self.nodes[id.0].value.shape()
            )));
        }
        self.nodes[id.0].value = t;
        Ok(())
    }

    pub fn grad(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].grad
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad.fill(0.0);
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        let grad = Tensor::zeros(value.shape());
        self.nodes.push(Node { value, grad, op });
        NodeId(self.nodes.len() - 1)
    }

    // ── forward ops ──────────────────────────────────────────────────

    pub fn conv3d(
        &mut self,
        input: NodeId,
        kernel: NodeId,
        stride: (usize, usize, usize),
        pad: (usize, usize, usize),
    ) -> Result<NodeId> {
        let value = conv3d_forward(
            self.value(input),
            self.value(kernel),
            [stride.0, stride.1, stride.2],
            [pad.0, pad.1, pad.2],
        )?;
        Ok(self.push(
            value,
            Op::Conv3d {
                input,
                kernel,
                stride: [stride.0, stride.1, stride.2],
                pad: [pad.0, pad.1, pad.2],
            },
        ))
    }

    pub fn conv2d(
        &mut self,
        input: NodeId,
        kernel: NodeId,
        stride: (usize, usize),
        pad: (usize, usize),
        dilation: (usize, usize),
    ) -> Result<NodeId> {
        let value = conv2d_forward(
            self.value(input),
            self.value(kernel),
            [stride.0, stride.1],
            [pad.0, pad.1],
            [dilation.0, dilation.1],
        )?;
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                stride: [stride.0, stride.1],
                pad: [pad.0, pad.1],
                dilation: [dilation.0, dilation.1],
            },
        ))
    }

    /// 1x1 convolution over an [C, M] feature map: weight[C', C] · input[C, M].
    pub fn one_by_one_conv(&mut self, input: NodeId, weight: NodeId) -> Result<NodeId> {
        self.matmul(weight, input)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.ndim() != 2 || bv.ndim() != 2 {
            return Err(Error::Dimension("matmul wants 2-d operands".into()));
        }
        if av.shape()[1] != bv.shape()[0] {
            return Err(Error::Dimension(format!(
                "matmul {:?} x {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let value = matmul_raw(av, bv);
        Ok(self.push(value, Op::MatMul { a, b }))
    }

    pub fn transpose2d(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.ndim() != 2 {
            return Err(Error::Dimension("transpose2d wants a 2-d tensor".into()));
        }
        let value = transpose_raw(xv);
        Ok(self.push(value, Op::Transpose2d { x }))
    }

    pub fn matvec(&mut self, m: NodeId, v: NodeId) -> Result<NodeId> {
        let (mv, vv) = (self.value(m), self.value(v));
        if mv.ndim() != 2 || vv.ndim() != 1 || mv.shape()[1] != vv.shape()[0] {
            return Err(Error::Dimension(format!(
                "matvec {:?} x {:?}",
                mv.shape(),
                vv.shape()
            )));
        }
        let (rows, cols) = (mv.shape()[0], mv.shape()[1]);
        let mut out = vec![0.0; rows];
        for i in 0..rows {
            let mut s = 0.0;
            for j in 0..cols {
                s += mv.data()[i * cols + j] * vv.data()[j];
            }
            out[i] = s;
        }
        Ok(self.push(Tensor::from_vec(out), Op::MatVec { m, v }))
    }

    pub fn tmatvec(&mut self, m: NodeId, v: NodeId) -> Result<NodeId> {
        let (mv, vv) = (self.value(m), self.value(v));
        if mv.ndim() != 2 || vv.ndim() != 1 || mv.shape()[0] != vv.shape()[0] {
            return Err(Error::Dimension(format!(
                "tmatvec {:?} x {:?}",
                mv.shape(),
                vv.shape()
            )));
        }
        let (rows, cols) = (mv.shape()[0], mv.shape()[1]);
        let mut out = vec![0.0; cols];
        for j in 0..cols {
            let mut s = 0.0;
            for i in 0..rows {
                s += mv.data()[i * cols + j] * vv.data()[i];
            }
            out[j] = s;
        }
        Ok(self.push(Tensor::from_vec(out), Op::TMatVec { m, v }))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Dimension(format!(
                "add {:?} + {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let mut value = self.value(a).clone();
        value.add_scaled(1.0, self.value(b));
        Ok(self.push(value, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Dimension(format!(
                "sub {:?} - {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let mut value = self.value(a).clone();
        value.add_scaled(-1.0, self.value(b));
        Ok(self.push(value, Op::Sub { a, b }))
    }

    pub fn add_bias_cols(&mut self, m: NodeId, b: NodeId) -> Result<NodeId> {
        let (mv, bv) = (self.value(m), self.value(b));
        if mv.ndim() != 2 || bv.ndim() != 1 || mv.shape()[0] != bv.shape()[0] {
            return Err(Error::Dimension(format!(
                "add_bias_cols {:?} + {:?}",
                mv.shape(),
                bv.shape()
            )));
        }
        let (rows, cols) = (mv.shape()[0], mv.shape()[1]);
        let mut out = mv.clone();
        for i in 0..rows {
            for j in 0..cols {
                out.data_mut()[i * cols + j] += bv.data()[i];
            }
        }
        Ok(self.push(out, Op::AddBiasCols { m, b }))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let mut value = self.value(x).clone();
        value.data_mut().iter_mut().for_each(|v| *v *= c);
        self.push(value, Op::ScaleConst { x, c })
    }

    pub fn mul_scalar(&mut self, s: NodeId, x: NodeId) -> Result<NodeId> {
        if !self.value(s).is_scalar() {
            return Err(Error::Dimension("mul_scalar: s must be a scalar".into()));
        }
        let sv = self.value(s).data()[0];
        let mut value = self.value(x).clone();
        value.data_mut().iter_mut().for_each(|v| *v *= sv);
        Ok(self.push(value, Op::MulScalar { s, x }))
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: f64) -> NodeId {
        let mut value = self.value(x).clone();
        value
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = if *v >= 0.0 { *v } else { slope * *v });
        self.push(value, Op::LeakyRelu { x, slope })
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let mut value = self.value(x).clone();
        value.data_mut().iter_mut().for_each(|v| *v = v.tanh());
        self.push(value, Op::Tanh { x })
    }

    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let xv = self.value(x);
        if axis >= xv.ndim() {
            return Err(Error::Argument(format!(
                "softmax axis {axis} out of range for shape {:?}",
                xv.shape()
            )));
        }
        if xv.has_nan() {
            return Err(Error::Numeric("softmax on NaN input".into()));
        }
        let value = softmax_raw(xv, axis);
        Ok(self.push(value, Op::Softmax { x, axis }))
    }

    /// 2x2 max pooling with stride 2 on [C, H, W].
    pub fn maxpool2d(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.ndim() != 3 {
            return Err(Error::Dimension("maxpool2d wants [C,H,W]".into()));
        }
        let (c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        if h < 2 || w < 2 {
            return Err(Error::Dimension(format!(
                "maxpool2d input {h}x{w} too small"
            )));
        }
        let (oh, ow) = (h / 2, w / 2);
        let mut out = vec![0.0; c * oh * ow];
        let mut argmax = vec![0usize; c * oh * ow];
        for ci in 0..c {
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0;
                    for di in 0..2 {
                        for dj in 0..2 {
                            let idx = (ci * h + 2 * i + di) * w + 2 * j + dj;
                            if xv.data()[idx] > best {
                                best = xv.data()[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    let o = (ci * oh + i) * ow + j;
                    out[o] = best;
                    argmax[o] = best_idx;
                }
            }
        }
        let value = Tensor::new(vec![c, oh, ow], out)?;
        Ok(self.push(value, Op::MaxPool2d { x, argmax }))
    }

    /// 2x2 average pooling with stride 2 on [C, H, W].
    pub fn avgpool2d(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.ndim() != 3 {
            return Err(Error::Dimension("avgpool2d wants [C,H,W]".into()));
        }
        let (c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        if h < 2 || w < 2 {
            return Err(Error::Dimension(format!(
                "avgpool2d input {h}x{w} too small"
            )));
        }
        let (oh, ow) = (h / 2, w / 2);
        let mut out = vec![0.0; c * oh * ow];
        for ci in 0..c {
            for i in 0..oh {
                for j in 0..ow {
                    let mut s = 0.0;
                    for di in 0..2 {
                        for dj in 0..2 {
                            s += xv.data()[(ci * h + 2 * i + di) * w + 2 * j + dj];
                        }
                    }
                    out[(ci * oh + i) * ow + j] = s / 4.0;
                }
            }
        }
        let value = Tensor::new(vec![c, oh, ow], out)?;
        Ok(self.push(value, Op::AvgPool2d { x }))
    }

    pub fn concat(&mut self, inputs: &[NodeId], axis: usize) -> Result<NodeId> {
        if inputs.is_empty() {
            return Err(Error::Argument("concat of zero tensors".into()));
        }
        let first = self.value(inputs[0]).shape().to_vec();
        if axis >= first.len() {
            return Err(Error::Argument(format!(
                "concat axis {axis} out of range for shape {first:?}"
            )));
        }
        let mut axis_total = 0;
        for &id in inputs {
            let s = self.value(id).shape();
            if s.len() != first.len() {
                return Err(Error::Dimension("concat rank mismatch".into()));
            }
            for (d, (&a, &b)) in s.iter().zip(first.iter()).enumerate() {
                if d != axis && a != b {
                    return Err(Error::Dimension(format!(
                        "concat extent mismatch at dim {d}: {a} vs {b}"
                    )));
                }
            }
            axis_total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = vec![0.0; out_shape.iter().product()];
        for o in 0..outer {
            let mut offset = 0;
            for &id in inputs {
                let v = self.value(id);
                let len = v.shape()[axis];
                let src = &v.data()[o * len * inner..(o + 1) * len * inner];
                let dst_start = (o * axis_total + offset) * inner;
                out[dst_start..dst_start + len * inner].copy_from_slice(src);
                offset += len;
            }
        }
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        ))
    }

    pub fn stack_cols(&mut self, inputs: &[NodeId]) -> Result<NodeId> {
        if inputs.is_empty() {
            return Err(Error::Argument("stack_cols of zero vectors".into()));
        }
        let f = self.value(inputs[0]).shape().to_vec();
        if f.len() != 1 {
            return Err(Error::Dimension("stack_cols wants 1-d inputs".into()));
        }
        let flen = f[0];
        for &id in inputs {
            if self.value(id).shape() != [flen] {
                return Err(Error::Dimension("stack_cols length mismatch".into()));
            }
        }
        let r = inputs.len();
        let mut out = vec![0.0; flen * r];
        for (c, &id) in inputs.iter().enumerate() {
            for i in 0..flen {
                out[i * r + c] = self.value(id).data()[i];
            }
        }
        let value = Tensor::new(vec![flen, r], out)?;
        Ok(self.push(
            value,
            Op::StackCols {
                inputs: inputs.to_vec(),
            },
        ))
    }

    pub fn slice_axis(&mut self, x: NodeId, axis: usize, index: usize) -> Result<NodeId> {
        let xv = self.value(x);
        if axis >= xv.ndim() {
            return Err(Error::Argument(format!(
                "slice axis {axis} out of range for shape {:?}",
                xv.shape()
            )));
        }
        if index >= xv.shape()[axis] {
            return Err(Error::Argument(format!(
                "slice index {index} out of range for extent {}",
                xv.shape()[axis]
            )));
        }
        let shape = xv.shape().to_vec();
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            let src = (o * len + index) * inner;
            out[o * inner..(o + 1) * inner].copy_from_slice(&xv.data()[src..src + inner]);
        }
        let mut out_shape: Vec<usize> = shape.clone();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push(value, Op::SliceAxis { x, axis, index }))
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let value = self.value(x).reshaped(shape)?;
        Ok(self.push(value, Op::Reshape { x }))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s: f64 = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum { x })
    }

    pub fn sumsq(&mut self, x: NodeId) -> NodeId {
        let s: f64 = self.value(x).data().iter().map(|v| v * v).sum();
        self.push(Tensor::scalar(s), Op::SumSq { x })
    }

    pub fn abs(&mut self, x: NodeId) -> NodeId {
        let mut value = self.value(x).clone();
        value.data_mut().iter_mut().for_each(|v| *v = v.abs());
        self.push(value, Op::Abs { x })
    }

    /// Mean over all entries (sum then scale).
    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Populate gradients of every node reachable from `root`.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        if !self.nodes[root.0].value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward on non-scalar root of shape {:?}",
                self.nodes[root.0].value.shape()
            )));
        }
        self.zero_grad();
        self.nodes[root.0].grad.fill(1.0);
        for id in (0..=root.0).rev() {
            let op = self.nodes[id].op.clone();
            if matches!(op, Op::Leaf) {
                continue;
            }
            let g = self.nodes[id].grad.clone();
            self.backprop_node(id, &op, &g);
        }
        Ok(())
    }

    fn add_grad(&mut self, id: NodeId, t: &Tensor) {
        self.nodes[id.0].grad.add_scaled(1.0, t);
    }

    fn backprop_node(&mut self, id: usize, op: &Op, g: &Tensor) {
        match *op {
            Op::Leaf => {}
            Op::Conv3d {
                input,
                kernel,
                stride,
                pad,
            } => {
                let (dinput, dkernel) =
                    conv3d_backward(self.value(input), self.value(kernel), g, stride, pad);
                self.add_grad(input, &dinput);
                self.add_grad(kernel, &dkernel);
            }
            Op::Conv2d {
                input,
                kernel,
                stride,
                pad,
                dilation,
            } => {
                let (dinput, dkernel) = conv2d_backward(
                    self.value(input),
                    self.value(kernel),
                    g,
                    stride,
                    pad,
                    dilation,
                );
                self.add_grad(input, &dinput);
                self.add_grad(kernel, &dkernel);
            }
            Op::MatMul { a, b } => {
                let bt = transpose_raw(self.value(b));
                let da = matmul_raw(g, &bt);
                let at = transpose_raw(self.value(a));
                let db = matmul_raw(&at, g);
                self.add_grad(a, &da);
                self.add_grad(b, &db);
            }
            Op::Transpose2d { x } => {
                let dx = transpose_raw(g);
                self.add_grad(x, &dx);
            }
            Op::MatVec { m, v } => {
                let mv = self.value(m);
                let vv = self.value(v);
                let (rows, cols) = (mv.shape()[0], mv.shape()[1]);
                let mut dm = Tensor::zeros(mv.shape());
                let mut dv = Tensor::zeros(vv.shape());
                for i in 0..rows {
                    let gi = g.data()[i];
                    for j in 0..cols {
                        dm.data_mut()[i * cols + j] += gi * vv.data()[j];
                        dv.data_mut()[j] += gi * mv.data()[i * cols + j];
                    }
                }
                self.add_grad(m, &dm);
                self.add_grad(v, &dv);
            }
            Op::TMatVec { m, v } => {
                let mv = self.value(m);
                let vv = self.value(v);
                let (rows, cols) = (mv.shape()[0], mv.shape()[1]);
                let mut dm = Tensor::zeros(mv.shape());
                let mut dv = Tensor::zeros(vv.shape());
                for i in 0..rows {
                    for j in 0..cols {
                        let gj = g.data()[j];
                        dm.data_mut()[i * cols + j] += gj * vv.data()[i];
                        dv.data_mut()[i] += gj * mv.data()[i * cols + j];
                    }
                }
                self.add_grad(m, &dm);
                self.add_grad(v, &dv);
            }
            Op::Add { a, b } => {
                self.add_grad(a, g);
                self.add_grad(b, g);
            }
            Op::Sub { a, b } => {
                self.add_grad(a, g);
                let mut neg = g.clone();
                neg.data_mut().iter_mut().for_each(|v| *v = -*v);
                self.add_grad(b, &neg);
            }
            Op::AddBiasCols { m, b } => {
                self.add_grad(m, g);
                let (rows, cols) = (g.shape()[0], g.shape()[1]);
                let mut db = Tensor::zeros(&[rows]);
                for i in 0..rows {
                    let mut s = 0.0;
                    for j in 0..cols {
                        s += g.data()[i * cols + j];
                    }
                    db.data_mut()[i] = s;
                }
                self.add_grad(b, &db);
            }
            Op::ScaleConst { x, c } => {
                let mut dx = g.clone();
                dx.data_mut().iter_mut().for_each(|v| *v *= c);
                self.add_grad(x, &dx);
            }
            Op::MulScalar { s, x } => {
                let sv = self.value(s).data()[0];
                let xv = self.value(x);
                let mut dx = g.clone();
                dx.data_mut().iter_mut().for_each(|v| *v *= sv);
                let ds: f64 = g.data().iter().zip(xv.data()).map(|(a, b)| a * b).sum();
                self.add_grad(x, &dx);
                self.add_grad(s, &Tensor::scalar(ds));
            }
            Op::LeakyRelu { x, slope } => {
                let xv = self.value(x);
                let mut dx = g.clone();
                for (d, &v) in dx.data_mut().iter_mut().zip(xv.data()) {
                    if v < 0.0 {
                        *d *= slope;
                    }
                }
                self.add_grad(x, &dx);
            }
            Op::Tanh { x } => {
                let yv = self.nodes[id].value.clone();
                let mut dx = g.clone();
                for (d, &y) in dx.data_mut().iter_mut().zip(yv.data()) {
                    *d *= 1.0 - y * y;
                }
                self.add_grad(x, &dx);
            }
            Op::Softmax { x, axis } => {
                let y = &self.nodes[id].value;
                let shape = y.shape().to_vec();
                let outer: usize = shape[..axis].iter().product();
                let len = shape[axis];
                let inner: usize = shape[axis + 1..].iter().product();
                let mut dx = Tensor::zeros(&shape);
                for o in 0..outer {
                    for i in 0..inner {
                        let mut dot = 0.0;
                        for l in 0..len {
                            let idx = (o * len + l) * inner + i;
                            dot += g.data()[idx] * y.data()[idx];
                        }
                        for l in 0..len {
                            let idx = (o * len + l) * inner + i;
                            dx.data_mut()[idx] = y.data()[idx] * (g.data()[idx] - dot);
                        }
                    }
                }
                self.add_grad(x, &dx);
            }
            Op::MaxPool2d { x, ref argmax } => {
                let mut dx = Tensor::zeros(self.value(x).shape());
                for (o, &src) in argmax.iter().enumerate() {
                    dx.data_mut()[src] += g.data()[o];
                }
                self.add_grad(x, &dx);
            }
            Op::AvgPool2d { x } => {
                let xv = self.value(x);
                let (c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                let (oh, ow) = (h / 2, w / 2);
                let mut dx = Tensor::zeros(xv.shape());
                for ci in 0..c {
                    for i in 0..oh {
                        for j in 0..ow {
                            let go = g.data()[(ci * oh + i) * ow + j] / 4.0;
                            for di in 0..2 {
                                for dj in 0..2 {
                                    dx.data_mut()[(ci * h + 2 * i + di) * w + 2 * j + dj] += go;
                                }
                            }
                        }
                    }
                }
                self.add_grad(x, &dx);
            }
            Op::Concat { ref inputs, axis } => {
                let shape = self.nodes[id].value.shape().to_vec();
                let outer: usize = shape[..axis].iter().product();
                let total = shape[axis];
                let inner: usize = shape[axis + 1..].iter().product();
                let mut offset = 0;
                for &inp in inputs {
                    let len = self.value(inp).shape()[axis];
                    let mut dx = Tensor::zeros(self.value(inp).shape());
                    for o in 0..outer {
                        let src = (o * total + offset) * inner;
                        dx.data_mut()[o * len * inner..(o + 1) * len * inner]
                            .copy_from_slice(&g.data()[src..src + len * inner]);
                    }
                    self.add_grad(inp, &dx);
                    offset += len;
                }
            }
            Op::StackCols { ref inputs } => {
                let r = inputs.len();
                let flen = g.shape()[0];
                for (c, &inp) in inputs.iter().enumerate() {
                    let mut dx = Tensor::zeros(&[flen]);
                    for i in 0..flen {
                        dx.data_mut()[i] = g.data()[i * r + c];
                    }
                    self.add_grad(inp, &dx);
                }
            }
            Op::SliceAxis { x, axis, index } => {
                let xv_shape = self.value(x).shape().to_vec();
                let outer: usize = xv_shape[..axis].iter().product();
                let len = xv_shape[axis];
                let inner: usize = xv_shape[axis + 1..].iter().product();
                let mut dx = Tensor::zeros(&xv_shape);
                for o in 0..outer {
                    let dst = (o * len + index) * inner;
                    dx.data_mut()[dst..dst + inner]
                        .copy_from_slice(&g.data()[o * inner..(o + 1) * inner]);
                }
                self.add_grad(x, &dx);
            }
            Op::Reshape { x } => {
                let dx = g.reshaped(self.value(x).shape().to_vec()).unwrap();
                self.add_grad(x, &dx);
            }
            Op::Sum { x } => {
                let dx = Tensor::filled(self.value(x).shape(), g.data()[0]);
                self.add_grad(x, &dx);
            }
            Op::SumSq { x } => {
                let xv = self.value(x);
                let g0 = g.data()[0];
                let mut dx = xv.clone();
                dx.data_mut().iter_mut().for_each(|v| *v *= 2.0 * g0);
                self.add_grad(x, &dx);
            }
            Op::Abs { x } => {
                let xv = self.value(x);
                let mut dx = g.clone();
                for (d, &v) in dx.data_mut().iter_mut().zip(xv.data()) {
                    if v < 0.0 {
                        *d = -*d;
                    } else if v == 0.0 {
                        *d = 0.0;
                    }
                }
                self.add_grad(x, &dx);
            }
        }
    }
}

// ── raw kernels ──────────────────────────────────────────────────────

pub(crate) fn matmul_raw(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a.data()[i * k + p] * b.data()[p * n + j];
            }
            out[i * n + j] = s;
        }
    }
    Tensor::new(vec![m, n], out).unwrap()
}

pub(crate) fn transpose_raw(x: &Tensor) -> Tensor {
    let (m, n) = (x.shape()[0], x.shape()[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = x.data()[i * n + j];
        }
    }
    Tensor::new(vec![n, m], out).unwrap()
}

/// Numerically-stable softmax along `axis` (max subtraction per lane).
pub(crate) fn softmax_raw(x: &Tensor, axis: usize) -> Tensor {
    let shape = x.shape().to_vec();
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out = Tensor::zeros(&shape);
    for o in 0..outer {
        for i in 0..inner {
            let mut mx = f64::NEG_INFINITY;
            for l in 0..len {
                mx = mx.max(x.data()[(o * len + l) * inner + i]);
            }
            let mut denom = 0.0;
            for l in 0..len {
                let e = (x.data()[(o * len + l) * inner + i] - mx).exp();
                out.data_mut()[(o * len + l) * inner + i] = e;
                denom += e;
            }
            for l in 0..len {
                out.data_mut()[(o * len + l) * inner + i] /= denom;
            }
        }
    }
    out
}

fn conv3d_forward(
    input: &Tensor,
    kernel: &Tensor,
    stride: [usize; 3],
    pad: [usize; 3],
) -> Result<Tensor> {
    if input.ndim() != 4 || kernel.ndim() != 5 {
        return Err(Error::Dimension(
            "conv3d wants input [C,T,H,W], kernel [Co,Ci,kT,kH,kW]".into(),
        ));
    }
    if stride.iter().any(|&s| s < 1) {
        return Err(Error::Argument("conv3d stride must be >= 1".into()));
    }
    let (ci, t, h, w) = (
        input.shape()[0],
        input.shape()[1],
        input.shape()[2],
        input.shape()[3],
    );
    let (co, kci, kt, kh, kw) = (
        kernel.shape()[0],
        kernel.shape()[1],
        kernel.shape()[2],
        kernel.shape()[3],
        kernel.shape()[4],
    );
    if kci != ci {
        return Err(Error::Dimension(format!(
            "conv3d channel mismatch: input {ci}, kernel {kci}"
        )));
    }
    let ot = conv_out_extent(t, kt, stride[0], pad[0])?;
    let oh = conv_out_extent(h, kh, stride[1], pad[1])?;
    let ow = conv_out_extent(w, kw, stride[2], pad[2])?;
    let mut out = vec![0.0; co * ot * oh * ow];
    let idata = input.data();
    let kdata = kernel.data();
    // padded taps are skipped via precomputed valid ranges; the remaining
    // accumulation order (ic, dt, dh, dw) is load-bearing for bit-exact
    // comparison against dense reference implementations
    for oc in 0..co {
        for zt in 0..ot {
            let t0 = zt * stride[0];
            let (dt0, dt1) = tap_range(t0, pad[0], kt, t);
            for zh in 0..oh {
                let h0 = zh * stride[1];
                let (dh0, dh1) = tap_range(h0, pad[1], kh, h);
                for zw in 0..ow {
                    let w0 = zw * stride[2];
                    let (dw0, dw1) = tap_range(w0, pad[2], kw, w);
                    let iw = w0 + dw0 - pad[2];
                    let len = dw1 - dw0;
                    let mut s = 0.0;
                    for ic in 0..ci {
                        for dt in dt0..dt1 {
                            let it = t0 + dt - pad[0];
                            for dh in dh0..dh1 {
                                let ih = h0 + dh - pad[1];
                                let ibase = ((ic * t + it) * h + ih) * w + iw;
                                let kbase = (((oc * ci + ic) * kt + dt) * kh + dh) * kw + dw0;
                                s = kdata[kbase..kbase + len]
                                    .iter()
                                    .zip(&idata[ibase..ibase + len])
                                    .fold(s, |a, (k, i)| a + k * i);
                            }
                        }
                    }
                    out[((oc * ot + zt) * oh + zh) * ow + zw] = s;
                }
            }
        }
    }
    Tensor::new(vec![co, ot, oh, ow], out)
}

/// Valid kernel tap range [d0, d1) so that origin + d - pad lands in
/// [0, extent); empty when d0 >= d1.
#[inline]
fn tap_range(origin: usize, pad: usize, k: usize, extent: usize) -> (usize, usize) {
    let d0 = pad.saturating_sub(origin);
    let d1 = k.min((extent + pad).saturating_sub(origin));
    (d0, d1.max(d0))
}

/// As `tap_range` but for dilated taps: origin + d*dilation - pad must
/// land in [0, extent).
#[inline]
fn dilated_tap_range(
    origin: usize,
    pad: usize,
    k: usize,
    extent: usize,
    dilation: usize,
) -> (usize, usize) {
    let d0 = pad.saturating_sub(origin).div_ceil(dilation);
    let d1 = k.min((extent + pad).saturating_sub(origin).div_ceil(dilation));
    (d0, d1.max(d0))
}

fn conv3d_backward(
    input: &Tensor,
    kernel: &Tensor,
    g: &Tensor,
    stride: [usize; 3],
    pad: [usize; 3],
) -> (Tensor, Tensor) {
    let (ci, t, h, w) = (
        input.shape()[0],
        input.shape()[1],
        input.shape()[2],
        input.shape()[3],
    );
    let (co, kt, kh, kw) = (
        kernel.shape()[0],
        kernel.shape()[2],
        kernel.shape()[3],
        kernel.shape()[4],
    );
    let (ot, oh, ow) = (g.shape()[1], g.shape()[2], g.shape()[3]);
    let mut dinput = Tensor::zeros(input.shape());
    let mut dkernel = Tensor::zeros(kernel.shape());
    let idata = input.data();
    let kdata = kernel.data();
    let di = dinput.data_mut();
    let dk = dkernel.data_mut();
    for oc in 0..co {
        for zt in 0..ot {
            let t0 = zt * stride[0];
            let (dt0, dt1) = tap_range(t0, pad[0], kt, t);
            for zh in 0..oh {
                let h0 = zh * stride[1];
                let (dh0, dh1) = tap_range(h0, pad[1], kh, h);
                for zw in 0..ow {
                    let go = g.data()[((oc * ot + zt) * oh + zh) * ow + zw];
                    if go == 0.0 {
                        continue;
                    }
                    let w0 = zw * stride[2];
                    let (dw0, dw1) = tap_range(w0, pad[2], kw, w);
                    let iw = w0 + dw0 - pad[2];
                    let len = dw1 - dw0;
                    for ic in 0..ci {
                        for dt in dt0..dt1 {
                            let it = t0 + dt - pad[0];
                            for dh in dh0..dh1 {
                                let ih = h0 + dh - pad[1];
                                let ibase = ((ic * t + it) * h + ih) * w + iw;
                                let kbase = (((oc * ci + ic) * kt + dt) * kh + dh) * kw + dw0;
                                for j in 0..len {
                                    di[ibase + j] += go * kdata[kbase + j];
                                    dk[kbase + j] += go * idata[ibase + j];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (dinput, dkernel)
}

fn conv2d_forward(
    input: &Tensor,
    kernel: &Tensor,
    stride: [usize; 2],
    pad: [usize; 2],
    dilation: [usize; 2],
) -> Result<Tensor> {
    if input.ndim() != 3 || kernel.ndim() != 4 {
        return Err(Error::Dimension(
            "conv2d wants input [C,H,W], kernel [Co,Ci,kH,kW]".into(),
        ));
    }
    if stride.iter().any(|&s| s < 1) {
        return Err(Error::Argument("conv2d stride must be >= 1".into()));
    }
    if dilation.iter().any(|&d| d < 1) {
        return Err(Error::Argument("conv2d dilation must be >= 1".into()));
    }
    let (ci, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (co, kci, kh, kw) = (
        kernel.shape()[0],
        kernel.shape()[1],
        kernel.shape()[2],
        kernel.shape()[3],
    );
    if kci != ci {
        return Err(Error::Dimension(format!(
            "conv2d channel mismatch: input {ci}, kernel {kci}"
        )));
    }
    let keh = (kh - 1) * dilation[0] + 1;
    let kew = (kw - 1) * dilation[1] + 1;
    let oh = conv_out_extent(h, keh, stride[0], pad[0])?;
    let ow = conv_out_extent(w, kew, stride[1], pad[1])?;
    let mut out = vec![0.0; co * oh * ow];
    let idata = input.data();
    let kdata = kernel.data();
    for oc in 0..co {
        for zh in 0..oh {
            let h0 = zh * stride[0];
            let (dh0, dh1) = dilated_tap_range(h0, pad[0], kh, h, dilation[0]);
            for zw in 0..ow {
                let w0 = zw * stride[1];
                let (dw0, dw1) = dilated_tap_range(w0, pad[1], kw, w, dilation[1]);
                let mut s = 0.0;
                for ic in 0..ci {
                    for dh in dh0..dh1 {
                        let ih = h0 + dh * dilation[0] - pad[0];
                        let ibase = (ic * h + ih) * w;
                        let kbase = ((oc * ci + ic) * kh + dh) * kw;
                        for dw in dw0..dw1 {
                            let iw = w0 + dw * dilation[1] - pad[1];
                            s += idata[ibase + iw] * kdata[kbase + dw];
                        }
                    }
                }
                out[(oc * oh + zh) * ow + zw] = s;
            }
        }
    }
    Tensor::new(vec![co, oh, ow], out)
}

fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    g: &Tensor,
    stride: [usize; 2],
    pad: [usize; 2],
    dilation: [usize; 2],
) -> (Tensor, Tensor) {
    let (ci, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (co, kh, kw) = (kernel.shape()[0], kernel.shape()[2], kernel.shape()[3]);
    let (oh, ow) = (g.shape()[1], g.shape()[2]);
    let mut dinput = Tensor::zeros(input.shape());
    let mut dkernel = Tensor::zeros(kernel.shape());
    let idata = input.data();
    let kdata = kernel.data();
    let di = dinput.data_mut();
    let dk = dkernel.data_mut();
    for oc in 0..co {
        for zh in 0..oh {
            for zw in 0..ow {
                let go = g.data()[(oc * oh + zh) * ow + zw];
                if go == 0.0 {
                    continue;
                }
                let h0 = zh * stride[0];
                let (dh0, dh1) = dilated_tap_range(h0, pad[0], kh, h, dilation[0]);
                let w0 = zw * stride[1];
                let (dw0, dw1) = dilated_tap_range(w0, pad[1], kw, w, dilation[1]);
                for ic in 0..ci {
                    for dh in dh0..dh1 {
                        let ih = h0 + dh * dilation[0] - pad[0];
                        let ibase = (ic * h + ih) * w;
                        let kbase = ((oc * ci + ic) * kh + dh) * kw;
                        for dw in dw0..dw1 {
                            let iw = w0 + dw * dilation[1] - pad[1];
                            di[ibase + iw] += go * kdata[kbase + dw];
                            dk[kbase + dw] += go * idata[ibase + iw];
                        }
                    }
                }
            }
        }
    }
    (dinput, dkernel)
}

// ── gradient checking ────────────────────────────────────────────────

/// Max relative error between the analytic gradient of `f` at `x` and a
/// central finite difference with step `eps`.
///
/// `f` builds a scalar-rooted graph from a leaf holding `x`; it is re-run
/// for every perturbed entry, so it must be deterministic.
pub fn finite_diff_check<F>(mut f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: FnMut(&mut Graph, NodeId) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let xid = g.leaf(x.clone());
    let root = f(&mut g, xid)?;
    g.backward(root)?;
    let analytic = g.grad(xid).clone();

    let eval = |f: &mut F, xt: &Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let xid = g.leaf(xt.clone());
        let root = f(&mut g, xid)?;
        g.value(root).item()
    };

    let mut max_rel = 0.0f64;
    for i in 0..x.numel() {
        let mut xp = x.clone();
        xp.data_mut()[i] += eps;
        let mut xm = x.clone();
        xm.data_mut()[i] -= eps;
        let cd = (eval(&mut f, &xp)? - eval(&mut f, &xm)?) / (2.0 * eps);
        let a = analytic.data()[i];
        let rel = (a - cd).abs() / a.abs().max(cd.abs()).max(1e-8);
        max_rel = max_rel.max(rel);
    }
    Ok(max_rel)
}
