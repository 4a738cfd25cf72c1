//! Tape-style reverse-mode automatic differentiation.
//!
//! A [`Graph`] is rebuilt for every forward pass. Nodes are appended in
//! evaluation order, so inputs always precede outputs and a single reverse
//! sweep over the tape visits every node after all of its consumers.

use crate::error::{Error, Result};
use crate::nn::tensor::{gemm_nn, gemm_nt, gemm_tn, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
}

#[derive(Clone, Debug)]
enum Op {
    Param,
    Constant,
    MatMul(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// Tensor divided by a scalar node.
    DivScalar(NodeId, NodeId),
    Scale(NodeId, f64),
    AddConst(NodeId),
    Square(NodeId),
    Relu(NodeId),
    Log(NodeId),
    ClampMin(NodeId, f64),
    Softmax(NodeId),
    Gather(NodeId, Vec<usize>),
    Sum(NodeId),
    Mean(NodeId),
    Reshape(NodeId),
    Conv2d(NodeId, NodeId, Conv2dSpec),
    AvgPool2(NodeId),
}

struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// Append-only computation tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Result of [`Graph::backward`]: one accumulated gradient per node that the
/// loss depends on through differentiable paths.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `id`, or `None` when the loss does
    /// not depend on it (including detached copies).
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

fn conv_out_dim(size: usize, k: usize, spec: Conv2dSpec) -> Option<usize> {
    let padded = size + 2 * spec.padding;
    if spec.stride == 0 || k > padded {
        return None;
    }
    Some((padded - k) / spec.stride + 1)
}

struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    f: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    spec: Conv2dSpec,
}

impl ConvGeom {
    fn col_rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn col_cols(&self) -> usize {
        self.oh * self.ow
    }

    /// Unfolds sample `s` of `input` into a `(c·kh·kw) × (oh·ow)` matrix.
    fn im2col(&self, input: &[f64], s: usize, cols: &mut [f64]) {
        let (pad, stride) = (self.spec.padding as isize, self.spec.stride);
        let base = s * self.c * self.h * self.w;
        let ncol = self.col_cols();
        for ci in 0..self.c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (ci * self.kh + ki) * self.kw + kj;
                    for oi in 0..self.oh {
                        let y = (oi * stride + ki) as isize - pad;
                        for oj in 0..self.ow {
                            let x = (oj * stride + kj) as isize - pad;
                            let v = if y >= 0 && x >= 0 && (y as usize) < self.h && (x as usize) < self.w {
                                input[base + (ci * self.h + y as usize) * self.w + x as usize]
                            } else {
                                0.0
                            };
                            cols[row * ncol + oi * self.ow + oj] = v;
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], s: usize, grad_in: &mut [f64]) {
        let (pad, stride) = (self.spec.padding as isize, self.spec.stride);
        let base = s * self.c * self.h * self.w;
        let ncol = self.col_cols();
        for ci in 0..self.c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (ci * self.kh + ki) * self.kw + kj;
                    for oi in 0..self.oh {
                        let y = (oi * stride + ki) as isize - pad;
                        if y < 0 || y as usize >= self.h {
                            continue;
                        }
                        for oj in 0..self.ow {
                            let x = (oj * stride + kj) as isize - pad;
                            if x < 0 || x as usize >= self.w {
                                continue;
                            }
                            grad_in[base + (ci * self.h + y as usize) * self.w + x as usize] +=
                                cols[row * ncol + oi * self.ow + oj];
                        }
                    }
                }
            }
        }
    }
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

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.value(id).item()
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> Result<NodeId> {
        value.check_finite(&format!("graph node {} ({op:?})", self.nodes.len()))?;
        self.nodes.push(Node { op, value, needs_grad });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn needs(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].needs_grad)
    }

    /// Registers a trainable leaf.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.nodes.push(Node { op: Op::Param, value, needs_grad: true });
        NodeId(self.nodes.len() - 1)
    }

    /// Registers a constant leaf (inputs, labels, frozen tensors).
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.nodes.push(Node { op: Op::Constant, value, needs_grad: false });
        NodeId(self.nodes.len() - 1)
    }

    /// Copies a node's value into a new constant: no gradient flows back
    /// through the copy.
    pub fn detach(&mut self, id: NodeId) -> NodeId {
        let v = self.value(id).clone();
        self.constant(v)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).matmul(self.value(b))?;
        let ng = self.needs(&[a, b]);
        self.push(Op::MatMul(a, b), value, ng)
    }

    /// Adds a bias vector of length `Q` to every row of an `N×Q` matrix.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if xv.ndim() != 2 || bv.len() != xv.shape()[1] {
            return Err(Error::Dimension(format!(
                "bias {:?} does not match rows of {:?}",
                bv.shape(),
                xv.shape()
            )));
        }
        let q = bv.len();
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(q) {
            for (o, b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let value = Tensor::from_parts(xv.shape().to_vec(), out);
        let ng = self.needs(&[x, bias]);
        self.push(Op::AddBias(x, bias), value, ng)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).add(self.value(b))?;
        let ng = self.needs(&[a, b]);
        self.push(Op::Add(a, b), value, ng)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).sub(self.value(b))?;
        let ng = self.needs(&[a, b]);
        self.push(Op::Sub(a, b), value, ng)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let ng = self.needs(&[a, b]);
        self.push(Op::Mul(a, b), value, ng)
    }

    /// Divides every element of `a` by the scalar node `s`.
    pub fn div_scalar(&mut self, a: NodeId, s: NodeId) -> Result<NodeId> {
        if !self.value(s).is_scalar() {
            return Err(Error::Dimension(format!(
                "divisor must be a scalar, got {:?}",
                self.value(s).shape()
            )));
        }
        let d = self.scalar(s);
        if d == 0.0 {
            return Err(Error::Numeric { tensor: format!("node {}", s.0), msg: "division by zero".into() });
        }
        let value = self.value(a).map(|v| v / d);
        let ng = self.needs(&[a, s]);
        self.push(Op::DivScalar(a, s), value, ng)
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> Result<NodeId> {
        let value = self.value(a).scale(k);
        let ng = self.needs(&[a]);
        self.push(Op::Scale(a, k), value, ng)
    }

    pub fn add_const(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let value = self.value(a).map(|v| v + c);
        let ng = self.needs(&[a]);
        self.push(Op::AddConst(a), value, ng)
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        let value = self.value(a).map(|v| v * v);
        let ng = self.needs(&[a]);
        self.push(Op::Square(a), value, ng)
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let value = self.value(a).map(|v| v.max(0.0));
        let ng = self.needs(&[a]);
        self.push(Op::Relu(a), value, ng)
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        if let Some(v) = self.value(a).data().iter().find(|&&v| v <= 0.0) {
            return Err(Error::Numeric {
                tensor: format!("node {}", a.0),
                msg: format!("log of non-positive value {v}"),
            });
        }
        let value = self.value(a).map(f64::ln);
        let ng = self.needs(&[a]);
        self.push(Op::Log(a), value, ng)
    }

    /// `max(x, floor)` elementwise; the gradient is blocked where the floor is
    /// active.
    pub fn clamp_min(&mut self, a: NodeId, floor: f64) -> Result<NodeId> {
        let value = self.value(a).map(|v| v.max(floor));
        let ng = self.needs(&[a]);
        self.push(Op::ClampMin(a, floor), value, ng)
    }

    /// Row-wise softmax of an `N×C` matrix with max subtraction.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let x = self.value(a);
        if x.ndim() != 2 || x.shape()[1] < 2 {
            return Err(Error::Dimension(format!("softmax needs N×C with C ≥ 2, got {:?}", x.shape())));
        }
        let c = x.shape()[1];
        let mut out = Vec::with_capacity(x.len());
        for row in x.data().chunks(c) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let start = out.len();
            let mut z = 0.0;
            for &v in row {
                let e = (v - m).exp();
                z += e;
                out.push(e);
            }
            for o in &mut out[start..] {
                *o /= z;
            }
        }
        let value = Tensor::from_parts(x.shape().to_vec(), out);
        let ng = self.needs(&[a]);
        self.push(Op::Softmax(a), value, ng)
    }

    /// Picks `x[i, labels[i]]` from an `N×C` matrix, giving a length-`N` vector.
    pub fn gather(&mut self, a: NodeId, labels: &[usize]) -> Result<NodeId> {
        let x = self.value(a);
        if x.ndim() != 2 || labels.len() != x.shape()[0] {
            return Err(Error::Dimension(format!(
                "gather of {} labels from {:?}",
                labels.len(),
                x.shape()
            )));
        }
        let c = x.shape()[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Contract(format!("label {bad} out of range for {c} classes")));
        }
        let data = labels.iter().enumerate().map(|(i, &l)| x.data()[i * c + l]).collect();
        let value = Tensor::from_parts(vec![labels.len()], data);
        let ng = self.needs(&[a]);
        self.push(Op::Gather(a, labels.to_vec()), value, ng)
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let value = Tensor::scalar(self.value(a).sum());
        let ng = self.needs(&[a]);
        self.push(Op::Sum(a), value, ng)
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a);
        let value = Tensor::scalar(v.sum() / v.len() as f64);
        let ng = self.needs(&[a]);
        self.push(Op::Mean(a), value, ng)
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let value = self.value(a).clone().reshape(shape)?;
        let ng = self.needs(&[a]);
        self.push(Op::Reshape(a), value, ng)
    }

    fn conv_geom(&self, input: NodeId, kernel: NodeId, spec: Conv2dSpec) -> Result<ConvGeom> {
        let (x, k) = (self.value(input).shape(), self.value(kernel).shape());
        if x.len() != 4 || k.len() != 4 || x[1] != k[1] {
            return Err(Error::Dimension(format!("conv2d of input {x:?} with kernel {k:?}")));
        }
        let oh = conv_out_dim(x[2], k[2], spec);
        let ow = conv_out_dim(x[3], k[3], spec);
        match (oh, ow) {
            (Some(oh), Some(ow)) => Ok(ConvGeom {
                n: x[0],
                c: x[1],
                h: x[2],
                w: x[3],
                f: k[0],
                kh: k[2],
                kw: k[3],
                oh,
                ow,
                spec,
            }),
            _ => Err(Error::Dimension(format!(
                "conv2d output of input {x:?}, kernel {k:?}, {spec:?} is empty"
            ))),
        }
    }

    /// Cross-correlation of `N×C×H×W` input with an `F×C×kh×kw` kernel.
    pub fn conv2d(&mut self, input: NodeId, kernel: NodeId, spec: Conv2dSpec) -> Result<NodeId> {
        let g = self.conv_geom(input, kernel, spec)?;
        let (rows, ncol) = (g.col_rows(), g.col_cols());
        let mut cols = vec![0.0; rows * ncol];
        let mut out = vec![0.0; g.n * g.f * ncol];
        let (x, k) = (self.value(input).data(), self.value(kernel).data());
        for s in 0..g.n {
            g.im2col(x, s, &mut cols);
            gemm_nn(k, &cols, &mut out[s * g.f * ncol..(s + 1) * g.f * ncol], g.f, rows, ncol);
        }
        let value = Tensor::from_parts(vec![g.n, g.f, g.oh, g.ow], out);
        let ng = self.needs(&[input, kernel]);
        self.push(Op::Conv2d(input, kernel, spec), value, ng)
    }

    /// 2×2 average pooling with stride 2 (a trailing odd row/column is dropped).
    pub fn avg_pool2(&mut self, a: NodeId) -> Result<NodeId> {
        let x = self.value(a);
        let s = x.shape();
        if s.len() != 4 || s[2] < 2 || s[3] < 2 {
            return Err(Error::Dimension(format!("avg_pool2 needs N×C×H×W with H,W ≥ 2, got {s:?}")));
        }
        let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
        let (oh, ow) = (h / 2, w / 2);
        let mut out = vec![0.0; nc * oh * ow];
        let d = x.data();
        for p in 0..nc {
            for i in 0..oh {
                for j in 0..ow {
                    let b = p * h * w + 2 * i * w + 2 * j;
                    out[(p * oh + i) * ow + j] = 0.25 * (d[b] + d[b + 1] + d[b + w] + d[b + w + 1]);
                }
            }
        }
        let value = Tensor::from_parts(vec![s[0], s[1], oh, ow], out);
        let ng = self.needs(&[a]);
        self.push(Op::AvgPool2(a), value, ng)
    }

    /// Reverse sweep from a scalar `loss` node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        if self.nodes[loss.0].needs_grad {
            grads[loss.0] = Some(Tensor::scalar(1.0));
        }
        for idx in (0..=loss.0).rev() {
            let Some(up) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(node, &up, &mut grads)?;
            grads[idx] = Some(up);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, up: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let val = |id: NodeId| &self.nodes[id.0].value;
        let ng = |id: NodeId| self.nodes[id.0].needs_grad;
        match &node.op {
            Op::Param | Op::Constant => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (p, k, q) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if ng(*a) {
                    let mut ga = vec![0.0; p * k];
                    gemm_nt(up.data(), bv.data(), &mut ga, p, q, k);
                    self.accumulate(grads, *a, Tensor::from_parts(vec![p, k], ga));
                }
                if ng(*b) {
                    let mut gb = vec![0.0; k * q];
                    gemm_tn(av.data(), up.data(), &mut gb, p, k, q);
                    self.accumulate(grads, *b, Tensor::from_parts(vec![k, q], gb));
                }
            }
            Op::AddBias(x, b) => {
                if ng(*x) {
                    self.accumulate(grads, *x, up.clone());
                }
                if ng(*b) {
                    let q = val(*b).len();
                    let mut gb = vec![0.0; q];
                    for row in up.data().chunks(q) {
                        for (g, u) in gb.iter_mut().zip(row) {
                            *g += u;
                        }
                    }
                    self.accumulate(grads, *b, Tensor::from_parts(val(*b).shape().to_vec(), gb));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, up.clone());
                self.accumulate(grads, *b, up.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, up.clone());
                if ng(*b) {
                    self.accumulate(grads, *b, up.scale(-1.0));
                }
            }
            Op::Mul(a, b) => {
                if ng(*a) {
                    self.accumulate(grads, *a, up.zip_map(val(*b), |u, y| u * y)?);
                }
                if ng(*b) {
                    self.accumulate(grads, *b, up.zip_map(val(*a), |u, x| u * x)?);
                }
            }
            Op::DivScalar(a, s) => {
                let d = val(*s).item();
                if ng(*a) {
                    self.accumulate(grads, *a, up.scale(1.0 / d));
                }
                if ng(*s) {
                    // d(a/d)/dd = -a/d²
                    let g: f64 = up.data().iter().zip(val(*a).data()).map(|(u, x)| u * x).sum();
                    self.accumulate(grads, *s, Tensor::scalar(-g / (d * d)));
                }
            }
            Op::Scale(a, k) => self.accumulate(grads, *a, up.scale(*k)),
            Op::AddConst(a) | Op::Reshape(a) => {
                let shape = val(*a).shape().to_vec();
                self.accumulate(grads, *a, Tensor::from_parts(shape, up.data().to_vec()));
            }
            Op::Square(a) => {
                self.accumulate(grads, *a, up.zip_map(val(*a), |u, x| 2.0 * u * x)?);
            }
            Op::Relu(a) => {
                self.accumulate(grads, *a, up.zip_map(val(*a), |u, x| if x > 0.0 { u } else { 0.0 })?);
            }
            Op::Log(a) => {
                self.accumulate(grads, *a, up.zip_map(val(*a), |u, x| u / x)?);
            }
            Op::ClampMin(a, floor) => {
                let f = *floor;
                self.accumulate(grads, *a, up.zip_map(val(*a), |u, x| if x >= f { u } else { 0.0 })?);
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let c = y.shape()[1];
                let mut g = Vec::with_capacity(y.len());
                for (yr, ur) in y.data().chunks(c).zip(up.data().chunks(c)) {
                    let dotp: f64 = yr.iter().zip(ur).map(|(y, u)| y * u).sum();
                    g.extend(yr.iter().zip(ur).map(|(y, u)| y * (u - dotp)));
                }
                self.accumulate(grads, *a, Tensor::from_parts(y.shape().to_vec(), g));
            }
            Op::Gather(a, labels) => {
                let shape = val(*a).shape().to_vec();
                let c = shape[1];
                let mut g = Tensor::zeros(&shape);
                for (i, (&l, &u)) in labels.iter().zip(up.data()).enumerate() {
                    g.data_mut()[i * c + l] = u;
                }
                self.accumulate(grads, *a, g);
            }
            Op::Sum(a) => {
                let u = up.item();
                self.accumulate(grads, *a, Tensor::full(val(*a).shape(), u));
            }
            Op::Mean(a) => {
                let n = val(*a).len() as f64;
                self.accumulate(grads, *a, Tensor::full(val(*a).shape(), up.item() / n));
            }
            Op::Conv2d(input, kernel, spec) => {
                let g = self.conv_geom(*input, *kernel, *spec)?;
                let (rows, ncol) = (g.col_rows(), g.col_cols());
                let (x, k) = (val(*input).data(), val(*kernel).data());
                let mut cols = vec![0.0; rows * ncol];
                let mut gk = vec![0.0; g.f * rows];
                let mut gx = vec![0.0; g.n * g.c * g.h * g.w];
                let mut gcols = vec![0.0; rows * ncol];
                for s in 0..g.n {
                    let up_s = &up.data()[s * g.f * ncol..(s + 1) * g.f * ncol];
                    if ng(*kernel) {
                        g.im2col(x, s, &mut cols);
                        gemm_nt(up_s, &cols, &mut gk, g.f, ncol, rows);
                    }
                    if ng(*input) {
                        gcols.iter_mut().for_each(|v| *v = 0.0);
                        gemm_tn(k, up_s, &mut gcols, g.f, rows, ncol);
                        g.col2im(&gcols, s, &mut gx);
                    }
                }
                if ng(*kernel) {
                    self.accumulate(grads, *kernel, Tensor::from_parts(val(*kernel).shape().to_vec(), gk));
                }
                if ng(*input) {
                    self.accumulate(grads, *input, Tensor::from_parts(val(*input).shape().to_vec(), gx));
                }
            }
            Op::AvgPool2(a) => {
                let s = val(*a).shape().to_vec();
                let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
                let (oh, ow) = (h / 2, w / 2);
                let mut g = vec![0.0; nc * h * w];
                for p in 0..nc {
                    for i in 0..oh {
                        for j in 0..ow {
                            let u = 0.25 * up.data()[(p * oh + i) * ow + j];
                            let b = p * h * w + 2 * i * w + 2 * j;
                            g[b] += u;
                            g[b + 1] += u;
                            g[b + w] += u;
                            g[b + w + 1] += u;
                        }
                    }
                }
                self.accumulate(grads, *a, Tensor::from_parts(s, g));
            }
        }
        Ok(())
    }
}
