use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Offset(NodeId, f64),
    Sum(NodeId),
    Mean(NodeId),
    Norm(NodeId),
    Dot(NodeId, NodeId),
    Relu(NodeId),
    ClampedRelu(NodeId, f64),
    Conv1d {
        input: NodeId,
        filters: NodeId,
        bias: NodeId,
    },
    Dense {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
    },
    MeanTime(NodeId),
    SoftmaxCrossEntropy {
        logits: NodeId,
        label: usize,
    },
    Cosine(NodeId, NodeId),
    Row(NodeId, usize),
    Gather(NodeId, Vec<usize>),
    Stack(Vec<NodeId>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Offset(..) => "offset",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Norm(_) => "norm",
            Op::Dot(..) => "dot",
            Op::Relu(_) => "relu",
            Op::ClampedRelu(..) => "clamped_relu",
            Op::Conv1d { .. } => "conv1d",
            Op::Dense { .. } => "dense",
            Op::MeanTime(_) => "mean_time",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
            Op::Cosine(..) => "cosine_similarity",
            Op::Row(..) => "row",
            Op::Gather(..) => "gather",
            Op::Stack(_) => "stack",
        }
    }

    fn parents(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Mul(a, b) | Op::Dot(a, b) | Op::Cosine(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Offset(a, _)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Norm(a)
            | Op::Relu(a)
            | Op::ClampedRelu(a, _)
            | Op::MeanTime(a)
            | Op::Row(a, _)
            | Op::Gather(a, _) => vec![*a],
            Op::SoftmaxCrossEntropy { logits, .. } => vec![*logits],
            Op::Conv1d { input, filters, bias } => vec![*input, *filters, *bias],
            Op::Dense { input, weight, bias } => vec![*input, *weight, *bias],
            Op::Stack(ids) => ids.clone(),
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// Recorded computation over tensors with reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order and `backward` walks it from the loss back to index 0.
/// Leaves are either named parameters (which receive gradients) or constants.
/// Parameter values can be replaced and the graph re-evaluated, which is what
/// the finite-difference checker relies on.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(String, NodeId)>,
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

    /// Registers a named parameter leaf.
    pub fn param(&mut self, name: impl Into<String>, value: Tensor) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            needs_grad: true,
        });
        self.params.push((name.into(), id));
        id
    }

    /// Registers a constant leaf; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            needs_grad: false,
        });
        id
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Scalar value of a node (panics if the node is not a scalar).
    pub fn scalar(&self, id: NodeId) -> f64 {
        self.value(id).item().expect("scalar node")
    }

    pub fn params(&self) -> &[(String, NodeId)] {
        &self.params
    }

    pub fn param_id(&self, name: &str) -> Option<NodeId> {
        self.params.iter().find(|(n, _)| n == name).map(|&(_, id)| id)
    }

    /// Replaces the value of a parameter leaf. Call [`Graph::recompute`]
    /// afterwards to refresh downstream values.
    pub fn set_param(&mut self, id: NodeId, value: Tensor) -> Result<()> {
        let node = &mut self.nodes[id.0];
        if !matches!(node.op, Op::Leaf) || !node.needs_grad {
            return Err(Error::Config(format!("node {} is not a parameter", id.0)));
        }
        if node.value.shape() != value.shape() {
            return Err(Error::Shape(format!(
                "parameter shape {:?} cannot take {:?}",
                node.value.shape(),
                value.shape()
            )));
        }
        node.value = value;
        Ok(())
    }

    /// Re-evaluates every non-leaf node in recorded order.
    pub fn recompute(&mut self) -> Result<()> {
        for i in 0..self.nodes.len() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let value = evaluate(&self.nodes, &self.nodes[i].op)?;
            self.nodes[i].value = value;
        }
        Ok(())
    }

    fn push(&mut self, op: Op) -> Result<NodeId> {
        let value = evaluate(&self.nodes, &op)?;
        let needs_grad = op.parents().iter().any(|p| self.nodes[p.0].needs_grad);
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { op, value, needs_grad });
        Ok(id)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Add(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        self.push(Op::Scale(a, factor))
    }

    /// Adds a constant to every element.
    pub fn offset(&mut self, a: NodeId, shift: f64) -> Result<NodeId> {
        self.push(Op::Offset(a, shift))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Sum(a))
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Mean(a))
    }

    /// Euclidean norm of the flattened tensor.
    pub fn norm(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Norm(a))
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Dot(a, b))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Relu(a))
    }

    /// `min(max(x, 0), cap)`.
    pub fn clamped_relu(&mut self, a: NodeId, cap: f64) -> Result<NodeId> {
        self.push(Op::ClampedRelu(a, cap))
    }

    /// Stride-1 "same" convolution over time. `input` is `[C_in x T]`,
    /// `filters` is `[K x C_in x w]` with odd `w`, `bias` is `[K]`.
    pub fn conv1d(&mut self, input: NodeId, filters: NodeId, bias: NodeId) -> Result<NodeId> {
        self.push(Op::Conv1d { input, filters, bias })
    }

    /// Affine map `weight * input + bias` with `weight` of shape `[m x n]`.
    pub fn dense(&mut self, input: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        self.push(Op::Dense { input, weight, bias })
    }

    /// `[K x T] -> [K]`, averaging over the time axis.
    pub fn mean_time(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::MeanTime(a))
    }

    pub fn softmax_cross_entropy(&mut self, logits: NodeId, label: usize) -> Result<NodeId> {
        self.push(Op::SoftmaxCrossEntropy { logits, label })
    }

    /// `(a . b) / (|a| |b|)`. Zero-norm operands are rejected.
    pub fn cosine_similarity(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Cosine(a, b))
    }

    /// The `i`-th slice along the leading axis, flattened to a vector.
    pub fn row(&mut self, a: NodeId, i: usize) -> Result<NodeId> {
        self.push(Op::Row(a, i))
    }

    /// Picks flat elements by index into a vector.
    pub fn gather(&mut self, a: NodeId, indices: Vec<usize>) -> Result<NodeId> {
        self.push(Op::Gather(a, indices))
    }

    /// Stacks scalar nodes into a vector.
    pub fn stack(&mut self, scalars: Vec<NodeId>) -> Result<NodeId> {
        self.push(Op::Stack(scalars))
    }

    /// Reverse-mode pass from a scalar `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let loss_value = self.value(loss);
        if !loss_value.is_scalar() {
            return Err(Error::NotScalar(loss_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.needs_grad {
                self.propagate(node, &g, &mut grads)?;
            }
            grads[i] = Some(g);
        }

        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| g.map(|g| Tensor::from_parts(node.value.shape().to_vec(), g)))
            .collect();
        let params = self.params.clone();
        let mut out = Gradients { grads, params };
        for (_, id) in &out.params {
            if out.grads[id.0].is_none() {
                out.grads[id.0] = Some(Tensor::zeros(self.nodes[id.0].value.shape()));
            }
        }
        Ok(out)
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let val = |id: NodeId| self.nodes[id.0].value.data();
        let wants = |id: NodeId| self.nodes[id.0].needs_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for id in [*a, *b] {
                    if wants(id) {
                        axpy(slot(grads, id, g.len()), 1.0, g);
                    }
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    let bv = val(*b);
                    let dst = slot(grads, *a, g.len());
                    for ((d, gi), bi) in dst.iter_mut().zip(g).zip(bv) {
                        *d += gi * bi;
                    }
                }
                if wants(*b) {
                    let av = val(*a);
                    let dst = slot(grads, *b, g.len());
                    for ((d, gi), ai) in dst.iter_mut().zip(g).zip(av) {
                        *d += gi * ai;
                    }
                }
            }
            Op::Scale(a, f) => {
                if wants(*a) {
                    axpy(slot(grads, *a, g.len()), *f, g);
                }
            }
            Op::Offset(a, _) => {
                if wants(*a) {
                    axpy(slot(grads, *a, g.len()), 1.0, g);
                }
            }
            Op::Sum(a) | Op::Mean(a) => {
                if wants(*a) {
                    let n = val(*a).len();
                    let scale = if matches!(node.op, Op::Mean(_)) {
                        g[0] / n as f64
                    } else {
                        g[0]
                    };
                    for d in slot(grads, *a, n) {
                        *d += scale;
                    }
                }
            }
            Op::Norm(a) => {
                if wants(*a) {
                    let av = val(*a);
                    let n = node.value.data()[0];
                    if n == 0.0 {
                        return Err(Error::Degenerate("norm gradient at the zero vector".into()));
                    }
                    axpy(slot(grads, *a, av.len()), g[0] / n, av);
                }
            }
            Op::Dot(a, b) => {
                if wants(*a) {
                    let bv = val(*b);
                    axpy(slot(grads, *a, bv.len()), g[0], bv);
                }
                if wants(*b) {
                    let av = val(*a);
                    axpy(slot(grads, *b, av.len()), g[0], av);
                }
            }
            Op::Relu(a) => {
                if wants(*a) {
                    let av = val(*a);
                    let dst = slot(grads, *a, av.len());
                    for ((d, gi), x) in dst.iter_mut().zip(g).zip(av) {
                        if *x > 0.0 {
                            *d += gi;
                        }
                    }
                }
            }
            Op::ClampedRelu(a, cap) => {
                if wants(*a) {
                    let av = val(*a);
                    let dst = slot(grads, *a, av.len());
                    for ((d, gi), x) in dst.iter_mut().zip(g).zip(av) {
                        if *x > 0.0 && *x < *cap {
                            *d += gi;
                        }
                    }
                }
            }
            Op::Conv1d { input, filters, bias } => self.conv1d_backward(*input, *filters, *bias, g, grads),
            Op::Dense { input, weight, bias } => {
                let x = val(*input);
                let w = val(*weight);
                let n = x.len();
                if wants(*bias) {
                    axpy(slot(grads, *bias, g.len()), 1.0, g);
                }
                if wants(*weight) {
                    let dw = slot(grads, *weight, w.len());
                    for (i, gi) in g.iter().enumerate() {
                        axpy(&mut dw[i * n..(i + 1) * n], *gi, x);
                    }
                }
                if wants(*input) {
                    let dx = slot(grads, *input, n);
                    for (i, gi) in g.iter().enumerate() {
                        axpy(dx, *gi, &w[i * n..(i + 1) * n]);
                    }
                }
            }
            Op::MeanTime(a) => {
                if wants(*a) {
                    let shape = self.nodes[a.0].value.shape();
                    let t = shape[1];
                    let dst = slot(grads, *a, shape[0] * t);
                    for (k, gk) in g.iter().enumerate() {
                        let s = gk / t as f64;
                        for d in &mut dst[k * t..(k + 1) * t] {
                            *d += s;
                        }
                    }
                }
            }
            Op::SoftmaxCrossEntropy { logits, label } => {
                if wants(*logits) {
                    let z = val(*logits);
                    let p = softmax(z);
                    let dst = slot(grads, *logits, z.len());
                    for (j, (d, pj)) in dst.iter_mut().zip(p).enumerate() {
                        let onehot = if j == *label { 1.0 } else { 0.0 };
                        *d += g[0] * (pj - onehot);
                    }
                }
            }
            Op::Cosine(a, b) => {
                let av = val(*a);
                let bv = val(*b);
                let na = norm(av);
                let nb = norm(bv);
                let d = node.value.data()[0];
                if wants(*a) {
                    let dst = slot(grads, *a, av.len());
                    let s1 = g[0] / (na * nb);
                    let s2 = g[0] * d / (na * na);
                    for ((dd, ai), bi) in dst.iter_mut().zip(av).zip(bv) {
                        *dd += s1 * bi - s2 * ai;
                    }
                }
                if wants(*b) {
                    let dst = slot(grads, *b, bv.len());
                    let s1 = g[0] / (na * nb);
                    let s2 = g[0] * d / (nb * nb);
                    for ((dd, ai), bi) in dst.iter_mut().zip(av).zip(bv) {
                        *dd += s1 * ai - s2 * bi;
                    }
                }
            }
            Op::Row(a, i) => {
                if wants(*a) {
                    let src = &self.nodes[a.0].value;
                    let w = src.row_len();
                    let dst = slot(grads, *a, src.len());
                    axpy(&mut dst[i * w..(i + 1) * w], 1.0, g);
                }
            }
            Op::Gather(a, indices) => {
                if wants(*a) {
                    let n = val(*a).len();
                    let dst = slot(grads, *a, n);
                    for (gi, &idx) in g.iter().zip(indices) {
                        dst[idx] += gi;
                    }
                }
            }
            Op::Stack(ids) => {
                for (gi, id) in g.iter().zip(ids) {
                    if wants(*id) {
                        slot(grads, *id, 1)[0] += gi;
                    }
                }
            }
        }
        Ok(())
    }

    fn conv1d_backward(&self, input: NodeId, filters: NodeId, bias: NodeId, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let x = &self.nodes[input.0].value;
        let f = &self.nodes[filters.0].value;
        let (c_in, t_len) = (x.shape()[0], x.shape()[1]);
        let (k_out, w) = (f.shape()[0], f.shape()[2]);
        let pad = (w - 1) / 2;
        let xd = x.data();
        let fd = f.data();

        if self.nodes[bias.0].needs_grad {
            let db = slot(grads, bias, k_out);
            for k in 0..k_out {
                db[k] += g[k * t_len..(k + 1) * t_len].iter().sum::<f64>();
            }
        }
        if self.nodes[filters.0].needs_grad {
            let df = slot(grads, filters, fd.len());
            for k in 0..k_out {
                let gk = &g[k * t_len..(k + 1) * t_len];
                for c in 0..c_in {
                    let xc = &xd[c * t_len..(c + 1) * t_len];
                    for d in 0..w {
                        let (lo, hi, shift) = tap_range(d, pad, t_len);
                        let mut acc = 0.0;
                        for t in lo..hi {
                            acc += gk[t] * xc[(t as isize + shift) as usize];
                        }
                        df[(k * c_in + c) * w + d] += acc;
                    }
                }
            }
        }
        if self.nodes[input.0].needs_grad {
            let dx = slot(grads, input, xd.len());
            for k in 0..k_out {
                let gk = &g[k * t_len..(k + 1) * t_len];
                for c in 0..c_in {
                    let dxc = &mut dx[c * t_len..(c + 1) * t_len];
                    for d in 0..w {
                        let wv = fd[(k * c_in + c) * w + d];
                        let (lo, hi, shift) = tap_range(d, pad, t_len);
                        let src = &gk[lo..hi];
                        let dst = &mut dxc[(lo as isize + shift) as usize..(hi as isize + shift) as usize];
                        axpy(dst, wv, src);
                    }
                }
            }
        }
    }
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(String, NodeId)>,
}

impl Gradients {
    /// Gradient with respect to a named parameter.
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        let id = self.params.iter().find(|(n, _)| n == name)?.1;
        self.of(id)
    }

    /// Gradient with respect to any node the loss depends on.
    pub fn of(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0)?.as_ref()
    }

    /// `(name, gradient)` for every parameter in declaration order.
    pub fn params(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(name, id)| {
            (
                name.as_str(),
                self.grads[id.0]
                    .as_ref()
                    .expect("parameter gradients are always populated"),
            )
        })
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], id: NodeId, len: usize) -> &mut Vec<f64> {
    grads[id.0].get_or_insert_with(|| vec![0.0; len])
}

fn axpy(dst: &mut [f64], a: f64, src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Output-time range `[lo, hi)` for which kernel tap `d` reads an in-range
/// input sample, and the offset from output time to input time.
fn tap_range(d: usize, pad: usize, t_len: usize) -> (usize, usize, isize) {
    let shift = d as isize - pad as isize;
    let lo = (-shift).max(0) as usize;
    let hi = (t_len as isize - shift).clamp(0, t_len as isize) as usize;
    if lo >= hi {
        (0, 0, 0)
    } else {
        (lo, hi, shift)
    }
}

fn same_shape(op: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("{op}: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn same_len(op: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("{op}: lengths {} vs {}", a.len(), b.len())));
    }
    Ok(())
}

fn evaluate(nodes: &[Node], op: &Op) -> Result<Tensor> {
    let v = |id: &NodeId| &nodes[id.0].value;
    let scalar = |x: f64| Tensor::from_parts(Vec::new(), vec![x]);
    let map = |a: &Tensor, f: &dyn Fn(f64) -> f64| {
        Tensor::from_parts(a.shape().to_vec(), a.data().iter().map(|&x| f(x)).collect())
    };
    let out = match op {
        Op::Leaf => unreachable!("leaves are not evaluated"),
        Op::Add(a, b) => {
            let (a, b) = (v(a), v(b));
            same_shape("add", a, b)?;
            let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
            Tensor::from_parts(a.shape().to_vec(), data)
        }
        Op::Mul(a, b) => {
            let (a, b) = (v(a), v(b));
            same_shape("mul", a, b)?;
            let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
            Tensor::from_parts(a.shape().to_vec(), data)
        }
        Op::Scale(a, f) => map(v(a), &|x| x * f),
        Op::Offset(a, s) => map(v(a), &|x| x + s),
        Op::Sum(a) => scalar(v(a).data().iter().sum()),
        Op::Mean(a) => {
            let a = v(a);
            if a.is_empty() {
                return Err(Error::Shape("mean of an empty tensor".into()));
            }
            scalar(a.data().iter().sum::<f64>() / a.len() as f64)
        }
        Op::Norm(a) => scalar(norm(v(a).data())),
        Op::Dot(a, b) => {
            let (a, b) = (v(a), v(b));
            same_len("dot", a, b)?;
            scalar(a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum())
        }
        Op::Relu(a) => map(v(a), &|x| if x > 0.0 { x } else { 0.0 }),
        Op::ClampedRelu(a, cap) => map(v(a), &|x| x.max(0.0).min(*cap)),
        Op::Conv1d { input, filters, bias } => conv1d_forward(v(input), v(filters), v(bias))?,
        Op::Dense { input, weight, bias } => {
            let (x, w, b) = (v(input), v(weight), v(bias));
            if w.shape().len() != 2 || w.shape()[1] != x.len() || w.shape()[0] != b.len() {
                return Err(Error::Shape(format!(
                    "dense: weight {:?}, input {:?}, bias {:?}",
                    w.shape(),
                    x.shape(),
                    b.shape()
                )));
            }
            let n = x.len();
            let data = (0..b.len())
                .map(|i| {
                    let row = &w.data()[i * n..(i + 1) * n];
                    b.data()[i] + row.iter().zip(x.data()).map(|(p, q)| p * q).sum::<f64>()
                })
                .collect();
            Tensor::from_parts(vec![b.len()], data)
        }
        Op::MeanTime(a) => {
            let a = v(a);
            if a.shape().len() != 2 || a.shape()[1] == 0 {
                return Err(Error::Shape(format!("mean_time needs [K x T], got {:?}", a.shape())));
            }
            let t = a.shape()[1];
            let data = a
                .data()
                .chunks(t)
                .map(|row| row.iter().sum::<f64>() / t as f64)
                .collect();
            Tensor::from_parts(vec![a.shape()[0]], data)
        }
        Op::SoftmaxCrossEntropy { logits, label } => {
            let z = v(logits).data();
            if *label >= z.len() {
                return Err(Error::OutOfBounds(format!("label {label} for {} logits", z.len())));
            }
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + z.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            scalar(lse - z[*label])
        }
        Op::Cosine(a, b) => {
            let (a, b) = (v(a), v(b));
            same_len("cosine_similarity", a, b)?;
            if a.is_empty() {
                return Err(Error::Shape("cosine_similarity of empty vectors".into()));
            }
            let (na, nb) = (norm(a.data()), norm(b.data()));
            if na == 0.0 || nb == 0.0 {
                return Err(Error::Degenerate("cosine similarity of a zero-norm vector".into()));
            }
            let dot: f64 = a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum();
            scalar(dot / (na * nb))
        }
        Op::Row(a, i) => {
            let a = v(a);
            let rows = a.shape().first().copied().unwrap_or(0);
            if *i >= rows {
                return Err(Error::OutOfBounds(format!("row {i} of {rows}")));
            }
            Tensor::from_parts(vec![a.row_len()], a.row(*i).to_vec())
        }
        Op::Gather(a, indices) => {
            let a = v(a);
            if let Some(&bad) = indices.iter().find(|&&i| i >= a.len()) {
                return Err(Error::OutOfBounds(format!("gather index {bad} of {}", a.len())));
            }
            Tensor::from_parts(vec![indices.len()], indices.iter().map(|&i| a.data()[i]).collect())
        }
        Op::Stack(ids) => {
            let mut data = Vec::with_capacity(ids.len());
            for id in ids {
                data.push(v(id).item()?);
            }
            Tensor::from_parts(vec![ids.len()], data)
        }
    };
    if out.data().iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite(op.name().into()));
    }
    Ok(out)
}

fn conv1d_forward(x: &Tensor, f: &Tensor, b: &Tensor) -> Result<Tensor> {
    if x.shape().len() != 2 || f.shape().len() != 3 || b.shape().len() != 1 {
        return Err(Error::Shape(format!(
            "conv1d: input {:?}, filters {:?}, bias {:?}",
            x.shape(),
            f.shape(),
            b.shape()
        )));
    }
    let (c_in, t_len) = (x.shape()[0], x.shape()[1]);
    let (k_out, fc, w) = (f.shape()[0], f.shape()[1], f.shape()[2]);
    if fc != c_in || b.len() != k_out {
        return Err(Error::Shape(format!(
            "conv1d: {c_in} input channels vs filters {:?}, bias {:?}",
            f.shape(),
            b.shape()
        )));
    }
    if w % 2 == 0 {
        return Err(Error::Shape(format!("conv1d: kernel width {w} must be odd")));
    }
    let pad = (w - 1) / 2;
    let xd = x.data();
    let fd = f.data();
    let mut out = vec![0.0; k_out * t_len];
    for k in 0..k_out {
        let ok = &mut out[k * t_len..(k + 1) * t_len];
        ok.fill(b.data()[k]);
        for c in 0..c_in {
            let xc = &xd[c * t_len..(c + 1) * t_len];
            for d in 0..w {
                let wv = fd[(k * c_in + c) * w + d];
                let (lo, hi, shift) = tap_range(d, pad, t_len);
                let src = &xc[(lo as isize + shift) as usize..(hi as isize + shift) as usize];
                axpy(&mut ok[lo..hi], wv, src);
            }
        }
    }
    Ok(Tensor::from_parts(vec![k_out, t_len], out))
}
