//! Reverse-mode automatic differentiation over [`DenseArray`] values.
//!
//! A [`Tape`] is an append-only record of operator applications. Nodes are
//! evaluated eagerly as they are appended, so the builder can inspect
//! intermediate values (for example to derive pseudo-labels from a forward
//! pass before attaching the loss that consumes them). [`Tape::evaluate`]
//! replays the whole record against new input bindings, and
//! [`Tape::backpropagate`] accumulates adjoints from a scalar terminal back
//! to every trainable parameter.
//!
//! The operator set is closed: every [`Op`] has a forward rule in
//! `forward` and an adjoint rule in `backward_node`. Shapes never broadcast
//! except for the bias of [`Tape::affine`] and [`Tape::conv1d`].

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::DenseArray;

/// Floor applied to row norms before division.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub enum Op {
    Input { name: Option<String> },
    Param { name: String },
    /// `x · w (+ b)` with `x: [n, in]`, `w: [in, out]`, `b: [out]`.
    Affine,
    /// `x: [batch, c_in, len]`, `w: [c_out, c_in, k]`, `b: [c_out]`.
    Conv1d { stride: usize, padding: usize },
    Relu,
    /// Non-overlapping max pooling along the last axis.
    MaxPool1d { size: usize },
    /// `[batch, channels, len] -> [batch, channels]`.
    GlobalMeanPool,
    /// `scale · Σ_i weight_i · CE(label_i, softmax(logits_i))`, a scalar.
    SoftmaxCrossEntropy {
        labels: Vec<usize>,
        weights: Vec<f64>,
        scale: f64,
    },
    /// Row-wise L2 normalization of `[n, d]`.
    L2Normalize,
    /// Pairwise cosine similarity of the rows of `[n, d]` and `[m, d]`.
    CosineSimilarity,
    Add,
    Mul,
    Scale(f64),
    Exp,
    Log,
    Sum,
    Mean,
    SumLastAxis,
    /// Concatenation along the leading axis.
    Concat,
    /// Rows `start..start + len` of the leading axis.
    Rows { start: usize, len: usize },
    Reshape(Vec<usize>),
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Input { .. } => "input",
            Op::Param { .. } => "param",
            Op::Affine => "affine",
            Op::Conv1d { .. } => "conv1d",
            Op::Relu => "relu",
            Op::MaxPool1d { .. } => "max_pool1d",
            Op::GlobalMeanPool => "global_mean_pool",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
            Op::L2Normalize => "l2_normalize",
            Op::CosineSimilarity => "cosine_similarity",
            Op::Add => "add",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::SumLastAxis => "sum_last_axis",
            Op::Concat => "concat",
            Op::Rows { .. } => "rows",
            Op::Reshape(_) => "reshape",
        }
    }
}

/// Values cached by the forward pass for use by the adjoint rule.
#[derive(Debug, Clone, Default)]
enum Aux {
    #[default]
    None,
    Probs(DenseArray),
    Argmax(Vec<usize>),
    Norms(Vec<f64>),
    Cosine {
        a_hat: DenseArray,
        b_hat: DenseArray,
        a_norms: Vec<f64>,
        b_norms: Vec<f64>,
    },
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    parents: Vec<usize>,
    value: DenseArray,
    aux: Aux,
    requires_grad: bool,
}

/// Gradients of a scalar terminal with respect to every parameter node.
#[derive(Debug, Clone)]
pub struct Gradients {
    entries: Vec<(NodeId, String, DenseArray)>,
}

impl Gradients {
    pub fn get(&self, node: NodeId) -> Option<&DenseArray> {
        self.entries.iter().find(|(id, ..)| *id == node).map(|(_, _, g)| g)
    }

    pub fn by_name(&self, name: &str) -> Option<&DenseArray> {
        self.entries.iter().find(|(_, n, _)| n == name).map(|(_, _, g)| g)
    }

    pub fn iter(&self) -> impl Iterator<Item = (NodeId, &str, &DenseArray)> {
        self.entries.iter().map(|(id, n, g)| (*id, n.as_str(), g))
    }

    pub fn into_named(self) -> HashMap<String, DenseArray> {
        self.entries.into_iter().map(|(_, n, g)| (n, g)).collect()
    }
}

#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<usize>,
    adjoints: Vec<Option<DenseArray>>,
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

    pub fn value(&self, node: NodeId) -> &DenseArray {
        &self.nodes[node.0].value
    }

    pub fn op(&self, node: NodeId) -> &Op {
        &self.nodes[node.0].op
    }

    /// Adjoint left by the most recent backward pass, if the node was reached.
    pub fn adjoint(&self, node: NodeId) -> Option<&DenseArray> {
        self.adjoints.get(node.0).and_then(Option::as_ref)
    }

    pub fn parameters(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.params.iter().map(|&i| NodeId(i))
    }

    pub fn param_name(&self, node: NodeId) -> Option<&str> {
        match &self.nodes[node.0].op {
            Op::Param { name } => Some(name),
            _ => None,
        }
    }

    pub fn find_param(&self, name: &str) -> Option<NodeId> {
        self.parameters().find(|&id| self.param_name(id) == Some(name))
    }

    /// Overwrites a parameter value in place. Downstream values are stale
    /// until the next [`Tape::evaluate`].
    pub fn set_param(&mut self, node: NodeId, value: DenseArray) -> Result<()> {
        let n = &mut self.nodes[node.0];
        if !matches!(n.op, Op::Param { .. }) {
            return Err(Error::InvalidArgument(format!("node {} is not a parameter", node.0)));
        }
        if n.value.shape() != value.shape() {
            return Err(Error::ShapeMismatch {
                node: node.0,
                op: "param",
                expected: format!("{:?}", n.value.shape()),
                actual: format!("{:?}", value.shape()),
            });
        }
        n.value = value;
        Ok(())
    }

    pub(crate) fn param_data_mut(&mut self, node: NodeId) -> &mut [f64] {
        self.nodes[node.0].value.data_mut()
    }

    fn push(&mut self, op: Op, parents: Vec<usize>) -> Result<NodeId> {
        let id = self.nodes.len();
        let parent_values: Vec<&DenseArray> = parents.iter().map(|&p| &self.nodes[p].value).collect();
        let (value, aux) = forward(id, &op, &parent_values)?;
        let requires_grad = parents.iter().any(|&p| self.nodes[p].requires_grad);
        self.nodes.push(Node {
            op,
            parents,
            value,
            aux,
            requires_grad,
        });
        Ok(NodeId(id))
    }

    fn leaf(&mut self, op: Op, value: DenseArray) -> NodeId {
        let id = self.nodes.len();
        let requires_grad = matches!(op, Op::Param { .. });
        if requires_grad {
            self.params.push(id);
        }
        self.nodes.push(Node {
            op,
            parents: Vec::new(),
            value,
            aux: Aux::None,
            requires_grad,
        });
        NodeId(id)
    }

    /// A named input that [`Tape::evaluate`] may rebind.
    pub fn input(&mut self, name: &str, value: DenseArray) -> NodeId {
        self.leaf(
            Op::Input {
                name: Some(name.to_string()),
            },
            value,
        )
    }

    pub fn constant(&mut self, value: DenseArray) -> NodeId {
        self.leaf(Op::Input { name: None }, value)
    }

    pub fn param(&mut self, name: &str, value: DenseArray) -> NodeId {
        self.leaf(Op::Param { name: name.to_string() }, value)
    }

    pub fn affine(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let mut parents = vec![x.0, w.0];
        parents.extend(b.map(|b| b.0));
        self.push(Op::Affine, parents)
    }

    pub fn conv1d(&mut self, x: NodeId, w: NodeId, b: NodeId, stride: usize, padding: usize) -> Result<NodeId> {
        self.push(Op::Conv1d { stride, padding }, vec![x.0, w.0, b.0])
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::Relu, vec![x.0])
    }

    pub fn max_pool1d(&mut self, x: NodeId, size: usize) -> Result<NodeId> {
        self.push(Op::MaxPool1d { size }, vec![x.0])
    }

    pub fn global_mean_pool(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::GlobalMeanPool, vec![x.0])
    }

    pub fn softmax_cross_entropy(
        &mut self,
        logits: NodeId,
        labels: Vec<usize>,
        weights: Vec<f64>,
        scale: f64,
    ) -> Result<NodeId> {
        self.push(
            Op::SoftmaxCrossEntropy {
                labels,
                weights,
                scale,
            },
            vec![logits.0],
        )
    }

    /// Row probabilities cached by a softmax-cross-entropy node.
    pub fn probabilities(&self, node: NodeId) -> Option<&DenseArray> {
        match &self.nodes[node.0].aux {
            Aux::Probs(p) => Some(p),
            _ => None,
        }
    }

    pub fn l2_normalize(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::L2Normalize, vec![x.0])
    }

    pub fn cosine_similarity(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::CosineSimilarity, vec![a.0, b.0])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Add, vec![a.0, b.0])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Mul, vec![a.0, b.0])
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> Result<NodeId> {
        self.push(Op::Scale(factor), vec![x.0])
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::Exp, vec![x.0])
    }

    pub fn log(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::Log, vec![x.0])
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::Sum, vec![x.0])
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::Mean, vec![x.0])
    }

    pub fn sum_last_axis(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::SumLastAxis, vec![x.0])
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        self.push(Op::Concat, parts.iter().map(|p| p.0).collect())
    }

    pub fn rows(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        self.push(Op::Rows { start, len }, vec![x.0])
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        self.push(Op::Reshape(shape), vec![x.0])
    }

    /// Replays every node against `bindings` (named inputs not mentioned
    /// keep their current value) and returns the last node's value.
    pub fn evaluate(&mut self, bindings: &[(&str, DenseArray)]) -> Result<&DenseArray> {
        for (name, _) in bindings {
            let known = self
                .nodes
                .iter()
                .any(|n| matches!(&n.op, Op::Input { name: Some(m) } if m == name));
            if !known {
                return Err(Error::UnboundInput(name.to_string()));
            }
        }
        for i in 0..self.nodes.len() {
            if let Op::Input { name: Some(name) } = &self.nodes[i].op {
                if let Some((_, v)) = bindings.iter().find(|(n, _)| n == name) {
                    self.nodes[i].value = v.clone();
                }
                continue;
            }
            if self.nodes[i].parents.is_empty() {
                continue;
            }
            let node = &self.nodes[i];
            let parent_values: Vec<&DenseArray> = node.parents.iter().map(|&p| &self.nodes[p].value).collect();
            let (value, aux) = forward(i, &node.op, &parent_values)?;
            self.nodes[i].value = value;
            self.nodes[i].aux = aux;
        }
        self.nodes
            .last()
            .map(|n| &n.value)
            .ok_or_else(|| Error::InvalidArgument("empty tape".into()))
    }

    /// Accumulates `∂terminal/∂node` for every node upstream of `terminal`
    /// and returns the parameter gradients. Parameters with no path to the
    /// terminal receive zeros.
    pub fn backpropagate(&mut self, terminal: NodeId) -> Result<Gradients> {
        let t = terminal.0;
        let tv = &self.nodes[t].value;
        if !tv.is_scalar() {
            return Err(Error::NonScalarTerminal {
                node: t,
                shape: tv.shape().to_vec(),
            });
        }
        self.adjoints = vec![None; self.nodes.len()];
        self.adjoints[t] = Some(DenseArray::filled(tv.shape(), 1.0));
        for i in (0..=t).rev() {
            let Some(g) = self.adjoints[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad && !node.parents.is_empty() {
                let parent_values: Vec<&DenseArray> = node.parents.iter().map(|&p| &self.nodes[p].value).collect();
                let needs: Vec<bool> = node.parents.iter().map(|&p| self.nodes[p].requires_grad).collect();
                let contributions = backward_node(node, &parent_values, &needs, &g);
                for (&p, c) in node.parents.iter().zip(contributions) {
                    if let Some(c) = c {
                        match &mut self.adjoints[p] {
                            Some(acc) => acc.add_assign(&c),
                            slot => *slot = Some(c),
                        }
                    }
                }
            }
            self.adjoints[i] = Some(g);
        }
        let entries = self
            .params
            .iter()
            .map(|&p| {
                let name = match &self.nodes[p].op {
                    Op::Param { name } => name.clone(),
                    _ => unreachable!(),
                };
                let g = self.adjoints[p]
                    .clone()
                    .unwrap_or_else(|| DenseArray::zeros(self.nodes[p].value.shape()));
                (NodeId(p), name, g)
            })
            .collect();
        Ok(Gradients { entries })
    }

    /// Activation pattern of every piecewise-linear node: rectifier signs and
    /// pooling winners. Two evaluations with equal signatures lie on the
    /// same smooth piece.
    pub fn kink_signature(&self) -> Vec<usize> {
        let mut sig = Vec::new();
        for node in &self.nodes {
            match (&node.op, &node.aux) {
                (Op::Relu, _) => {
                    let x = &self.nodes[node.parents[0]].value;
                    sig.extend(x.data().iter().map(|&v| usize::from(v > 0.0)));
                }
                (Op::MaxPool1d { .. }, Aux::Argmax(idx)) => sig.extend_from_slice(idx),
                _ => {}
            }
        }
        sig
    }
}

fn mismatch(node: usize, op: &Op, expected: impl Into<String>, actual: &[usize]) -> Error {
    Error::ShapeMismatch {
        node,
        op: op.name(),
        expected: expected.into(),
        actual: format!("{actual:?}"),
    }
}

fn rank(node: usize, op: &Op, a: &DenseArray, r: usize) -> Result<()> {
    if a.shape().len() != r {
        return Err(mismatch(node, op, format!("rank {r}"), a.shape()));
    }
    Ok(())
}

fn same_shape(node: usize, op: &Op, a: &DenseArray, b: &DenseArray) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(mismatch(node, op, format!("{:?}", a.shape()), b.shape()));
    }
    Ok(())
}

fn conv_out_len(len: usize, k: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = len + 2 * padding;
    (padded >= k && stride > 0).then(|| (padded - k) / stride + 1)
}

/// Range of output positions `t` for which `t * stride + k - padding` is a
/// valid input index.
fn conv_valid_range(len: usize, out_len: usize, k: usize, stride: usize, padding: usize) -> std::ops::Range<usize> {
    let lo = if padding > k { (padding - k).div_ceil(stride) } else { 0 };
    if len + padding < k + 1 {
        return 0..0;
    }
    let hi = ((len - 1 + padding - k) / stride + 1).min(out_len);
    lo..hi.max(lo)
}

fn row_norms(a: &DenseArray) -> Vec<f64> {
    (0..a.rows())
        .map(|i| a.row(i).iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_EPS))
        .collect()
}

fn normalize_rows(a: &DenseArray, norms: &[f64]) -> DenseArray {
    let w = a.row_len();
    let mut out = a.clone();
    for (i, chunk) in out.data_mut().chunks_mut(w).enumerate() {
        chunk.iter_mut().for_each(|v| *v /= norms[i]);
    }
    out
}

/// Adjoint of `y = x / max(‖x‖, eps)` row by row.
fn normalize_rows_backward(y: &DenseArray, norms: &[f64], g: &[f64]) -> DenseArray {
    let w = y.row_len();
    let mut out = DenseArray::zeros(y.shape());
    let od = out.data_mut();
    for (i, &n) in norms.iter().enumerate() {
        let yr = y.row(i);
        let gr = &g[i * w..(i + 1) * w];
        let dot: f64 = if n > NORM_EPS {
            yr.iter().zip(gr).map(|(a, b)| a * b).sum()
        } else {
            0.0
        };
        for j in 0..w {
            od[i * w + j] = (gr[j] - yr[j] * dot) / n;
        }
    }
    out
}

/// `a · bᵀ` for `a: [n, d]`, `b: [m, d]`.
fn matmul_nt(a: &DenseArray, b: &DenseArray) -> DenseArray {
    let (n, m, d) = (a.rows(), b.rows(), a.row_len());
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let ar = a.row(i);
        for j in 0..m {
            out[i * m + j] = ar.iter().zip(b.row(j)).map(|(x, y)| x * y).sum();
        }
    }
    let _ = d;
    DenseArray::new(vec![n, m], out).expect("matmul shape")
}

fn forward(id: usize, op: &Op, p: &[&DenseArray]) -> Result<(DenseArray, Aux)> {
    let (value, aux) = match op {
        Op::Input { .. } | Op::Param { .. } => unreachable!("leaves are not recomputed"),
        Op::Affine => {
            let (x, w) = (p[0], p[1]);
            rank(id, op, x, 2)?;
            rank(id, op, w, 2)?;
            let (n, d_in) = (x.shape()[0], x.shape()[1]);
            let d_out = w.shape()[1];
            if w.shape()[0] != d_in {
                return Err(mismatch(id, op, format!("weight [{d_in}, _]"), w.shape()));
            }
            let mut out = vec![0.0; n * d_out];
            if let Some(b) = p.get(2) {
                if b.shape() != [d_out] {
                    return Err(mismatch(id, op, format!("bias [{d_out}]"), b.shape()));
                }
                for row in out.chunks_mut(d_out) {
                    row.copy_from_slice(b.data());
                }
            }
            let (xd, wd) = (x.data(), w.data());
            for i in 0..n {
                let orow = &mut out[i * d_out..(i + 1) * d_out];
                for k in 0..d_in {
                    let xv = xd[i * d_in + k];
                    if xv == 0.0 {
                        continue;
                    }
                    for (o, wv) in orow.iter_mut().zip(&wd[k * d_out..(k + 1) * d_out]) {
                        *o += xv * wv;
                    }
                }
            }
            (DenseArray::new(vec![n, d_out], out)?, Aux::None)
        }
        Op::Conv1d { stride, padding } => {
            let (x, w, b) = (p[0], p[1], p[2]);
            rank(id, op, x, 3)?;
            rank(id, op, w, 3)?;
            let [batch, c_in, len] = [x.shape()[0], x.shape()[1], x.shape()[2]];
            let [c_out, w_in, k] = [w.shape()[0], w.shape()[1], w.shape()[2]];
            if w_in != c_in {
                return Err(mismatch(id, op, format!("weight [_, {c_in}, _]"), w.shape()));
            }
            if b.shape() != [c_out] {
                return Err(mismatch(id, op, format!("bias [{c_out}]"), b.shape()));
            }
            let out_len = conv_out_len(len, k, *stride, *padding)
                .ok_or_else(|| mismatch(id, op, format!("length >= kernel {k}"), x.shape()))?;
            let mut out = vec![0.0; batch * c_out * out_len];
            let (xd, wd) = (x.data(), w.data());
            for bi in 0..batch {
                for o in 0..c_out {
                    let orow = &mut out[(bi * c_out + o) * out_len..(bi * c_out + o + 1) * out_len];
                    orow.iter_mut().for_each(|v| *v = b.data()[o]);
                    for c in 0..c_in {
                        let xrow = &xd[(bi * c_in + c) * len..(bi * c_in + c + 1) * len];
                        for kk in 0..k {
                            let wv = wd[(o * c_in + c) * k + kk];
                            let range = conv_valid_range(len, out_len, kk, *stride, *padding);
                            if *stride == 1 {
                                let off = range.start + kk - padding;
                                let n = range.len();
                                for (ov, xv) in orow[range].iter_mut().zip(&xrow[off..off + n]) {
                                    *ov += wv * xv;
                                }
                            } else {
                                for t in range {
                                    orow[t] += wv * xrow[t * stride + kk - padding];
                                }
                            }
                        }
                    }
                }
            }
            (DenseArray::new(vec![batch, c_out, out_len], out)?, Aux::None)
        }
        Op::Relu => {
            let mut out = p[0].clone();
            out.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
            (out, Aux::None)
        }
        Op::MaxPool1d { size } => {
            let x = p[0];
            rank(id, op, x, 3)?;
            let [b, c, len] = [x.shape()[0], x.shape()[1], x.shape()[2]];
            if *size == 0 || len < *size {
                return Err(mismatch(id, op, format!("length >= pool {size}"), x.shape()));
            }
            let out_len = len / size;
            let mut out = Vec::with_capacity(b * c * out_len);
            let mut arg = Vec::with_capacity(b * c * out_len);
            for r in 0..b * c {
                let row = &x.data()[r * len..(r + 1) * len];
                for t in 0..out_len {
                    let win = &row[t * size..(t + 1) * size];
                    let mut best = 0;
                    for (j, v) in win.iter().enumerate() {
                        if *v > win[best] {
                            best = j;
                        }
                    }
                    out.push(win[best]);
                    arg.push(r * len + t * size + best);
                }
            }
            (DenseArray::new(vec![b, c, out_len], out)?, Aux::Argmax(arg))
        }
        Op::GlobalMeanPool => {
            let x = p[0];
            rank(id, op, x, 3)?;
            let [b, c, len] = [x.shape()[0], x.shape()[1], x.shape()[2]];
            let out = x
                .data()
                .chunks(len)
                .map(|r| r.iter().sum::<f64>() / len as f64)
                .collect();
            (DenseArray::new(vec![b, c], out)?, Aux::None)
        }
        Op::SoftmaxCrossEntropy {
            labels,
            weights,
            scale,
        } => {
            let z = p[0];
            rank(id, op, z, 2)?;
            let (n, c) = (z.shape()[0], z.shape()[1]);
            if labels.len() != n || weights.len() != n {
                return Err(mismatch(
                    id,
                    op,
                    format!("{} labels and weights", n),
                    &[labels.len(), weights.len()],
                ));
            }
            if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
                return Err(Error::InvalidArgument(format!(
                    "node {id}: label {bad} outside [0, {c})"
                )));
            }
            let mut probs = z.clone();
            let mut total = 0.0;
            for (i, row) in probs.data_mut().chunks_mut(c).enumerate() {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    s += *v;
                }
                let lse = max + s.ln();
                total += weights[i] * (lse - z.data()[i * c + labels[i]]);
                row.iter_mut().for_each(|v| *v /= s);
            }
            (DenseArray::scalar(scale * total), Aux::Probs(probs))
        }
        Op::L2Normalize => {
            let x = p[0];
            rank(id, op, x, 2)?;
            let norms = row_norms(x);
            (normalize_rows(x, &norms), Aux::Norms(norms))
        }
        Op::CosineSimilarity => {
            let (a, b) = (p[0], p[1]);
            rank(id, op, a, 2)?;
            rank(id, op, b, 2)?;
            if a.shape()[1] != b.shape()[1] {
                return Err(mismatch(id, op, format!("[_, {}]", a.shape()[1]), b.shape()));
            }
            let (an, bn) = (row_norms(a), row_norms(b));
            let (ah, bh) = (normalize_rows(a, &an), normalize_rows(b, &bn));
            (
                matmul_nt(&ah, &bh),
                Aux::Cosine {
                    a_hat: ah,
                    b_hat: bh,
                    a_norms: an,
                    b_norms: bn,
                },
            )
        }
        Op::Add | Op::Mul => {
            same_shape(id, op, p[0], p[1])?;
            let mut out = p[0].clone();
            let add = matches!(op, Op::Add);
            for (o, v) in out.data_mut().iter_mut().zip(p[1].data()) {
                if add {
                    *o += v;
                } else {
                    *o *= v;
                }
            }
            (out, Aux::None)
        }
        Op::Scale(f) => {
            let mut out = p[0].clone();
            out.data_mut().iter_mut().for_each(|v| *v *= f);
            (out, Aux::None)
        }
        Op::Exp => {
            let mut out = p[0].clone();
            out.data_mut().iter_mut().for_each(|v| *v = v.exp());
            (out, Aux::None)
        }
        Op::Log => {
            let mut out = p[0].clone();
            out.data_mut().iter_mut().for_each(|v| *v = v.ln());
            (out, Aux::None)
        }
        Op::Sum => (DenseArray::scalar(p[0].data().iter().sum()), Aux::None),
        Op::Mean => (
            DenseArray::scalar(p[0].data().iter().sum::<f64>() / p[0].len() as f64),
            Aux::None,
        ),
        Op::SumLastAxis => {
            let x = p[0];
            let last = *x.shape().last().unwrap();
            let mut shape = x.shape()[..x.shape().len() - 1].to_vec();
            if shape.is_empty() {
                shape.push(1);
            }
            let out = x.data().chunks(last).map(|r| r.iter().sum()).collect();
            (DenseArray::new(shape, out)?, Aux::None)
        }
        Op::Concat => {
            let first = p[0];
            let tail = &first.shape()[1..];
            let mut rows = 0;
            let mut data = Vec::new();
            for part in p {
                if &part.shape()[1..] != tail {
                    return Err(mismatch(id, op, format!("[_, {tail:?}]"), part.shape()));
                }
                rows += part.shape()[0];
                data.extend_from_slice(part.data());
            }
            let mut shape = vec![rows];
            shape.extend_from_slice(tail);
            (DenseArray::new(shape, data)?, Aux::None)
        }
        Op::Rows { start, len } => {
            let x = p[0];
            if *len == 0 || start + len > x.rows() {
                return Err(mismatch(id, op, format!("at least {} rows", start + len), x.shape()));
            }
            let w = x.row_len();
            let mut shape = x.shape().to_vec();
            shape[0] = *len;
            (DenseArray::new(shape, x.data()[start * w..(start + len) * w].to_vec())?, Aux::None)
        }
        Op::Reshape(shape) => {
            let x = p[0];
            if shape.iter().product::<usize>() != x.len() {
                return Err(mismatch(id, op, format!("{} elements", x.len()), shape));
            }
            (x.clone().reshaped(shape.clone())?, Aux::None)
        }
    };
    if !value.is_finite() {
        return Err(Error::NonFinite { node: id, op: op.name() });
    }
    Ok((value, aux))
}

fn backward_node(node: &Node, p: &[&DenseArray], needs: &[bool], g: &DenseArray) -> Vec<Option<DenseArray>> {
    let gd = g.data();
    let like = |i: usize, data: Vec<f64>| Some(DenseArray::new(p[i].shape().to_vec(), data).expect("adjoint shape"));
    match (&node.op, &node.aux) {
        (Op::Affine, _) => {
            let (x, w) = (p[0], p[1]);
            let (n, d_in, d_out) = (x.shape()[0], x.shape()[1], w.shape()[1]);
            let (xd, wd) = (x.data(), w.data());
            let mut out = vec![None, None, None];
            if needs[0] {
                let mut gx = vec![0.0; n * d_in];
                for i in 0..n {
                    let grow = &gd[i * d_out..(i + 1) * d_out];
                    for k in 0..d_in {
                        gx[i * d_in + k] = grow.iter().zip(&wd[k * d_out..(k + 1) * d_out]).map(|(a, b)| a * b).sum();
                    }
                }
                out[0] = like(0, gx);
            }
            if needs[1] {
                let mut gw = vec![0.0; d_in * d_out];
                for i in 0..n {
                    let grow = &gd[i * d_out..(i + 1) * d_out];
                    for k in 0..d_in {
                        let xv = xd[i * d_in + k];
                        if xv == 0.0 {
                            continue;
                        }
                        for (o, gv) in gw[k * d_out..(k + 1) * d_out].iter_mut().zip(grow) {
                            *o += xv * gv;
                        }
                    }
                }
                out[1] = like(1, gw);
            }
            if p.len() == 3 && needs[2] {
                let mut gb = vec![0.0; d_out];
                for row in gd.chunks(d_out) {
                    for (o, v) in gb.iter_mut().zip(row) {
                        *o += v;
                    }
                }
                out[2] = like(2, gb);
            }
            out.truncate(p.len());
            out
        }
        (Op::Conv1d { stride, padding }, _) => {
            let (x, w) = (p[0], p[1]);
            let [batch, c_in, len] = [x.shape()[0], x.shape()[1], x.shape()[2]];
            let [c_out, _, k] = [w.shape()[0], w.shape()[1], w.shape()[2]];
            let out_len = g.shape()[2];
            let (xd, wd) = (x.data(), w.data());
            let mut gx = needs[0].then(|| vec![0.0; xd.len()]);
            let mut gw = needs[1].then(|| vec![0.0; wd.len()]);
            let mut gb = needs[2].then(|| vec![0.0; c_out]);
            for bi in 0..batch {
                for o in 0..c_out {
                    let grow = &gd[(bi * c_out + o) * out_len..(bi * c_out + o + 1) * out_len];
                    if let Some(gb) = gb.as_mut() {
                        gb[o] += grow.iter().sum::<f64>();
                    }
                    for c in 0..c_in {
                        let xoff = (bi * c_in + c) * len;
                        for kk in 0..k {
                            let widx = (o * c_in + c) * k + kk;
                            let range = conv_valid_range(len, out_len, kk, *stride, *padding);
                            if range.is_empty() {
                                continue;
                            }
                            if *stride == 1 {
                                let off = xoff + range.start + kk - padding;
                                let n = range.len();
                                let gr = &grow[range];
                                if let Some(gw) = gw.as_mut() {
                                    gw[widx] += gr.iter().zip(&xd[off..off + n]).map(|(a, b)| a * b).sum::<f64>();
                                }
                                if let Some(gx) = gx.as_mut() {
                                    let wv = wd[widx];
                                    for (o, gv) in gx[off..off + n].iter_mut().zip(gr) {
                                        *o += wv * gv;
                                    }
                                }
                            } else {
                                for t in range {
                                    let xi = xoff + t * stride + kk - padding;
                                    if let Some(gw) = gw.as_mut() {
                                        gw[widx] += grow[t] * xd[xi];
                                    }
                                    if let Some(gx) = gx.as_mut() {
                                        gx[xi] += wd[widx] * grow[t];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            vec![gx.and_then(|v| like(0, v)), gw.and_then(|v| like(1, v)), gb.and_then(|v| like(2, v))]
        }
        (Op::Relu, _) => {
            let gx = p[0].data().iter().zip(gd).map(|(&x, &g)| if x > 0.0 { g } else { 0.0 }).collect();
            vec![like(0, gx)]
        }
        (Op::MaxPool1d { .. }, Aux::Argmax(arg)) => {
            let mut gx = vec![0.0; p[0].len()];
            for (&src, &gv) in arg.iter().zip(gd) {
                gx[src] += gv;
            }
            vec![like(0, gx)]
        }
        (Op::GlobalMeanPool, _) => {
            let len = p[0].shape()[2];
            let mut gx = vec![0.0; p[0].len()];
            for (r, &gv) in gd.iter().enumerate() {
                gx[r * len..(r + 1) * len].iter_mut().for_each(|v| *v = gv / len as f64);
            }
            vec![like(0, gx)]
        }
        (
            Op::SoftmaxCrossEntropy {
                labels,
                weights,
                scale,
            },
            Aux::Probs(probs),
        ) => {
            let c = p[0].shape()[1];
            let mut gx = probs.data().to_vec();
            for (i, row) in gx.chunks_mut(c).enumerate() {
                row[labels[i]] -= 1.0;
                let f = gd[0] * scale * weights[i];
                row.iter_mut().for_each(|v| *v *= f);
            }
            vec![like(0, gx)]
        }
        (Op::L2Normalize, Aux::Norms(norms)) => {
            vec![Some(normalize_rows_backward(&node.value, norms, gd))]
        }
        (
            Op::CosineSimilarity,
            Aux::Cosine {
                a_hat,
                b_hat,
                a_norms,
                b_norms,
            },
        ) => {
            let (n, m, d) = (a_hat.rows(), b_hat.rows(), a_hat.row_len());
            let mut out = vec![None, None];
            if needs[0] {
                let mut ga = vec![0.0; n * d];
                for i in 0..n {
                    for j in 0..m {
                        let gv = gd[i * m + j];
                        for (o, bv) in ga[i * d..(i + 1) * d].iter_mut().zip(b_hat.row(j)) {
                            *o += gv * bv;
                        }
                    }
                }
                out[0] = Some(normalize_rows_backward(a_hat, a_norms, &ga));
            }
            if needs[1] {
                let mut gb = vec![0.0; m * d];
                for i in 0..n {
                    for j in 0..m {
                        let gv = gd[i * m + j];
                        for (o, av) in gb[j * d..(j + 1) * d].iter_mut().zip(a_hat.row(i)) {
                            *o += gv * av;
                        }
                    }
                }
                out[1] = Some(normalize_rows_backward(b_hat, b_norms, &gb));
            }
            out
        }
        (Op::Add, _) => vec![needs[0].then(|| g.clone()), needs[1].then(|| g.clone())],
        (Op::Mul, _) => {
            let ga = needs[0].then(|| gd.iter().zip(p[1].data()).map(|(a, b)| a * b).collect());
            let gb = needs[1].then(|| gd.iter().zip(p[0].data()).map(|(a, b)| a * b).collect());
            vec![ga.and_then(|v| like(0, v)), gb.and_then(|v| like(1, v))]
        }
        (Op::Scale(f), _) => vec![like(0, gd.iter().map(|v| v * f).collect())],
        (Op::Exp, _) => vec![like(0, gd.iter().zip(node.value.data()).map(|(a, y)| a * y).collect())],
        (Op::Log, _) => vec![like(0, gd.iter().zip(p[0].data()).map(|(a, x)| a / x).collect())],
        (Op::Sum, _) => vec![like(0, vec![gd[0]; p[0].len()])],
        (Op::Mean, _) => vec![like(0, vec![gd[0] / p[0].len() as f64; p[0].len()])],
        (Op::SumLastAxis, _) => {
            let last = *p[0].shape().last().unwrap();
            let gx = gd.iter().flat_map(|&v| std::iter::repeat_n(v, last)).collect();
            vec![like(0, gx)]
        }
        (Op::Concat, _) => {
            let mut offset = 0;
            p.iter()
                .enumerate()
                .map(|(i, part)| {
                    let n = part.len();
                    let slice = gd[offset..offset + n].to_vec();
                    offset += n;
                    if needs[i] {
                        like(i, slice)
                    } else {
                        None
                    }
                })
                .collect()
        }
        (Op::Rows { start, .. }, _) => {
            let w = p[0].row_len();
            let mut gx = vec![0.0; p[0].len()];
            gx[start * w..start * w + gd.len()].copy_from_slice(gd);
            vec![like(0, gx)]
        }
        (Op::Reshape(_), _) => vec![like(0, gd.to_vec())],
        (op, _) => unreachable!("no adjoint rule for {}", op.name()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arr(shape: &[usize], data: &[f64]) -> DenseArray {
        DenseArray::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn affine_identity_is_passthrough() {
        let mut t = Tape::new();
        let v = t.input("v", arr(&[1, 3], &[0.5, -2.0, 7.0]));
        let w = t.param("w", arr(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]));
        let b = t.param("b", DenseArray::zeros(&[3]));
        let y = t.affine(v, w, Some(b)).unwrap();
        assert_eq!(t.value(y).data(), &[0.5, -2.0, 7.0]);
    }

    #[test]
    fn relu_definition() {
        let mut t = Tape::new();
        let x = t.input("x", arr(&[3], &[-1.0, 0.0, 2.0]));
        let y = t.relu(x).unwrap();
        assert_eq!(t.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn cosine_self_similarity_is_one() {
        let mut t = Tape::new();
        let v = t.input("v", arr(&[1, 4], &[0.3, -1.2, 4.0, 0.01]));
        let s = t.cosine_similarity(v, v).unwrap();
        assert!((t.value(s).item() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn quadratic_gradient() {
        let mut t = Tape::new();
        let w = t.param("w", arr(&[2], &[1.0, 2.0]));
        let sq = t.mul(w, w).unwrap();
        let s = t.sum(sq).unwrap();
        let g = t.backpropagate(s).unwrap();
        assert_eq!(g.by_name("w").unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn constant_terminal_gives_zero_gradients() {
        let mut t = Tape::new();
        let w = t.param("w", arr(&[2], &[1.0, 2.0]));
        let c = t.constant(arr(&[3], &[1.0, 2.0, 3.0]));
        let s = t.sum(c).unwrap();
        let g = t.backpropagate(s).unwrap();
        assert_eq!(g.get(w).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_terminal_rejected() {
        let mut t = Tape::new();
        let w = t.param("w", arr(&[2], &[1.0, 2.0]));
        let e = t.exp(w).unwrap();
        assert!(matches!(t.backpropagate(e), Err(Error::NonScalarTerminal { .. })));
    }

    #[test]
    fn shape_mismatch_names_node() {
        let mut t = Tape::new();
        let a = t.input("a", DenseArray::zeros(&[2, 3]));
        let b = t.input("b", DenseArray::zeros(&[3, 2]));
        match t.add(a, b) {
            Err(Error::ShapeMismatch { node, op, .. }) => {
                assert_eq!(node, 2);
                assert_eq!(op, "add");
            }
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn log_of_zero_reports_non_finite_node() {
        let mut t = Tape::new();
        let a = t.input("a", arr(&[2], &[1.0, 0.0]));
        assert!(matches!(t.log(a), Err(Error::NonFinite { node: 1, op: "log" })));
    }

    #[test]
    fn evaluate_rebinds_and_is_repeatable() {
        let mut t = Tape::new();
        let x = t.input("x", arr(&[2], &[1.0, 2.0]));
        let e = t.exp(x).unwrap();
        let _ = t.sum(e).unwrap();
        let first = t.evaluate(&[("x", arr(&[2], &[0.0, 0.0]))]).unwrap().clone();
        assert_eq!(first.item(), 2.0);
        let second = t.evaluate(&[("x", arr(&[2], &[0.0, 0.0]))]).unwrap().clone();
        assert_eq!(first.item().to_bits(), second.item().to_bits());
        assert!(matches!(t.evaluate(&[("nope", DenseArray::scalar(1.0))]), Err(Error::UnboundInput(_))));
    }

    #[test]
    fn softmax_rows_sum_to_one_even_at_large_logits() {
        let mut t = Tape::new();
        let z = t.input("z", arr(&[2, 3], &[1000.0, -1000.0, 0.0, 1.0, 2.0, 3.0]));
        let l = t.softmax_cross_entropy(z, vec![0, 2], vec![1.0, 1.0], 0.5).unwrap();
        let p = t.probabilities(l).unwrap();
        for i in 0..2 {
            assert!((p.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!(t.value(l).item().is_finite());
    }

    #[test]
    fn conv_known_values() {
        // single channel, kernel [1, -1], no padding
        let mut t = Tape::new();
        let x = t.input("x", arr(&[1, 1, 4], &[1.0, 3.0, 6.0, 10.0]));
        let w = t.param("w", arr(&[1, 1, 2], &[1.0, -1.0]));
        let b = t.param("b", arr(&[1], &[0.5]));
        let y = t.conv1d(x, w, b, 1, 0).unwrap();
        assert_eq!(t.value(y).data(), &[-1.5, -2.5, -3.5]);
        let y2 = t.conv1d(x, w, b, 2, 1).unwrap();
        // padded: [0, 1, 3, 6, 10, 0], windows at 0, 2, 4
        assert_eq!(t.value(y2).data(), &[-0.5, -2.5, 10.5]);
    }

    #[test]
    fn maxpool_ties_take_first() {
        let mut t = Tape::new();
        let x = t.param("x", arr(&[1, 1, 4], &[2.0, 2.0, 1.0, 5.0]));
        let y = t.max_pool1d(x, 2).unwrap();
        assert_eq!(t.value(y).data(), &[2.0, 5.0]);
        let s = t.sum(y).unwrap();
        let g = t.backpropagate(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn shared_parameter_accumulates() {
        let mut t = Tape::new();
        let w = t.param("w", arr(&[1], &[3.0]));
        let a = t.scale(w, 2.0).unwrap();
        let b = t.mul(w, w).unwrap();
        let c = t.add(a, b).unwrap();
        let s = t.sum(c).unwrap();
        let g = t.backpropagate(s).unwrap();
        assert_eq!(g.get(w).unwrap().data(), &[8.0]);
    }
}
