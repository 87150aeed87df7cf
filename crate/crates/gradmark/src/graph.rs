//! Reverse-mode automatic differentiation on an append-only tape.
//!
//! `grad` extends the tape with adjoint nodes built entirely from the same
//! primitive op set, so a gradient graph is itself differentiable. That
//! closure is what makes the mixed second-order term (parameter gradient of
//! a loss that contains an input gradient) work without special cases.
//!
//! Evaluation is deterministic: nodes are stored in topological order and
//! every kernel reduces in a fixed row-major order.

use std::borrow::Cow;
use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{binary_broadcast, broadcast_shape, Tensor};

pub type NodeId = usize;

#[derive(Clone, Debug)]
pub enum Op {
    /// Variable bound at evaluation time.
    Leaf { name: String, trainable: bool },
    /// Tensor embedded in the graph.
    Const(Tensor),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Neg(NodeId),
    Matmul(NodeId, NodeId),
    Transpose(NodeId),
    Relu(NodeId),
    /// 1 where input > 0, else 0. Derivative is zero everywhere; this fixes
    /// the ReLU subgradient at 0 to 0.
    ReluMask(NodeId),
    Sigmoid(NodeId),
    /// Numerically stable log(1 + exp(x)).
    Softplus(NodeId),
    Log(NodeId),
    Exp(NodeId),
    /// Sum over broadcast axes down to `shape`.
    SumTo { input: NodeId, shape: Vec<usize> },
    BroadcastTo { input: NodeId, shape: Vec<usize> },
    /// Row-wise max of an [n, k] matrix -> [n, 1]. Piecewise constant;
    /// derivative treated as zero (used for stable softmax shifts).
    RowMax(NodeId),
    /// out[i] = input[i, labels[i]]; labels is an integer-valued [n] node.
    SelectClass { input: NodeId, labels: NodeId },
    /// Inverse of SelectClass into [n, classes] zeros.
    ScatterClass {
        input: NodeId,
        labels: NodeId,
        classes: usize,
    },
    /// Fused stable cross-entropy of softmax(logits) per row -> [n].
    SoftmaxXent { logits: NodeId, labels: NodeId },
    GatherCoords { input: NodeId, coords: Vec<usize> },
    ScatterCoords {
        input: NodeId,
        coords: Vec<usize>,
        dim: usize,
    },
    Reshape { input: NodeId, shape: Vec<usize> },
    /// Valid 2-D convolution, stride 1: NHWC input, [kh, kw, cin, cout] kernel.
    Conv2dValid { input: NodeId, kernel: NodeId },
    Pad2d { input: NodeId, pad: [usize; 4] },
    Crop2d { input: NodeId, crop: [usize; 4] },
    Permute4 { input: NodeId, axes: [usize; 4] },
    FlipHw(NodeId),
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    shape: Vec<usize>,
}

/// Leaf bindings for evaluation. Values may be owned or borrowed; borrowing
/// keeps repeated evaluations (training steps, oracle queries) free of
/// parameter copies.
#[derive(Default, Clone)]
pub struct Bindings<'a> {
    values: HashMap<NodeId, Cow<'a, Tensor>>,
}

impl<'a> Bindings<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bind(&mut self, leaf: NodeId, value: Tensor) -> &mut Self {
        self.values.insert(leaf, Cow::Owned(value));
        self
    }

    pub fn bind_ref(&mut self, leaf: NodeId, value: &'a Tensor) -> &mut Self {
        self.values.insert(leaf, Cow::Borrowed(value));
        self
    }

    pub fn get(&self, leaf: NodeId) -> Option<&Tensor> {
        self.values.get(&leaf).map(|c| c.as_ref())
    }
}

#[derive(Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
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

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id].shape
    }

    pub fn is_leaf(&self, id: NodeId) -> bool {
        matches!(self.nodes[id].op, Op::Leaf { .. })
    }

    fn push(&mut self, op: Op, shape: Vec<usize>) -> NodeId {
        self.nodes.push(Node { op, shape });
        self.nodes.len() - 1
    }

    fn check(&self, id: NodeId) -> Result<()> {
        if id >= self.nodes.len() {
            return Err(Error::InvalidArgument(format!("node {id} not in graph")));
        }
        Ok(())
    }

    // ---- builders ---------------------------------------------------------

    pub fn leaf(&mut self, name: &str, shape: &[usize], trainable: bool) -> NodeId {
        self.push(
            Op::Leaf {
                name: name.to_string(),
                trainable,
            },
            shape.to_vec(),
        )
    }

    pub fn constant(&mut self, t: Tensor) -> NodeId {
        let shape = t.shape().to_vec();
        self.push(Op::Const(t), shape)
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.constant(Tensor::scalar(v))
    }

    fn binary(&mut self, a: NodeId, b: NodeId, make: impl Fn(NodeId, NodeId) -> Op) -> Result<NodeId> {
        self.check(a)?;
        self.check(b)?;
        let shape = broadcast_shape(self.shape(a), self.shape(b))?;
        Ok(self.push(make(a, b), shape))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, Op::Add)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, Op::Sub)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, Op::Mul)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, Op::Div)
    }

    pub fn neg(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        let shape = self.shape(a).to_vec();
        Ok(self.push(Op::Neg(a), shape))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch(format!("matmul {sa:?} x {sb:?}")));
        }
        let shape = vec![sa[0], sb[1]];
        Ok(self.push(Op::Matmul(a, b), shape))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::ShapeMismatch(format!("transpose on {s:?}")));
        }
        let shape = vec![s[1], s[0]];
        Ok(self.push(Op::Transpose(a), shape))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        let shape = self.shape(a).to_vec();
        Ok(self.push(Op::Relu(a), shape))
    }

    pub fn relu_mask(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        let shape = self.shape(a).to_vec();
        Ok(self.push(Op::ReluMask(a), shape))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        let shape = self.shape(a).to_vec();
        Ok(self.push(Op::Sigmoid(a), shape))
    }

    pub fn softplus(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        let shape = self.shape(a).to_vec();
        Ok(self.push(Op::Softplus(a), shape))
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        let shape = self.shape(a).to_vec();
        Ok(self.push(Op::Log(a), shape))
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        let shape = self.shape(a).to_vec();
        Ok(self.push(Op::Exp(a), shape))
    }

    /// Sum over broadcast axes down to `target`; no-op when shapes match.
    pub fn sum_to(&mut self, a: NodeId, target: &[usize]) -> Result<NodeId> {
        self.check(a)?;
        if self.shape(a) == target {
            return Ok(a);
        }
        if !crate::tensor::reducible_to(self.shape(a), target) {
            return Err(Error::ShapeMismatch(format!(
                "cannot reduce {:?} to {:?}",
                self.shape(a),
                target
            )));
        }
        Ok(self.push(
            Op::SumTo {
                input: a,
                shape: target.to_vec(),
            },
            target.to_vec(),
        ))
    }

    pub fn broadcast_to(&mut self, a: NodeId, target: &[usize]) -> Result<NodeId> {
        self.check(a)?;
        if self.shape(a) == target {
            return Ok(a);
        }
        if !crate::tensor::reducible_to(target, self.shape(a)) {
            return Err(Error::ShapeMismatch(format!(
                "cannot broadcast {:?} to {:?}",
                self.shape(a),
                target
            )));
        }
        Ok(self.push(
            Op::BroadcastTo {
                input: a,
                shape: target.to_vec(),
            },
            target.to_vec(),
        ))
    }

    pub fn sum_all(&mut self, a: NodeId) -> Result<NodeId> {
        self.sum_to(a, &[])
    }

    /// Mean over the axes removed by reducing to `target`.
    pub fn mean_to(&mut self, a: NodeId, target: &[usize]) -> Result<NodeId> {
        let from: usize = self.shape(a).iter().product();
        let to: usize = target.iter().product::<usize>().max(1);
        let s = self.sum_to(a, target)?;
        let inv = self.scalar(1.0 / (from / to) as f64);
        self.mul(s, inv)
    }

    pub fn mean_all(&mut self, a: NodeId) -> Result<NodeId> {
        self.mean_to(a, &[])
    }

    pub fn row_max(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::ShapeMismatch(format!("row_max on {s:?}")));
        }
        let shape = vec![s[0], 1];
        Ok(self.push(Op::RowMax(a), shape))
    }

    pub fn select_class(&mut self, input: NodeId, labels: NodeId) -> Result<NodeId> {
        self.check(input)?;
        self.check(labels)?;
        let (si, sl) = (self.shape(input), self.shape(labels));
        if si.len() != 2 || sl.len() != 1 || si[0] != sl[0] {
            return Err(Error::ShapeMismatch(format!(
                "select_class {si:?} with labels {sl:?}"
            )));
        }
        let shape = vec![si[0]];
        Ok(self.push(Op::SelectClass { input, labels }, shape))
    }

    pub fn scatter_class(&mut self, input: NodeId, labels: NodeId, classes: usize) -> Result<NodeId> {
        self.check(input)?;
        self.check(labels)?;
        let (si, sl) = (self.shape(input), self.shape(labels));
        if si.len() != 1 || sl.len() != 1 || si[0] != sl[0] {
            return Err(Error::ShapeMismatch(format!(
                "scatter_class {si:?} with labels {sl:?}"
            )));
        }
        let shape = vec![si[0], classes];
        Ok(self.push(
            Op::ScatterClass {
                input,
                labels,
                classes,
            },
            shape,
        ))
    }

    /// Per-sample cross-entropy of softmax(logits) against integer labels.
    pub fn softmax_xent(&mut self, logits: NodeId, labels: NodeId) -> Result<NodeId> {
        self.check(logits)?;
        self.check(labels)?;
        let (sz, sl) = (self.shape(logits), self.shape(labels));
        if sz.len() != 2 || sl.len() != 1 || sz[0] != sl[0] {
            return Err(Error::ShapeMismatch(format!(
                "softmax_xent {sz:?} with labels {sl:?}"
            )));
        }
        let shape = vec![sz[0]];
        Ok(self.push(Op::SoftmaxXent { logits, labels }, shape))
    }

    /// Row-wise softmax built from primitives (stable shift by row max).
    pub fn softmax_rows(&mut self, logits: NodeId) -> Result<NodeId> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 {
            return Err(Error::ShapeMismatch(format!("softmax_rows on {s:?}")));
        }
        let m = self.row_max(logits)?;
        let shifted = self.sub(logits, m)?;
        let e = self.exp(shifted)?;
        let denom = self.sum_to(e, &[s[0], 1])?;
        self.div(e, denom)
    }

    pub fn gather_coords(&mut self, input: NodeId, coords: &[usize]) -> Result<NodeId> {
        self.check(input)?;
        let s = self.shape(input);
        if s.len() != 1 {
            return Err(Error::ShapeMismatch(format!("gather_coords on {s:?}")));
        }
        if coords.iter().any(|&c| c >= s[0]) {
            return Err(Error::InvalidArgument("gather coordinate out of range".into()));
        }
        let shape = vec![coords.len()];
        Ok(self.push(
            Op::GatherCoords {
                input,
                coords: coords.to_vec(),
            },
            shape,
        ))
    }

    pub fn scatter_coords(&mut self, input: NodeId, coords: &[usize], dim: usize) -> Result<NodeId> {
        self.check(input)?;
        let s = self.shape(input);
        if s.len() != 1 || s[0] != coords.len() {
            return Err(Error::ShapeMismatch(format!(
                "scatter_coords {s:?} with {} coords",
                coords.len()
            )));
        }
        Ok(self.push(
            Op::ScatterCoords {
                input,
                coords: coords.to_vec(),
                dim,
            },
            vec![dim],
        ))
    }

    pub fn reshape(&mut self, input: NodeId, shape: &[usize]) -> Result<NodeId> {
        self.check(input)?;
        let from: usize = self.shape(input).iter().product();
        let to: usize = shape.iter().product();
        if from != to {
            return Err(Error::ShapeMismatch(format!(
                "reshape {:?} to {:?}",
                self.shape(input),
                shape
            )));
        }
        Ok(self.push(
            Op::Reshape {
                input,
                shape: shape.to_vec(),
            },
            shape.to_vec(),
        ))
    }

    pub fn conv2d_valid(&mut self, input: NodeId, kernel: NodeId) -> Result<NodeId> {
        self.check(input)?;
        self.check(kernel)?;
        let (si, sk) = (self.shape(input), self.shape(kernel));
        if si.len() != 4 || sk.len() != 4 || si[3] != sk[2] || sk[0] > si[1] || sk[1] > si[2] {
            return Err(Error::ShapeMismatch(format!("conv2d {si:?} * {sk:?}")));
        }
        let shape = vec![si[0], si[1] - sk[0] + 1, si[2] - sk[1] + 1, sk[3]];
        Ok(self.push(Op::Conv2dValid { input, kernel }, shape))
    }

    pub fn pad2d(&mut self, input: NodeId, pad: [usize; 4]) -> Result<NodeId> {
        self.check(input)?;
        let s = self.shape(input);
        if s.len() != 4 {
            return Err(Error::ShapeMismatch(format!("pad2d on {s:?}")));
        }
        if pad == [0, 0, 0, 0] {
            return Ok(input);
        }
        let shape = vec![s[0], s[1] + pad[0] + pad[1], s[2] + pad[2] + pad[3], s[3]];
        Ok(self.push(Op::Pad2d { input, pad }, shape))
    }

    pub fn crop2d(&mut self, input: NodeId, crop: [usize; 4]) -> Result<NodeId> {
        self.check(input)?;
        let s = self.shape(input);
        if s.len() != 4 || crop[0] + crop[1] >= s[1] || crop[2] + crop[3] >= s[2] {
            return Err(Error::ShapeMismatch(format!("crop2d {crop:?} on {s:?}")));
        }
        if crop == [0, 0, 0, 0] {
            return Ok(input);
        }
        let shape = vec![s[0], s[1] - crop[0] - crop[1], s[2] - crop[2] - crop[3], s[3]];
        Ok(self.push(Op::Crop2d { input, crop }, shape))
    }

    /// Same-padded stride-1 convolution: zero-pads then applies `conv2d_valid`.
    pub fn conv2d_same(&mut self, input: NodeId, kernel: NodeId) -> Result<NodeId> {
        self.check(kernel)?;
        let sk = self.shape(kernel).to_vec();
        if sk.len() != 4 {
            return Err(Error::ShapeMismatch(format!("conv kernel {sk:?}")));
        }
        let (ph, pw) = (sk[0] - 1, sk[1] - 1);
        let padded = self.pad2d(input, [ph / 2, ph - ph / 2, pw / 2, pw - pw / 2])?;
        self.conv2d_valid(padded, kernel)
    }

    pub fn permute4(&mut self, input: NodeId, axes: [usize; 4]) -> Result<NodeId> {
        self.check(input)?;
        let s = self.shape(input);
        if s.len() != 4 {
            return Err(Error::ShapeMismatch(format!("permute4 on {s:?}")));
        }
        let shape = vec![s[axes[0]], s[axes[1]], s[axes[2]], s[axes[3]]];
        Ok(self.push(Op::Permute4 { input, axes }, shape))
    }

    pub fn flip_hw(&mut self, input: NodeId) -> Result<NodeId> {
        self.check(input)?;
        let s = self.shape(input);
        if s.len() != 4 {
            return Err(Error::ShapeMismatch(format!("flip_hw on {s:?}")));
        }
        let shape = s.to_vec();
        Ok(self.push(Op::FlipHw(input), shape))
    }

    // ---- differentiation --------------------------------------------------

    /// Append adjoint nodes computing d(output)/d(leaf) for each leaf in
    /// `wrt`, returning the gradient node ids. `output` must be scalar.
    /// The extended graph remains a valid graph, so the returned nodes can
    /// be differentiated again.
    pub fn grad(&mut self, output: NodeId, wrt: &[NodeId]) -> Result<Vec<NodeId>> {
        self.check(output)?;
        if !self.shape(output).is_empty() {
            return Err(Error::InvalidArgument(format!(
                "grad output must be scalar, got shape {:?}",
                self.shape(output)
            )));
        }
        for &w in wrt {
            self.check(w)?;
            if !self.is_leaf(w) {
                return Err(Error::InvalidArgument(format!("node {w} is not a leaf")));
            }
        }
        let frontier = self.nodes.len();

        // Ancestors of the output.
        let mut anc = vec![false; frontier];
        let mut stack = vec![output];
        while let Some(id) = stack.pop() {
            if anc[id] {
                continue;
            }
            anc[id] = true;
            for inp in op_inputs(&self.nodes[id].op) {
                stack.push(inp);
            }
        }

        // Nodes whose value depends on some wrt leaf. Inputs always precede
        // their consumers, so one ascending pass suffices.
        let mut needs = vec![false; frontier];
        for &w in wrt {
            needs[w] = true;
        }
        for id in 0..frontier {
            if needs[id] {
                continue;
            }
            needs[id] = op_inputs(&self.nodes[id].op)
                .into_iter()
                .any(|inp| needs[inp]);
        }

        let mut adjoint: Vec<Option<NodeId>> = vec![None; frontier];
        adjoint[output] = Some(self.scalar(1.0));

        for id in (0..=output).rev() {
            if !anc[id] || !needs[id] {
                continue;
            }
            let Some(adj) = adjoint[id] else { continue };
            let contributions = self.vjp(id, adj)?;
            for (input, contrib) in contributions {
                if !needs[input] {
                    continue;
                }
                adjoint[input] = Some(match adjoint[input] {
                    Some(prev) => self.add(prev, contrib)?,
                    None => contrib,
                });
            }
        }

        let mut out = Vec::with_capacity(wrt.len());
        for &w in wrt {
            let id = match adjoint[w] {
                Some(id) => id,
                None => self.constant(Tensor::zeros(&self.nodes[w].shape.clone())),
            };
            out.push(id);
        }
        Ok(out)
    }

    /// Adjoint contributions of node `id` to each of its inputs.
    fn vjp(&mut self, id: NodeId, adj: NodeId) -> Result<Vec<(NodeId, NodeId)>> {
        let op = self.nodes[id].op.clone();
        let mut out = Vec::new();
        match op {
            Op::Leaf { .. } | Op::Const(_) | Op::ReluMask(_) | Op::RowMax(_) => {}
            Op::Add(a, b) => {
                let sa = self.shape(a).to_vec();
                let sb = self.shape(b).to_vec();
                let da = self.sum_to(adj, &sa)?;
                let db = self.sum_to(adj, &sb)?;
                out.push((a, da));
                out.push((b, db));
            }
            Op::Sub(a, b) => {
                let sa = self.shape(a).to_vec();
                let sb = self.shape(b).to_vec();
                let da = self.sum_to(adj, &sa)?;
                let n = self.neg(adj)?;
                let db = self.sum_to(n, &sb)?;
                out.push((a, da));
                out.push((b, db));
            }
            Op::Mul(a, b) => {
                let sa = self.shape(a).to_vec();
                let sb = self.shape(b).to_vec();
                let pa = self.mul(adj, b)?;
                let da = self.sum_to(pa, &sa)?;
                let pb = self.mul(adj, a)?;
                let db = self.sum_to(pb, &sb)?;
                out.push((a, da));
                out.push((b, db));
            }
            Op::Div(a, b) => {
                // d/da = adj / b ; d/db = -adj * (a/b) / b
                let sa = self.shape(a).to_vec();
                let sb = self.shape(b).to_vec();
                let pa = self.div(adj, b)?;
                let da = self.sum_to(pa, &sa)?;
                let t = self.mul(adj, id)?;
                let t = self.div(t, b)?;
                let t = self.neg(t)?;
                let db = self.sum_to(t, &sb)?;
                out.push((a, da));
                out.push((b, db));
            }
            Op::Neg(a) => {
                let da = self.neg(adj)?;
                out.push((a, da));
            }
            Op::Matmul(a, b) => {
                let bt = self.transpose(b)?;
                let da = self.matmul(adj, bt)?;
                let at = self.transpose(a)?;
                let db = self.matmul(at, adj)?;
                out.push((a, da));
                out.push((b, db));
            }
            Op::Transpose(a) => {
                let da = self.transpose(adj)?;
                out.push((a, da));
            }
            Op::Relu(a) => {
                let mask = self.relu_mask(a)?;
                let da = self.mul(adj, mask)?;
                out.push((a, da));
            }
            Op::Sigmoid(a) => {
                // s' = s (1 - s), reusing the forward node.
                let one = self.scalar(1.0);
                let om = self.sub(one, id)?;
                let sp = self.mul(id, om)?;
                let da = self.mul(adj, sp)?;
                out.push((a, da));
            }
            Op::Softplus(a) => {
                let s = self.sigmoid(a)?;
                let da = self.mul(adj, s)?;
                out.push((a, da));
            }
            Op::Log(a) => {
                let da = self.div(adj, a)?;
                out.push((a, da));
            }
            Op::Exp(a) => {
                let da = self.mul(adj, id)?;
                out.push((a, da));
            }
            Op::SumTo { input, .. } => {
                let si = self.shape(input).to_vec();
                let da = self.broadcast_to(adj, &si)?;
                out.push((input, da));
            }
            Op::BroadcastTo { input, .. } => {
                let si = self.shape(input).to_vec();
                let da = self.sum_to(adj, &si)?;
                out.push((input, da));
            }
            Op::SelectClass { input, labels } => {
                let classes = self.shape(input)[1];
                let da = self.scatter_class(adj, labels, classes)?;
                out.push((input, da));
            }
            Op::ScatterClass { input, labels, .. } => {
                let da = self.select_class(adj, labels)?;
                out.push((input, da));
            }
            Op::SoftmaxXent { logits, labels } => {
                // d(loss_i)/d(z_ij) = softmax(z)_ij - onehot(y_i)_j, scaled by adj_i.
                let n = self.shape(logits)[0];
                let classes = self.shape(logits)[1];
                let probs = self.softmax_rows(logits)?;
                let ones = self.constant(Tensor::filled(&[n], 1.0));
                let onehot = self.scatter_class(ones, labels, classes)?;
                let diff = self.sub(probs, onehot)?;
                let adj_col = self.reshape(adj, &[n, 1])?;
                let dz = self.mul(adj_col, diff)?;
                out.push((logits, dz));
            }
            Op::GatherCoords { input, coords } => {
                let dim = self.shape(input)[0];
                let da = self.scatter_coords(adj, &coords, dim)?;
                out.push((input, da));
            }
            Op::ScatterCoords { input, coords, .. } => {
                let da = self.gather_coords(adj, &coords)?;
                out.push((input, da));
            }
            Op::Reshape { input, .. } => {
                let si = self.shape(input).to_vec();
                let da = self.reshape(adj, &si)?;
                out.push((input, da));
            }
            Op::Conv2dValid { input, kernel } => {
                // dX: full correlation of the adjoint with the flipped kernel.
                let sk = self.shape(kernel).to_vec();
                let (kh, kw) = (sk[0], sk[1]);
                let padded = self.pad2d(adj, [kh - 1, kh - 1, kw - 1, kw - 1])?;
                let flipped = self.flip_hw(kernel)?;
                let swapped = self.permute4(flipped, [0, 1, 3, 2])?;
                let dx = self.conv2d_valid(padded, swapped)?;
                out.push((input, dx));
                // dW: correlate input with the adjoint, batch and channel axes swapped.
                let xt = self.permute4(input, [3, 1, 2, 0])?;
                let at = self.permute4(adj, [1, 2, 0, 3])?;
                let dwp = self.conv2d_valid(xt, at)?;
                let dw = self.permute4(dwp, [1, 2, 0, 3])?;
                out.push((kernel, dw));
            }
            Op::Pad2d { input, pad } => {
                let da = self.crop2d(adj, pad)?;
                out.push((input, da));
            }
            Op::Crop2d { input, crop } => {
                let da = self.pad2d(adj, crop)?;
                out.push((input, da));
            }
            Op::Permute4 { input, axes } => {
                let mut inv = [0usize; 4];
                for (i, &a) in axes.iter().enumerate() {
                    inv[a] = i;
                }
                let da = self.permute4(adj, inv)?;
                out.push((input, da));
            }
            Op::FlipHw(input) => {
                let da = self.flip_hw(adj)?;
                out.push((input, da));
            }
        }
        Ok(out)
    }

    // ---- evaluation -------------------------------------------------------

    /// Evaluate `targets`, computing only the nodes they depend on.
    pub fn eval<'e>(&'e self, bindings: &'e Bindings<'_>, targets: &[NodeId]) -> Result<Vec<Tensor>> {
        for &t in targets {
            self.check(t)?;
        }
        let mut needed = vec![false; self.nodes.len()];
        let mut stack: Vec<NodeId> = targets.to_vec();
        while let Some(id) = stack.pop() {
            if needed[id] {
                continue;
            }
            needed[id] = true;
            for inp in op_inputs(&self.nodes[id].op) {
                stack.push(inp);
            }
        }

        let mut values: Vec<Option<Cow<'e, Tensor>>> = vec![None; self.nodes.len()];
        for id in 0..self.nodes.len() {
            if !needed[id] {
                continue;
            }
            let v = self.eval_node(id, bindings, &values)?;
            if !v.all_finite() {
                return Err(Error::NonFinite {
                    op: format!("node {id} ({})", op_name(&self.nodes[id].op)),
                });
            }
            values[id] = Some(v);
        }
        let mut out = Vec::with_capacity(targets.len());
        for (i, &t) in targets.iter().enumerate() {
            let v = if targets[i + 1..].contains(&t) {
                values[t].clone()
            } else {
                values[t].take()
            };
            out.push(v.expect("target evaluated").into_owned());
        }
        Ok(out)
    }

    /// Evaluate a single output node.
    pub fn forward<'e>(&'e self, bindings: &'e Bindings<'_>, output: NodeId) -> Result<Tensor> {
        Ok(self.eval(bindings, &[output])?.remove(0))
    }

    fn eval_node<'e>(
        &'e self,
        id: NodeId,
        bindings: &'e Bindings<'_>,
        values: &[Option<Cow<'e, Tensor>>],
    ) -> Result<Cow<'e, Tensor>> {
        let val = |n: NodeId| -> &Tensor { values[n].as_ref().expect("input evaluated").as_ref() };
        let node = &self.nodes[id];
        let t: Cow<'e, Tensor> = match &node.op {
            Op::Leaf { name, .. } => {
                let v = bindings
                    .get(id)
                    .ok_or_else(|| Error::UnboundLeaf(name.clone()))?;
                if v.shape() != node.shape {
                    return Err(Error::ShapeMismatch(format!(
                        "leaf `{name}` declared {:?}, bound {:?}",
                        node.shape,
                        v.shape()
                    )));
                }
                Cow::Borrowed(v)
            }
            Op::Const(t) => Cow::Borrowed(t),
            Op::Add(a, b) => Cow::Owned(binary_broadcast(val(*a), val(*b), |x, y| x + y)?),
            Op::Sub(a, b) => Cow::Owned(binary_broadcast(val(*a), val(*b), |x, y| x - y)?),
            Op::Mul(a, b) => Cow::Owned(binary_broadcast(val(*a), val(*b), |x, y| x * y)?),
            Op::Div(a, b) => Cow::Owned(binary_broadcast(val(*a), val(*b), |x, y| x / y)?),
            Op::Neg(a) => Cow::Owned(val(*a).map(|x| -x)),
            Op::Matmul(a, b) => Cow::Owned(val(*a).matmul(val(*b))?),
            Op::Transpose(a) => Cow::Owned(val(*a).transpose()?),
            Op::Relu(a) => Cow::Owned(val(*a).map(|x| if x > 0.0 { x } else { 0.0 })),
            Op::ReluMask(a) => Cow::Owned(val(*a).map(|x| if x > 0.0 { 1.0 } else { 0.0 })),
            Op::Sigmoid(a) => Cow::Owned(val(*a).map(stable_sigmoid)),
            Op::Softplus(a) => Cow::Owned(val(*a).map(stable_softplus)),
            Op::Log(a) => Cow::Owned(val(*a).map(f64::ln)),
            Op::Exp(a) => Cow::Owned(val(*a).map(f64::exp)),
            Op::SumTo { input, shape } => Cow::Owned(val(*input).sum_to(shape)?),
            Op::BroadcastTo { input, shape } => Cow::Owned(val(*input).broadcast_to(shape)?),
            Op::RowMax(a) => Cow::Owned(val(*a).row_max()?),
            Op::SelectClass { input, labels } => {
                let y = tensor_labels(val(*labels))?;
                Cow::Owned(val(*input).select_class(&y)?)
            }
            Op::ScatterClass {
                input,
                labels,
                classes,
            } => {
                let y = tensor_labels(val(*labels))?;
                Cow::Owned(val(*input).scatter_class(&y, *classes)?)
            }
            Op::SoftmaxXent { logits, labels } => {
                let y = tensor_labels(val(*labels))?;
                Cow::Owned(softmax_xent_forward(val(*logits), &y)?)
            }
            Op::GatherCoords { input, coords } => Cow::Owned(val(*input).gather_coords(coords)?),
            Op::ScatterCoords { input, coords, dim } => {
                Cow::Owned(val(*input).scatter_coords(coords, *dim)?)
            }
            Op::Reshape { input, shape } => Cow::Owned(val(*input).reshape(shape)?),
            Op::Conv2dValid { input, kernel } => Cow::Owned(val(*input).conv2d_valid(val(*kernel))?),
            Op::Pad2d { input, pad } => Cow::Owned(val(*input).pad2d(*pad)?),
            Op::Crop2d { input, crop } => Cow::Owned(val(*input).crop2d(*crop)?),
            Op::Permute4 { input, axes } => Cow::Owned(val(*input).permute4(*axes)?),
            Op::FlipHw(input) => Cow::Owned(val(*input).flip_hw()?),
        };
        if t.shape() != node.shape {
            return Err(Error::ShapeMismatch(format!(
                "node {id} ({}) inferred {:?}, evaluated {:?}",
                op_name(&node.op),
                node.shape,
                t.shape()
            )));
        }
        Ok(t)
    }
}

fn op_inputs(op: &Op) -> Vec<NodeId> {
    match op {
        Op::Leaf { .. } | Op::Const(_) => vec![],
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::Matmul(a, b) => {
            vec![*a, *b]
        }
        Op::Neg(a)
        | Op::Transpose(a)
        | Op::Relu(a)
        | Op::ReluMask(a)
        | Op::Sigmoid(a)
        | Op::Softplus(a)
        | Op::Log(a)
        | Op::Exp(a)
        | Op::RowMax(a)
        | Op::FlipHw(a) => vec![*a],
        Op::SumTo { input, .. }
        | Op::BroadcastTo { input, .. }
        | Op::GatherCoords { input, .. }
        | Op::ScatterCoords { input, .. }
        | Op::Reshape { input, .. }
        | Op::Pad2d { input, .. }
        | Op::Crop2d { input, .. }
        | Op::Permute4 { input, .. } => vec![*input],
        Op::SelectClass { input, labels }
        | Op::ScatterClass { input, labels, .. }
        | Op::SoftmaxXent {
            logits: input,
            labels,
        } => vec![*input, *labels],
        Op::Conv2dValid { input, kernel } => vec![*input, *kernel],
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf { .. } => "leaf",
        Op::Const(_) => "const",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Div(..) => "div",
        Op::Neg(..) => "neg",
        Op::Matmul(..) => "matmul",
        Op::Transpose(..) => "transpose",
        Op::Relu(..) => "relu",
        Op::ReluMask(..) => "relu_mask",
        Op::Sigmoid(..) => "sigmoid",
        Op::Softplus(..) => "softplus",
        Op::Log(..) => "log",
        Op::Exp(..) => "exp",
        Op::SumTo { .. } => "sum_to",
        Op::BroadcastTo { .. } => "broadcast_to",
        Op::RowMax(..) => "row_max",
        Op::SelectClass { .. } => "select_class",
        Op::ScatterClass { .. } => "scatter_class",
        Op::SoftmaxXent { .. } => "softmax_xent",
        Op::GatherCoords { .. } => "gather_coords",
        Op::ScatterCoords { .. } => "scatter_coords",
        Op::Reshape { .. } => "reshape",
        Op::Conv2dValid { .. } => "conv2d",
        Op::Pad2d { .. } => "pad2d",
        Op::Crop2d { .. } => "crop2d",
        Op::Permute4 { .. } => "permute4",
        Op::FlipHw(..) => "flip_hw",
    }
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn stable_softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn tensor_labels(t: &Tensor) -> Result<Vec<usize>> {
    t.data()
        .iter()
        .map(|&v| {
            if v < 0.0 || v.fract() != 0.0 {
                Err(Error::InvalidArgument(format!("label {v} is not an index")))
            } else {
                Ok(v as usize)
            }
        })
        .collect()
}

/// Integer labels packed as an f64 tensor, for binding label leaves.
pub fn labels_tensor(labels: &[usize]) -> Tensor {
    Tensor::from_vec(labels.iter().map(|&y| y as f64).collect())
}

fn softmax_xent_forward(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let s = logits.shape();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "softmax_xent {s:?} with {} labels",
            labels.len()
        )));
    }
    let (n, k) = (s[0], s[1]);
    let mut out = Vec::with_capacity(n);
    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::InvalidArgument(format!(
                "label {y} out of range for {k} classes"
            )));
        }
        let row = &logits.data()[i * k..(i + 1) * k];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|&z| (z - m).exp()).sum::<f64>().ln();
        out.push(lse - row[y]);
    }
    Tensor::new(vec![n], out)
}

/// Max over coordinates of |analytic - central difference| / (|analytic| + 1e-12),
/// probing `f` at `point +- step * e_i`.
pub fn finite_diff_check(
    f: &dyn Fn(&Tensor) -> Result<f64>,
    analytic: &Tensor,
    point: &Tensor,
    step: f64,
) -> Result<f64> {
    if step <= 0.0 {
        return Err(Error::InvalidArgument("step must be positive".into()));
    }
    if analytic.shape() != point.shape() {
        return Err(Error::ShapeMismatch(format!(
            "gradient {:?} vs point {:?}",
            analytic.shape(),
            point.shape()
        )));
    }
    let mut worst = 0.0f64;
    let mut probe = point.clone();
    for i in 0..point.numel() {
        let x0 = point.data()[i];
        probe.data_mut()[i] = x0 + step;
        let fp = f(&probe)?;
        probe.data_mut()[i] = x0 - step;
        let fm = f(&probe)?;
        probe.data_mut()[i] = x0;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite {
                op: "finite_diff_check probe".into(),
            });
        }
        let numeric = (fp - fm) / (2.0 * step);
        let a = analytic.data()[i];
        let rel = (a - numeric).abs() / (a.abs() + 1e-12);
        worst = worst.max(rel);
    }
    Ok(worst)
}

/// Central-difference gradient of a scalar function, as an independent oracle.
pub fn central_diff_gradient(
    f: &dyn Fn(&Tensor) -> Result<f64>,
    point: &Tensor,
    step: f64,
) -> Result<Tensor> {
    let mut out = Tensor::zeros(point.shape());
    let mut probe = point.clone();
    for i in 0..point.numel() {
        let x0 = point.data()[i];
        probe.data_mut()[i] = x0 + step;
        let fp = f(&probe)?;
        probe.data_mut()[i] = x0 - step;
        let fm = f(&probe)?;
        probe.data_mut()[i] = x0;
        out.data_mut()[i] = (fp - fm) / (2.0 * step);
    }
    Ok(out)
}
