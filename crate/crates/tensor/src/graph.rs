//! Eager reverse-mode tape.
//!
//! Every op is evaluated when it is recorded; the tape keeps what the
//! backward pass needs. Nodes are appended in evaluation order, so node ids
//! are a topological order and backward is a single reverse sweep.
//! [`Graph::replay`] re-evaluates every recorded op from the current leaf
//! values, which is what the finite-difference checker uses.

use std::collections::BTreeMap;

use crate::error::{Result, TensorError};
use crate::ops::elementwise::{self, broadcast_shape, reduce_to};
use crate::ops::norm::{self, BatchNormConfig, BatchNormState, BnCache};
use crate::ops::roi::{self, RoiCells};
use crate::ops::{self, conv, loss, pool, PoolSpec};
use crate::rng::fnv1a;
use crate::{Mode, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Input,
    Param(String),
    Conv2d {
        x: NodeId,
        w: NodeId,
        stride: (usize, usize),
        pad: (usize, usize),
    },
    MaxPool {
        x: NodeId,
        spec: PoolSpec,
        argmax: Vec<usize>,
    },
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
        /// Running statistics for infer mode; `None` means batch statistics.
        frozen: Option<(Vec<f64>, Vec<f64>)>,
        cache: BnCache,
    },
    Dropout {
        x: NodeId,
        mask: Vec<f64>,
    },
    Dense {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    Relu {
        x: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        x: NodeId,
        factor: f64,
    },
    Sum {
        x: NodeId,
    },
    SumAxis {
        x: NodeId,
        axis: usize,
    },
    Reshape {
        x: NodeId,
        shape: Vec<usize>,
    },
    Narrow {
        x: NodeId,
        start: usize,
        len: usize,
    },
    Upsample {
        x: NodeId,
        factor: usize,
    },
    Concat {
        xs: Vec<NodeId>,
    },
    Matmul {
        a: NodeId,
        b: NodeId,
    },
    Transpose {
        x: NodeId,
    },
    Softmax {
        x: NodeId,
    },
    SoftmaxCe {
        logits: NodeId,
        labels: Vec<usize>,
        weights: Option<Vec<f64>>,
        probs: Vec<f64>,
    },
    Bce {
        logits: NodeId,
        targets: Vec<f64>,
        weights: Vec<f64>,
        norm: f64,
    },
    RoiPool {
        x: NodeId,
        rois: Vec<RoiCells>,
        pool: usize,
        argmax: Vec<usize>,
    },
}

impl Op {
    fn inputs(&self) -> Vec<NodeId> {
        use Op::*;
        match self {
            Input | Param(_) => vec![],
            Conv2d { x, w, .. } => vec![*x, *w],
            BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Dense { x, w, b } => vec![*x, *w, *b],
            Add { a, b } | Mul { a, b } | Matmul { a, b } => vec![*a, *b],
            MaxPool { x, .. }
            | Dropout { x, .. }
            | Relu { x }
            | Scale { x, .. }
            | Sum { x }
            | SumAxis { x, .. }
            | Reshape { x, .. }
            | Narrow { x, .. }
            | Upsample { x, .. }
            | Transpose { x }
            | Softmax { x }
            | RoiPool { x, .. } => vec![*x],
            SoftmaxCe { logits, .. } | Bce { logits, .. } => vec![*logits],
            Concat { xs } => xs.clone(),
        }
    }

    fn name(&self) -> &'static str {
        use Op::*;
        match self {
            Input => "input",
            Param(_) => "param",
            Conv2d { .. } => "conv2d",
            MaxPool { .. } => "maxpool",
            BatchNorm { .. } => "batchnorm",
            Dropout { .. } => "dropout",
            Dense { .. } => "dense",
            Relu { .. } => "relu",
            Add { .. } => "add",
            Mul { .. } => "mul",
            Scale { .. } => "scale",
            Sum { .. } => "sum",
            SumAxis { .. } => "sum_axis",
            Reshape { .. } => "reshape",
            Narrow { .. } => "narrow",
            Upsample { .. } => "upsample",
            Concat { .. } => "concat",
            Matmul { .. } => "matmul",
            Transpose { .. } => "transpose",
            Softmax { .. } => "softmax",
            SoftmaxCe { .. } => "softmax_ce",
            Bce { .. } => "bce",
            RoiPool { .. } => "roi_pool",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients of a scalar loss keyed by parameter name.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    grads: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.grads.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.grads.iter()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Euclidean norm over every gradient entry.
    pub fn global_norm(&self) -> f64 {
        self.grads
            .values()
            .flat_map(|t| t.data().iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.grads.values_mut() {
            for g in t.data_mut() {
                *g *= factor;
            }
        }
    }

    pub fn into_map(self) -> BTreeMap<String, Tensor> {
        self.grads
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<String, NodeId>,
}

fn eval(op: &mut Op, nodes: &[Node]) -> Result<Tensor> {
    let v = |id: &NodeId| &nodes[id.0].value;
    match op {
        Op::Input | Op::Param(_) => unreachable!("leaves are never re-evaluated"),
        Op::Conv2d { x, w, stride, pad } => conv::conv2d(v(x), v(w), *stride, *pad),
        Op::MaxPool { x, spec, argmax } => {
            let (t, a) = pool::maxpool(v(x), spec)?;
            *argmax = a;
            Ok(t)
        }
        Op::BatchNorm {
            x,
            gamma,
            beta,
            eps,
            frozen,
            cache,
        } => {
            let (mean, var) = match frozen {
                Some((m, s)) => (m.clone(), s.clone()),
                None => norm::batch_stats(v(x))?,
            };
            let (t, c) = norm::normalize(v(x), v(gamma), v(beta), &mean, &var, *eps)?;
            *cache = c;
            Ok(t)
        }
        Op::Dropout { x, mask } => {
            let data = v(x).data().iter().zip(mask.iter()).map(|(a, m)| a * m).collect();
            Tensor::new(v(x).shape().to_vec(), data)
        }
        Op::Dense { x, w, b } => ops::dense(v(x), v(w), v(b)),
        Op::Relu { x } => Ok(ops::relu(v(x))),
        Op::Add { a, b } => elementwise::add(v(a), v(b)),
        Op::Mul { a, b } => elementwise::mul(v(a), v(b)),
        Op::Scale { x, factor } => {
            let f = *factor;
            Ok(v(x).map(|t| t * f))
        }
        Op::Sum { x } => Ok(Tensor::scalar(v(x).data().iter().sum())),
        Op::SumAxis { x, axis } => elementwise::sum_axis(v(x), *axis),
        Op::Reshape { x, shape } => v(x).clone().reshape(shape),
        Op::Narrow { x, start, len } => {
            let t = v(x);
            let row: usize = t.shape()[1..].iter().product();
            let mut shape = t.shape().to_vec();
            shape[0] = *len;
            Tensor::new(shape, t.data()[*start * row..(*start + *len) * row].to_vec())
        }
        Op::Upsample { x, factor } => ops::upsample_nearest(v(x), *factor),
        Op::Concat { xs } => {
            let ts: Vec<&Tensor> = xs.iter().map(v).collect();
            ops::concat_channels(&ts)
        }
        Op::Matmul { a, b } => elementwise::matmul(v(a), v(b)),
        Op::Transpose { x } => elementwise::transpose_last2(v(x)),
        Op::Softmax { x } => Ok(elementwise::softmax_last(v(x))),
        Op::SoftmaxCe {
            logits,
            labels,
            weights,
            probs,
        } => {
            let (l, p) = loss::softmax_ce_weighted(v(logits), labels, weights.as_deref())?;
            *probs = p;
            Ok(Tensor::scalar(l))
        }
        Op::Bce {
            logits,
            targets,
            weights,
            norm,
        } => Ok(Tensor::scalar(loss::bce_with_logits(
            v(logits).data(),
            targets,
            weights,
            *norm,
        ))),
        Op::RoiPool {
            x,
            rois,
            pool,
            argmax,
        } => {
            let (t, a) = roi::roi_max_pool(v(x), rois, *pool)?;
            *argmax = a;
            Ok(t)
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

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn op_name(&self, id: NodeId) -> &'static str {
        self.nodes[id.0].op.name()
    }

    /// Ids of the inputs of `id`; every one is smaller than `id`.
    pub fn inputs(&self, id: NodeId) -> Vec<NodeId> {
        self.nodes[id.0].op.inputs()
    }

    /// Constant leaf.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Input,
            requires_grad: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Trainable leaf. Registering the same name twice returns the first node.
    pub fn param(&mut self, name: &str, value: &Tensor) -> NodeId {
        if let Some(&id) = self.params.get(name) {
            return id;
        }
        self.nodes.push(Node {
            value: value.clone(),
            op: Op::Param(name.to_string()),
            requires_grad: true,
        });
        let id = NodeId(self.nodes.len() - 1);
        self.params.insert(name.to_string(), id);
        id
    }

    pub fn param_id(&self, name: &str) -> Option<NodeId> {
        self.params.get(name).copied()
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, NodeId)> {
        self.params.iter().map(|(k, &v)| (k.as_str(), v))
    }

    /// Overwrites a leaf value. Dependent nodes are stale until [`Graph::replay`].
    pub fn set_leaf(&mut self, id: NodeId, value: Tensor) -> Result<()> {
        let node = &mut self.nodes[id.0];
        if !matches!(node.op, Op::Input | Op::Param(_)) {
            return Err(TensorError::InvalidArgument(format!(
                "node {} is a {} op, not a leaf",
                id.0,
                node.op.name()
            )));
        }
        if node.value.shape() != value.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "set_leaf",
                detail: format!("{:?} vs {:?}", node.value.shape(), value.shape()),
            });
        }
        node.value = value;
        Ok(())
    }

    fn push(&mut self, mut op: Op) -> Result<NodeId> {
        let value = eval(&mut op, &self.nodes)?;
        let requires_grad = op.inputs().iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// Re-evaluates every op from the current leaf values.
    pub fn replay(&mut self) -> Result<()> {
        for i in 0..self.nodes.len() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &mut rest[0];
            if matches!(node.op, Op::Input | Op::Param(_)) {
                continue;
            }
            node.value = eval(&mut node.op, before)?;
        }
        Ok(())
    }

    /// Hash of every piecewise-linear branch taken (ReLU signs, pooling argmax).
    ///
    /// Two evaluations with equal signatures lie on the same smooth piece.
    pub fn branch_signature(&self) -> u64 {
        let mut bytes = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu { x } => {
                    bytes.extend(self.nodes[x.0].value.data().iter().map(|&v| u8::from(v > 0.0)));
                }
                Op::MaxPool { argmax, .. } | Op::RoiPool { argmax, .. } => {
                    for a in argmax {
                        bytes.extend_from_slice(&(*a as u64).to_le_bytes());
                    }
                }
                _ => {}
            }
        }
        fnv1a(&bytes)
    }

    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> Result<NodeId> {
        self.push(Op::Conv2d { x, w, stride, pad })
    }

    pub fn maxpool2d(
        &mut self,
        x: NodeId,
        window: (usize, usize),
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> Result<NodeId> {
        self.maxpool(x, PoolSpec::planar(window, stride, pad))
    }

    /// Pooling over `(depth, h, w)` of a depth-folded `[N*D, C, H, W]` tensor.
    pub fn maxpool(&mut self, x: NodeId, spec: PoolSpec) -> Result<NodeId> {
        self.push(Op::MaxPool {
            x,
            spec,
            argmax: Vec::new(),
        })
    }

    pub fn batchnorm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mode: Mode,
        config: BatchNormConfig,
        state: &mut BatchNormState,
    ) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        let (n, c, inner) = norm::layout(&shape)?;
        if state.running_mean.len() != c {
            return Err(TensorError::ShapeMismatch {
                op: "batchnorm",
                detail: format!("state has {} channels, input {c}", state.running_mean.len()),
            });
        }
        let frozen = match mode {
            Mode::Train => {
                if n < 2 {
                    return Err(TensorError::DegenerateBatch(n));
                }
                let (mean, var) = norm::batch_stats(self.value(x))?;
                norm::update_running(state, &mean, &var, n * inner, config.momentum);
                None
            }
            Mode::Infer => Some((state.running_mean.clone(), state.running_var.clone())),
        };
        self.push(Op::BatchNorm {
            x,
            gamma,
            beta,
            eps: config.eps,
            frozen,
            cache: BnCache::default(),
        })
    }

    pub fn dropout(&mut self, x: NodeId, rate: f64, mode: Mode, seed: u64) -> Result<NodeId> {
        ops::check_rate(rate)?;
        if mode == Mode::Infer || rate == 0.0 {
            return Ok(x);
        }
        let mask = ops::dropout_mask(self.value(x).numel(), rate, seed);
        self.push(Op::Dropout { x, mask })
    }

    pub fn dense(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Dense { x, w, b })
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Relu { x }).expect("relu cannot fail")
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        broadcast_shape(self.shape(a), self.shape(b))?;
        self.push(Op::Add { a, b })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        broadcast_shape(self.shape(a), self.shape(b))?;
        self.push(Op::Mul { a, b })
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        self.push(Op::Scale { x, factor }).expect("scale cannot fail")
    }

    /// Sum of all entries, as a one-element tensor.
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Sum { x }).expect("sum cannot fail")
    }

    pub fn sum_axis(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        self.push(Op::SumAxis { x, axis })
    }

    /// Elementwise mean of same-shape nodes.
    pub fn mean_of(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        let (&first, rest) = xs
            .split_first()
            .ok_or_else(|| TensorError::InvalidArgument("mean of zero nodes".into()))?;
        let mut acc = first;
        for &x in rest {
            if self.shape(x) != self.shape(first) {
                return Err(TensorError::ShapeMismatch {
                    op: "mean_of",
                    detail: format!("{:?} vs {:?}", self.shape(first), self.shape(x)),
                });
            }
            acc = self.add(acc, x)?;
        }
        Ok(self.scale(acc, 1.0 / xs.len() as f64))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        self.push(Op::Reshape {
            x,
            shape: shape.to_vec(),
        })
    }

    /// Rows `start..start + len` of the leading axis.
    pub fn narrow(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let n = self.shape(x)[0];
        if start + len > n || self.shape(x).len() < 2 {
            return Err(TensorError::Extent {
                op: "narrow",
                detail: format!("rows {start}..{} of {:?}", start + len, self.shape(x)),
            });
        }
        self.push(Op::Narrow { x, start, len })
    }

    pub fn upsample_nearest(&mut self, x: NodeId, factor: usize) -> Result<NodeId> {
        if factor == 1 {
            return Ok(x);
        }
        self.push(Op::Upsample { x, factor })
    }

    pub fn concat_channels(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        self.push(Op::Concat { xs: xs.to_vec() })
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Matmul { a, b })
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::Transpose { x })
    }

    pub fn softmax_last(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Softmax { x }).expect("softmax cannot fail")
    }

    pub fn softmax_ce(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        self.push(Op::SoftmaxCe {
            logits,
            labels: labels.to_vec(),
            weights: None,
            probs: Vec::new(),
        })
    }

    /// Cross-entropy normalized by the weight sum.
    pub fn softmax_ce_weighted(
        &mut self,
        logits: NodeId,
        labels: &[usize],
        weights: &[f64],
    ) -> Result<NodeId> {
        self.push(Op::SoftmaxCe {
            logits,
            labels: labels.to_vec(),
            weights: Some(weights.to_vec()),
            probs: Vec::new(),
        })
    }

    /// `sum(w * bce(logit, target)) / norm`; zero weights ignore an entry.
    pub fn bce_with_logits(
        &mut self,
        logits: NodeId,
        targets: Vec<f64>,
        weights: Vec<f64>,
        norm: f64,
    ) -> Result<NodeId> {
        let n = self.value(logits).numel();
        if targets.len() != n || weights.len() != n || norm <= 0.0 {
            return Err(TensorError::ShapeMismatch {
                op: "bce",
                detail: format!(
                    "{n} logits, {} targets, {} weights, norm {norm}",
                    targets.len(),
                    weights.len()
                ),
            });
        }
        self.push(Op::Bce {
            logits,
            targets,
            weights,
            norm,
        })
    }

    pub fn roi_max_pool(&mut self, x: NodeId, rois: &[RoiCells], pool: usize) -> Result<NodeId> {
        self.push(Op::RoiPool {
            x,
            rois: rois.to_vec(),
            pool,
            argmax: Vec::new(),
        })
    }

    /// d(loss)/d(parameter) for every registered parameter.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let loss_shape = self.shape(loss);
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NonScalarLoss(loss_shape.to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut out = BTreeMap::new();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Op::Param(name) = &node.op {
                out.insert(name.clone(), Tensor::new(node.value.shape().to_vec(), g)?);
                continue;
            }
            if node.requires_grad {
                self.backprop(node, &g, &mut grads)?;
            }
        }
        for (name, &id) in &self.params {
            out.entry(name.clone())
                .or_insert_with(|| Tensor::zeros(self.value(id).shape()));
        }
        Ok(Gradients { grads: out })
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn backprop(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let mut acc = |id: NodeId, d: Vec<f64>| {
            if !self.nodes[id.0].requires_grad {
                return;
            }
            match &mut grads[id.0] {
                Some(existing) => {
                    for (e, v) in existing.iter_mut().zip(d) {
                        *e += v;
                    }
                }
                slot @ None => *slot = Some(d),
            }
        };
        let val = |id: &NodeId| &self.nodes[id.0].value;
        match &node.op {
            Op::Input | Op::Param(_) => {}
            Op::Conv2d { x, w, stride, pad } => {
                let gy = Tensor::new(node.value.shape().to_vec(), g.to_vec())?;
                let (dx, dw) =
                    conv::conv2d_backward(val(x), val(w), &gy, *stride, *pad, self.needs(*x))?;
                if let Some(dx) = dx {
                    acc(*x, dx.into_data());
                }
                acc(*w, dw.into_data());
            }
            Op::MaxPool { x, argmax, .. } | Op::RoiPool { x, argmax, .. } => {
                acc(*x, pool::maxpool_backward(val(x).numel(), argmax, g));
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                frozen,
                cache,
                ..
            } => {
                let (dx, dgamma, dbeta) = norm::batchnorm_backward(
                    val(x).shape(),
                    val(gamma).data(),
                    cache,
                    g,
                    frozen.is_none(),
                );
                acc(*x, dx);
                acc(*gamma, dgamma);
                acc(*beta, dbeta);
            }
            Op::Dropout { x, mask } => {
                acc(*x, g.iter().zip(mask).map(|(a, m)| a * m).collect());
            }
            Op::Dense { x, w, b } => {
                let (n, f, k) = ops::dense_dims(val(x).shape(), val(w).shape(), val(b).shape())?;
                use ops::linalg::{gemm, MatRef};
                let gm = MatRef::row_major(g, n, k);
                if self.needs(*x) {
                    let mut dx = vec![0.0; n * f];
                    gemm(1.0, gm, MatRef::row_major(val(w).data(), f, k).t(), 0.0, &mut dx);
                    acc(*x, dx);
                }
                let mut dw = vec![0.0; f * k];
                gemm(1.0, MatRef::row_major(val(x).data(), n, f).t(), gm, 0.0, &mut dw);
                acc(*w, dw);
                let mut db = vec![0.0; k];
                for row in g.chunks(k.max(1)) {
                    for (d, v) in db.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                acc(*b, db);
            }
            Op::Relu { x } => {
                let dx = g
                    .iter()
                    .zip(val(x).data())
                    .map(|(&gv, &xv)| if xv > 0.0 { gv } else { 0.0 })
                    .collect();
                acc(*x, dx);
            }
            Op::Add { a, b } => {
                let out = node.value.shape();
                acc(*a, reduce_to(val(a).shape(), out, g));
                acc(*b, reduce_to(val(b).shape(), out, g));
            }
            Op::Mul { a, b } => {
                let out = node.value.shape();
                let (av, bv) = (val(a), val(b));
                let mut ga = vec![0.0; g.len()];
                let mut gb = vec![0.0; g.len()];
                elementwise::for_each_broadcast(av.shape(), bv.shape(), out, |o, ia, ib| {
                    ga[o] = g[o] * bv.data()[ib];
                    gb[o] = g[o] * av.data()[ia];
                });
                acc(*a, reduce_to(av.shape(), out, &ga));
                acc(*b, reduce_to(bv.shape(), out, &gb));
            }
            Op::Scale { x, factor } => acc(*x, g.iter().map(|v| v * factor).collect()),
            Op::Sum { x } => acc(*x, vec![g[0]; val(x).numel()]),
            Op::SumAxis { x, .. } => {
                let (gs, xs) = (node.value.shape(), val(x).shape());
                let mut d = vec![0.0; val(x).numel()];
                elementwise::for_each_broadcast(gs, gs, xs, |o, i, _| d[o] = g[i]);
                acc(*x, d);
            }
            Op::Reshape { x, .. } => acc(*x, g.to_vec()),
            Op::Narrow { x, start, .. } => {
                let t = val(x);
                let row: usize = t.shape()[1..].iter().product();
                let mut d = vec![0.0; t.numel()];
                d[start * row..start * row + g.len()].copy_from_slice(g);
                acc(*x, d);
            }
            Op::Upsample { x, factor } => {
                acc(*x, ops::upsample_backward(val(x).shape(), *factor, g));
            }
            Op::Concat { xs } => {
                let s = node.value.shape();
                let (n, total) = (s[0], s[1]);
                let inner: usize = s[2..].iter().product();
                let mut offset = 0;
                for x in xs {
                    let c = val(x).shape()[1];
                    let mut d = Vec::with_capacity(n * c * inner);
                    for b in 0..n {
                        let start = (b * total + offset) * inner;
                        d.extend_from_slice(&g[start..start + c * inner]);
                    }
                    acc(*x, d);
                    offset += c;
                }
            }
            Op::Matmul { a, b } => {
                let (da, db) = elementwise::matmul_backward(
                    val(a),
                    val(b),
                    g,
                    (self.needs(*a), self.needs(*b)),
                )?;
                if let Some(da) = da {
                    acc(*a, da);
                }
                if let Some(db) = db {
                    acc(*b, db);
                }
            }
            Op::Transpose { x } => {
                let gt = Tensor::new(node.value.shape().to_vec(), g.to_vec())?;
                acc(*x, elementwise::transpose_last2(&gt)?.into_data());
            }
            Op::Softmax { x } => acc(*x, elementwise::softmax_last_backward(&node.value, g)),
            Op::SoftmaxCe {
                logits,
                labels,
                weights,
                probs,
            } => {
                let k = val(logits).shape()[1];
                let total: f64 = weights.as_ref().map_or(labels.len() as f64, |w| w.iter().sum());
                let mut d = probs.clone();
                if total > 0.0 {
                    for (i, row) in d.chunks_mut(k).enumerate() {
                        row[labels[i]] -= 1.0;
                        let w = weights.as_ref().map_or(1.0, |w| w[i]) / total * g[0];
                        for v in row.iter_mut() {
                            *v *= w;
                        }
                    }
                } else {
                    d.fill(0.0);
                }
                acc(*logits, d);
            }
            Op::Bce {
                logits,
                targets,
                weights,
                norm,
            } => {
                let d = val(logits)
                    .data()
                    .iter()
                    .zip(targets)
                    .zip(weights)
                    .map(|((&z, &t), &w)| {
                        if w == 0.0 {
                            0.0
                        } else {
                            w * (loss::sigmoid(z) - t) / norm * g[0]
                        }
                    })
                    .collect();
                acc(*logits, d);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_all_ones() {
        let mut g = Graph::new();
        let p = g.param("p", &Tensor::from_fn(&[2, 3], |i| i as f64 * 0.7 - 1.0));
        let l = g.sum(p);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get("p").unwrap(), &Tensor::ones(&[2, 3]));
    }

    #[test]
    fn zero_scaled_loss_gives_zero_gradient() {
        let mut g = Graph::new();
        let p = g.param("p", &Tensor::from_fn(&[4], |i| i as f64));
        let s = g.scale(p, 0.0);
        let l = g.sum(s);
        assert_eq!(g.backward(l).unwrap().get("p").unwrap(), &Tensor::zeros(&[4]));
    }

    #[test]
    fn untouched_parameters_get_zero_gradients() {
        let mut g = Graph::new();
        let p = g.param("used", &Tensor::ones(&[2]));
        g.param("unused", &Tensor::ones(&[3]));
        let l = g.sum(p);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get("unused").unwrap(), &Tensor::zeros(&[3]));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let p = g.param("p", &Tensor::ones(&[2]));
        assert!(matches!(g.backward(p), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn inputs_precede_nodes() {
        let mut g = Graph::new();
        let x = g.input(Tensor::ones(&[1, 1, 3, 3]));
        let w = g.param("w", &Tensor::ones(&[1, 1, 2, 2]));
        let y = g.conv2d(x, w, (1, 1), (0, 0)).unwrap();
        let r = g.relu(y);
        let l = g.sum(r);
        for id in [y, r, l] {
            assert!(g.inputs(id).iter().all(|i| i.index() < id.index()));
        }
    }

    #[test]
    fn shared_param_accumulates() {
        let mut g = Graph::new();
        let p = g.param("p", &Tensor::full(&[3], 2.0));
        let p2 = g.param("p", &Tensor::full(&[3], 99.0));
        assert_eq!(p, p2);
        let sq = g.mul(p, p).unwrap();
        let l = g.sum(sq);
        assert_eq!(g.backward(l).unwrap().get("p").unwrap().data(), &[4.0, 4.0, 4.0]);
    }

    #[test]
    fn replay_tracks_leaf_updates() {
        let mut g = Graph::new();
        let p = g.param("p", &Tensor::full(&[2], 1.0));
        let sq = g.mul(p, p).unwrap();
        let l = g.sum(sq);
        g.set_leaf(p, Tensor::full(&[2], 3.0)).unwrap();
        g.replay().unwrap();
        assert_eq!(g.value(l).item(), Some(18.0));
    }
}
