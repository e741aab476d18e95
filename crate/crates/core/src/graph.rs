//! Reverse-mode automatic differentiation over a recorded computation graph.
//!
//! A [`Graph`] is built eagerly: every operator computes its output when it is
//! added, so node ids are in topological order by construction. Parameters
//! are read by reference from a [`ParamStore`]; [`Graph::backward`] returns a
//! [`Gradients`] value rather than mutating the store, which lets callers
//! accumulate over a mini-batch with [`ParamStore::accumulate`].
//!
//! Operators are limited to what the expert and gating networks need.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::param::{ParamId, ParamStore};
use crate::tensor::{self, Tensor};

static EMPTY_STORE: ParamStore = ParamStore::new();

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(ParamId),
    Conv2d {
        input: NodeId,
        kernel: NodeId,
        bias: NodeId,
        stride: usize,
        padding: usize,
    },
    FullyConnected {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
    },
    Relu(NodeId),
    Softmax(NodeId),
    Mean(Vec<NodeId>),
    MeanPool2(NodeId),
    GlobalAvgPool(NodeId),
    Interleave {
        a: NodeId,
        b: NodeId,
    },
    Dropout {
        input: NodeId,
        mask: Vec<f64>,
    },
    CrossEntropy {
        scores: NodeId,
        probs: Vec<f64>,
        label: usize,
    },
    Mix {
        weights: NodeId,
        a: NodeId,
        b: NodeId,
    },
    EvenFallback {
        input: NodeId,
        triggered: bool,
    },
    Add(NodeId, NodeId),
    Scale(NodeId, f64),
    Sum(NodeId),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    /// `None` for parameter nodes, whose value lives in the store.
    value: Option<Tensor>,
    requires_grad: bool,
}

/// Gradients produced by one backward pass.
#[derive(Debug, Clone)]
pub struct Gradients {
    nodes: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Tensor)>,
}

impl Gradients {
    /// Gradient of the loss with respect to a node that requires grad.
    pub fn wrt(&self, node: NodeId) -> Option<&Tensor> {
        self.nodes.get(node.0).and_then(|g| g.as_ref())
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.iter().find(|(p, _)| *p == id).map(|(_, g)| g)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params.iter().map(|(id, g)| (*id, g))
    }
}

pub struct Graph<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, NodeId>,
}

impl Graph<'static> {
    /// A graph with no parameters, for operator-level use.
    pub fn detached() -> Self {
        Graph::new(&EMPTY_STORE)
    }
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Graph {
            store,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        let node = &self.nodes[id.0];
        match (&node.value, &node.op) {
            (Some(v), _) => v,
            (None, Op::Param(pid)) => self.store.get(*pid).value(),
            (None, _) => unreachable!("non-parameter node without a value"),
        }
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value: Some(value),
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// A constant input; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value, false)
    }

    /// An input whose gradient is reported by [`Gradients::wrt`].
    pub fn variable(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value, true)
    }

    /// The node for a stored parameter. Repeated calls return the same node,
    /// so shared weights accumulate a single gradient.
    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(&node) = self.param_nodes.get(&id) {
            return node;
        }
        let requires_grad = !self.store.get(id).is_frozen();
        self.nodes.push(Node {
            op: Op::Param(id),
            value: None,
            requires_grad,
        });
        let node = NodeId(self.nodes.len() - 1);
        self.param_nodes.insert(id, node);
        node
    }

    /// 2-D cross-correlation over an `HxWxDin` input with a
    /// `kh x kw x Din x Dout` kernel and zero padding.
    pub fn conv2d(
        &mut self,
        input: NodeId,
        kernel: NodeId,
        bias: NodeId,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId> {
        let out = conv2d_forward(self.value(input), self.value(kernel), self.value(bias), stride, padding)?;
        let rg = self.rg(input) || self.rg(kernel) || self.rg(bias);
        Ok(self.push(
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                padding,
            },
            out,
            rg,
        ))
    }

    /// `weight^T · input + bias` with `weight` stored as `D x M`.
    pub fn fully_connected(&mut self, input: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        let x = self.value(input);
        let w = self.value(weight);
        let b = self.value(bias);
        let (d, m) = match w.shape() {
            [d, m] => (*d, *m),
            s => {
                return Err(Error::shape(
                    "fully_connected",
                    format!("weight must be DxM, got {s:?}"),
                ))
            }
        };
        if x.len() != d {
            return Err(Error::shape(
                "fully_connected",
                format!("input has {} elements, weight expects {d}", x.len()),
            ));
        }
        if b.len() != m {
            return Err(Error::shape(
                "fully_connected",
                format!("bias has {} elements, weight produces {m}", b.len()),
            ));
        }
        let mut out = b.data().to_vec();
        let wd = w.data();
        for (i, &xi) in x.data().iter().enumerate() {
            let row = &wd[i * m..(i + 1) * m];
            for (o, &wv) in out.iter_mut().zip(row) {
                *o += xi * wv;
            }
        }
        let rg = self.rg(input) || self.rg(weight) || self.rg(bias);
        Ok(self.push(Op::FullyConnected { input, weight, bias }, Tensor::vector(out), rg))
    }

    pub fn relu(&mut self, input: NodeId) -> NodeId {
        let out = self.value(input).map(|v| if v > 0.0 { v } else { 0.0 });
        let rg = self.rg(input);
        self.push(Op::Relu(input), out, rg)
    }

    pub fn softmax(&mut self, input: NodeId) -> NodeId {
        let x = self.value(input);
        let out = Tensor::new(x.shape().to_vec(), tensor::softmax(x.data())).expect("softmax preserves shape");
        let rg = self.rg(input);
        self.push(Op::Softmax(input), out, rg)
    }

    /// Elementwise arithmetic mean of equally shaped nodes.
    pub fn mean(&mut self, inputs: &[NodeId]) -> Result<NodeId> {
        if inputs.is_empty() {
            return Err(Error::Empty("average pool over an empty set"));
        }
        let values: Vec<Tensor> = inputs.iter().map(|&i| self.value(i).clone()).collect();
        let out = tensor::mean_of(&values)?;
        let rg = inputs.iter().any(|&i| self.rg(i));
        Ok(self.push(Op::Mean(inputs.to_vec()), out, rg))
    }

    /// 2x2 mean pooling with stride 2; a trailing odd row or column is dropped.
    pub fn mean_pool2(&mut self, input: NodeId) -> Result<NodeId> {
        let x = self.value(input);
        let (h, w, c) = x.hwc()?;
        if h < 2 || w < 2 {
            return Err(Error::shape(
                "mean_pool2",
                format!("input {h}x{w} too small for 2x2 pooling"),
            ));
        }
        let (oh, ow) = (h / 2, w / 2);
        let mut out = vec![0.0; oh * ow * c];
        let xd = x.data();
        for oy in 0..oh {
            for ox in 0..ow {
                let o = &mut out[(oy * ow + ox) * c..(oy * ow + ox + 1) * c];
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let base = ((2 * oy + dy) * w + 2 * ox + dx) * c;
                    for (ov, &xv) in o.iter_mut().zip(&xd[base..base + c]) {
                        *ov += 0.25 * xv;
                    }
                }
            }
        }
        let rg = self.rg(input);
        Ok(self.push(Op::MeanPool2(input), Tensor::new(vec![oh, ow, c], out)?, rg))
    }

    /// Averages an `HxWxC` map over space into a length-`C` vector.
    pub fn global_avg_pool(&mut self, input: NodeId) -> Result<NodeId> {
        let x = self.value(input);
        let (h, w, c) = x.hwc()?;
        let mut out = vec![0.0; c];
        for px in x.data().chunks_exact(c) {
            for (o, v) in out.iter_mut().zip(px) {
                *o += v;
            }
        }
        let n = (h * w) as f64;
        out.iter_mut().for_each(|v| *v /= n);
        let rg = self.rg(input);
        Ok(self.push(Op::GlobalAvgPool(input), Tensor::vector(out), rg))
    }

    /// Channel interleaving of two `HxWxD` maps into `HxWx2D`: output
    /// channel `2d + 1` (0-based) is `a[d]` and channel `2d` is `b[d]`.
    pub fn interleave(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = interleave_channels(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Interleave { a, b }, out, rg))
    }

    /// Inverted dropout: in training, zero each element with probability
    /// `ratio` and scale survivors by `1 / (1 - ratio)`. Identity otherwise.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        input: NodeId,
        ratio: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<NodeId> {
        if !(0.0..1.0).contains(&ratio) {
            return Err(Error::InvalidArgument(format!(
                "dropout ratio must be in [0, 1), got {ratio}"
            )));
        }
        let n = self.value(input).len();
        let mask: Vec<f64> = if training && ratio > 0.0 {
            let keep = 1.0 / (1.0 - ratio);
            (0..n)
                .map(|_| if rng.random::<f64>() < ratio { 0.0 } else { keep })
                .collect()
        } else {
            vec![1.0; n]
        };
        let x = self.value(input);
        let out = Tensor::new(
            x.shape().to_vec(),
            x.data().iter().zip(&mask).map(|(v, m)| v * m).collect(),
        )?;
        let rg = self.rg(input);
        Ok(self.push(Op::Dropout { input, mask }, out, rg))
    }

    /// `-(s[label] - log sum exp s)` as a scalar node.
    pub fn cross_entropy(&mut self, scores: NodeId, label: usize) -> Result<NodeId> {
        let s = self.value(scores);
        if label >= s.len() {
            return Err(Error::LabelOutOfRange {
                label,
                classes: s.len(),
            });
        }
        let loss = tensor::log_sum_exp(s.data()) - s.data()[label];
        let probs = tensor::softmax(s.data());
        let rg = self.rg(scores);
        Ok(self.push(
            Op::CrossEntropy { scores, probs, label },
            Tensor::scalar(loss.max(0.0)),
            rg,
        ))
    }

    /// `weights[0] * a + weights[1] * b`.
    pub fn mix(&mut self, weights: NodeId, a: NodeId, b: NodeId) -> Result<NodeId> {
        let w = self.value(weights);
        if w.len() != 2 {
            return Err(Error::shape("mix", format!("expected 2 weights, got {}", w.len())));
        }
        let (w0, w1) = (w.data()[0], w.data()[1]);
        let out = self.value(a).zip_with(self.value(b), "mix", |x, y| w0 * x + w1 * y)?;
        let rg = self.rg(weights) || self.rg(a) || self.rg(b);
        Ok(self.push(Op::Mix { weights, a, b }, out, rg))
    }

    /// Identity, except that an all-zero input is replaced by the uniform
    /// vector `1/n` (which carries no gradient).
    pub fn even_fallback(&mut self, input: NodeId) -> NodeId {
        let x = self.value(input);
        let triggered = x.data().iter().all(|&v| v == 0.0);
        let out = if triggered {
            Tensor::filled(x.shape(), 1.0 / x.len() as f64)
        } else {
            x.clone()
        };
        let rg = self.rg(input);
        self.push(Op::EvenFallback { input, triggered }, out, rg)
    }

    /// Whether an [`even_fallback`](Self::even_fallback) node replaced its input.
    pub fn fallback_triggered(&self, id: NodeId) -> bool {
        matches!(self.nodes[id.0].op, Op::EvenFallback { triggered: true, .. })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.value(a).add(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Add(a, b), out, rg))
    }

    pub fn scale(&mut self, input: NodeId, factor: f64) -> NodeId {
        let out = self.value(input).scale(factor);
        let rg = self.rg(input);
        self.push(Op::Scale(input, factor), out, rg)
    }

    pub fn sum(&mut self, input: NodeId) -> NodeId {
        let out = Tensor::scalar(self.value(input).sum());
        let rg = self.rg(input);
        self.push(Op::Sum(input), out, rg)
    }

    /// Sign pattern of every ReLU input plus every fallback decision. Two
    /// evaluations with the same pattern lie on the same smooth piece.
    pub fn activation_pattern(&self) -> Vec<bool> {
        let mut pattern = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) => pattern.extend(self.value(*x).data().iter().map(|&v| v > 0.0)),
                Op::EvenFallback { triggered, .. } => pattern.push(*triggered),
                _ => {}
            }
        }
        pattern
    }

    /// Smallest `|x|` over all ReLU inputs; `f64::INFINITY` without ReLUs.
    pub fn min_relu_margin(&self) -> f64 {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(x) => Some(x),
                _ => None,
            })
            .flat_map(|x| self.value(x).data().iter().map(|v| v.abs()))
            .fold(f64::INFINITY, f64::min)
    }

    /// Back-propagates from a scalar `loss` node.
    ///
    /// Every node is visited once in reverse topological order and
    /// contributions to shared inputs are summed.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Backward(format!(
                "node {} has not been computed by a forward pass",
                loss.0
            )));
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::Backward(format!(
                "loss must be scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }

        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param(pid) if n.requires_grad => Some((
                    pid,
                    grads[..]
                        .get(i)
                        .cloned()
                        .flatten()
                        .unwrap_or_else(|| Tensor::zeros(self.store.get(pid).value().shape())),
                )),
                _ => None,
            })
            .collect();
        Ok(Gradients { nodes: grads, params })
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                padding,
            } => {
                let (dx, dk, db) = conv2d_backward(
                    self.value(*input),
                    self.value(*kernel),
                    g,
                    *stride,
                    *padding,
                    self.rg(*input),
                    self.rg(*kernel),
                );
                if let Some(dx) = dx {
                    self.accumulate(grads, *input, dx);
                }
                if let Some(dk) = dk {
                    self.accumulate(grads, *kernel, dk);
                }
                if self.rg(*bias) {
                    self.accumulate(grads, *bias, db);
                }
            }
            Op::FullyConnected { input, weight, bias } => {
                let x = self.value(*input);
                let w = self.value(*weight);
                let m = g.len();
                let gd = g.data();
                if self.rg(*input) {
                    let dx: Vec<f64> = w
                        .data()
                        .chunks_exact(m)
                        .map(|row| row.iter().zip(gd).map(|(a, b)| a * b).sum())
                        .collect();
                    self.accumulate(grads, *input, Tensor::new(x.shape().to_vec(), dx)?);
                }
                if self.rg(*weight) {
                    let mut dw = Vec::with_capacity(w.len());
                    for &xi in x.data() {
                        dw.extend(gd.iter().map(|gv| xi * gv));
                    }
                    self.accumulate(grads, *weight, Tensor::new(w.shape().to_vec(), dw)?);
                }
                if self.rg(*bias) {
                    self.accumulate(grads, *bias, g.clone());
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                let dx = xv.zip_with(g, "relu", |v, gv| if v > 0.0 { gv } else { 0.0 })?;
                self.accumulate(grads, *x, dx);
            }
            Op::Softmax(x) => {
                let s = self.value(NodeId(idx));
                let dot: f64 = s.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
                let dx = s.zip_with(g, "softmax", |sv, gv| sv * (gv - dot))?;
                self.accumulate(grads, *x, dx);
            }
            Op::Mean(inputs) => {
                let share = g.scale(1.0 / inputs.len() as f64);
                for &i in inputs {
                    if self.rg(i) {
                        self.accumulate(grads, i, share.clone());
                    }
                }
            }
            Op::MeanPool2(x) => {
                let xv = self.value(*x);
                let (h, w, c) = xv.hwc()?;
                let (oh, ow) = (h / 2, w / 2);
                let mut dx = vec![0.0; h * w * c];
                let gd = g.data();
                for oy in 0..oh {
                    for ox in 0..ow {
                        let go = &gd[(oy * ow + ox) * c..(oy * ow + ox + 1) * c];
                        for (dy, ddx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                            let base = ((2 * oy + dy) * w + 2 * ox + ddx) * c;
                            for (d, &gv) in dx[base..base + c].iter_mut().zip(go) {
                                *d += 0.25 * gv;
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(vec![h, w, c], dx)?);
            }
            Op::GlobalAvgPool(x) => {
                let xv = self.value(*x);
                let (h, w, c) = xv.hwc()?;
                let n = (h * w) as f64;
                let mut dx = Vec::with_capacity(h * w * c);
                for _ in 0..h * w {
                    dx.extend(g.data().iter().map(|gv| gv / n));
                }
                self.accumulate(grads, *x, Tensor::new(vec![h, w, c], dx)?);
            }
            Op::Interleave { a, b } => {
                let (h, w, d) = self.value(*a).hwc()?;
                let mut da = vec![0.0; h * w * d];
                let mut db = vec![0.0; h * w * d];
                for (p, gp) in g.data().chunks_exact(2 * d).enumerate() {
                    for k in 0..d {
                        db[p * d + k] = gp[2 * k];
                        da[p * d + k] = gp[2 * k + 1];
                    }
                }
                if self.rg(*a) {
                    self.accumulate(grads, *a, Tensor::new(vec![h, w, d], da)?);
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, Tensor::new(vec![h, w, d], db)?);
                }
            }
            Op::Dropout { input, mask } => {
                let dx = Tensor::new(
                    g.shape().to_vec(),
                    g.data().iter().zip(mask).map(|(gv, m)| gv * m).collect(),
                )?;
                self.accumulate(grads, *input, dx);
            }
            Op::CrossEntropy { scores, probs, label } => {
                let up = g.data()[0];
                let mut d: Vec<f64> = probs.iter().map(|p| p * up).collect();
                d[*label] -= up;
                let shape = self.value(*scores).shape().to_vec();
                self.accumulate(grads, *scores, Tensor::new(shape, d)?);
            }
            Op::Mix { weights, a, b } => {
                let w = self.value(*weights).data().to_vec();
                let av = self.value(*a);
                let bv = self.value(*b);
                if self.rg(*weights) {
                    let dw0: f64 = g.data().iter().zip(av.data()).map(|(x, y)| x * y).sum();
                    let dw1: f64 = g.data().iter().zip(bv.data()).map(|(x, y)| x * y).sum();
                    let shape = self.value(*weights).shape().to_vec();
                    self.accumulate(grads, *weights, Tensor::new(shape, vec![dw0, dw1])?);
                }
                if self.rg(*a) {
                    self.accumulate(grads, *a, g.scale(w[0]));
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, g.scale(w[1]));
                }
            }
            Op::EvenFallback { input, triggered } => {
                if !triggered {
                    self.accumulate(grads, *input, g.clone());
                }
            }
            Op::Add(a, b) => {
                if self.rg(*a) {
                    self.accumulate(grads, *a, g.clone());
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, g.clone());
                }
            }
            Op::Scale(x, factor) => {
                self.accumulate(grads, *x, g.scale(*factor));
            }
            Op::Sum(x) => {
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, Tensor::filled(&shape, g.data()[0]));
            }
        }
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], target: NodeId, delta: Tensor) {
        if !self.rg(target) {
            return;
        }
        match &mut grads[target.0] {
            Some(existing) => {
                for (e, d) in existing.data_mut().iter_mut().zip(delta.data()) {
                    *e += d;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }
}

pub(crate) fn interleave_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            "concat_fuse",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    let (h, w, d) = a.hwc()?;
    let mut out = Vec::with_capacity(h * w * 2 * d);
    for (pa, pb) in a.data().chunks_exact(d).zip(b.data().chunks_exact(d)) {
        for k in 0..d {
            out.push(pb[k]);
            out.push(pa[k]);
        }
    }
    Tensor::new(vec![h, w, 2 * d], out)
}

struct ConvGeometry {
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    cout: usize,
    oh: usize,
    ow: usize,
}

fn conv_geometry(x: &Tensor, k: &Tensor, b: &Tensor, stride: usize, padding: usize) -> Result<ConvGeometry> {
    let (h, w, cin) = x.hwc()?;
    let (kh, kw, kcin, cout) = match k.shape() {
        [kh, kw, ci, co] => (*kh, *kw, *ci, *co),
        s => {
            return Err(Error::shape(
                "conv2d",
                format!("kernel must be kh x kw x Din x Dout, got {s:?}"),
            ))
        }
    };
    if stride == 0 {
        return Err(Error::shape("conv2d", "stride must be positive"));
    }
    if kcin != cin {
        return Err(Error::shape(
            "conv2d",
            format!("input has {cin} channels, kernel expects {kcin}"),
        ));
    }
    if b.len() != cout {
        return Err(Error::shape(
            "conv2d",
            format!("bias has {} elements, kernel has {cout} outputs", b.len()),
        ));
    }
    if h + 2 * padding < kh || w + 2 * padding < kw {
        return Err(Error::shape(
            "conv2d",
            format!(
                "padded input {}x{} smaller than kernel {kh}x{kw}",
                h + 2 * padding,
                w + 2 * padding
            ),
        ));
    }
    let oh = (h + 2 * padding - kh) / stride + 1;
    let ow = (w + 2 * padding - kw) / stride + 1;
    Ok(ConvGeometry {
        h,
        w,
        cin,
        kh,
        kw,
        cout,
        oh,
        ow,
    })
}

fn conv2d_forward(x: &Tensor, k: &Tensor, b: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let ConvGeometry {
        h,
        w,
        cin,
        kh,
        kw,
        cout,
        oh,
        ow,
    } = conv_geometry(x, k, b, stride, padding)?;
    let xd = x.data();
    let kd = k.data();
    let mut out = vec![0.0; oh * ow * cout];
    for oy in 0..oh {
        for ox in 0..ow {
            let o = &mut out[(oy * ow + ox) * cout..(oy * ow + ox + 1) * cout];
            o.copy_from_slice(b.data());
            for ky in 0..kh {
                let iy = (oy * stride + ky) as isize - padding as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..kw {
                    let ix = (ox * stride + kx) as isize - padding as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let base = (iy as usize * w + ix as usize) * cin;
                    let px = &xd[base..base + cin];
                    let kbase = (ky * kw + kx) * cin * cout;
                    for (ci, &v) in px.iter().enumerate() {
                        if v == 0.0 {
                            continue;
                        }
                        let krow = &kd[kbase + ci * cout..kbase + (ci + 1) * cout];
                        for (ov, &kv) in o.iter_mut().zip(krow) {
                            *ov += v * kv;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![oh, ow, cout], out)
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward(
    x: &Tensor,
    k: &Tensor,
    g: &Tensor,
    stride: usize,
    padding: usize,
    want_dx: bool,
    want_dk: bool,
) -> (Option<Tensor>, Option<Tensor>, Tensor) {
    let (h, w, cin) = x.hwc().expect("validated in forward");
    let (kh, kw, cout) = (k.shape()[0], k.shape()[1], k.shape()[3]);
    let (oh, ow) = (g.shape()[0], g.shape()[1]);
    let xd = x.data();
    let kd = k.data();
    let gd = g.data();
    let mut dx = if want_dx { vec![0.0; xd.len()] } else { Vec::new() };
    let mut dk = if want_dk { vec![0.0; kd.len()] } else { Vec::new() };
    let mut db = vec![0.0; cout];
    for oy in 0..oh {
        for ox in 0..ow {
            let go = &gd[(oy * ow + ox) * cout..(oy * ow + ox + 1) * cout];
            for (d, gv) in db.iter_mut().zip(go) {
                *d += gv;
            }
            for ky in 0..kh {
                let iy = (oy * stride + ky) as isize - padding as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..kw {
                    let ix = (ox * stride + kx) as isize - padding as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let base = (iy as usize * w + ix as usize) * cin;
                    let kbase = (ky * kw + kx) * cin * cout;
                    for ci in 0..cin {
                        let krange = kbase + ci * cout..kbase + (ci + 1) * cout;
                        if want_dx {
                            let krow = &kd[krange.clone()];
                            dx[base + ci] += krow.iter().zip(go).map(|(a, b)| a * b).sum::<f64>();
                        }
                        if want_dk {
                            let v = xd[base + ci];
                            if v != 0.0 {
                                for (d, gv) in dk[krange].iter_mut().zip(go) {
                                    *d += v * gv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    let dx = want_dx.then(|| Tensor::new(x.shape().to_vec(), dx).expect("same shape"));
    let dk = want_dk.then(|| Tensor::new(k.shape().to_vec(), dk).expect("same shape"));
    (dx, dk, Tensor::vector(db))
}
