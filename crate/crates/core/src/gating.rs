//! Gating network over fused expert feature maps.
//!
//! For each of the K snippets of a video, the spatial and temporal tap
//! features are fused (channel interleaving, optionally followed by a
//! trainable 1x1 convolution) and passed through a shared conv trunk. Two
//! fully connected heads read the trunk output: `head_g` emits a raw 2-vector
//! of fusion weights and `head_c` emits class scores. Raw weights are
//! averaged over the K snippets and only then passed through the gate
//! activation; class scores are averaged over the snippets.
//!
//! The fused prediction is `w1 * g_rgb + w2 * g_flow` on pre-softmax expert
//! scores, and training minimises
//! `CE(fused, y) + lambda * CE(g_c, y)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experts::{he_normal, ExpertScores};
use crate::graph::{self, Graph, NodeId};
use crate::param::{ParamId, ParamStore};
use crate::rng::DetRng;
use crate::tensor::{self, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionStyle {
    Concat,
    Conv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GateActivation {
    Relu,
    Softmax,
}

/// How the two tap features are combined before the gate trunk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionSpec {
    pub style: FusionStyle,
    pub tap_layer: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateArch {
    /// Channels `D` of each expert's tap feature.
    pub tap_channels: usize,
    pub fusion: FusionSpec,
    pub num_classes: usize,
    pub dropout_ratio: f64,
}

impl GateArch {
    fn trunk_in_channels(&self) -> usize {
        match self.fusion.style {
            FusionStyle::Concat => 2 * self.tap_channels,
            FusionStyle::Conv => self.tap_channels,
        }
    }

    fn trunk_out(&self) -> usize {
        2 * self.tap_channels
    }
}

/// Gate output for one video.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateOutput {
    /// Fusion weights `(w1, w2)` for the spatial and temporal scores.
    pub w: [f64; 2],
    pub g_c: Tensor,
    /// Raw `head_g` outputs of each snippet, before pooling and activation.
    pub per_segment_raw: Vec<[f64; 2]>,
    /// Set when a ReLU gate zeroed both weights and the even fallback was used.
    pub dead: bool,
}

/// Inputs of the gate for one video: per-snippet tap features of both
/// experts and their video-level scores.
#[derive(Debug, Clone, PartialEq)]
pub struct GateInputs {
    pub snippets: Vec<(Tensor, Tensor)>,
    pub scores: ExpertScores,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GateNet {
    pub arch: GateArch,
    pub activation: GateActivation,
    pub params: ParamStore,
    fusion_conv: Option<(ParamId, ParamId)>,
    trunk: [(ParamId, ParamId); 2],
    head_g: (ParamId, ParamId),
    head_c: (ParamId, ParamId),
}

/// Graph nodes produced by [`GateNet::build`].
#[derive(Debug, Clone)]
pub struct GateNodes {
    /// Post-activation (and post-fallback) fusion weights.
    pub w: NodeId,
    pub g_c: NodeId,
    pub per_segment_raw: Vec<NodeId>,
    pub pooled_features: Vec<NodeId>,
}

/// Loss nodes produced by [`GateNet::build_loss`].
#[derive(Debug, Clone)]
pub struct GateLossNodes {
    pub gate: GateNodes,
    pub fused: NodeId,
    pub fused_ce: NodeId,
    pub class_ce: NodeId,
    /// `class_ce` scaled by lambda.
    pub class_term: NodeId,
    pub total: NodeId,
}

impl GateNet {
    pub fn new<R: Rng + ?Sized>(arch: GateArch, activation: GateActivation, rng: &mut R) -> Result<Self> {
        if arch.tap_channels == 0 || arch.num_classes < 2 {
            return Err(Error::InvalidArgument(format!("invalid gate architecture {arch:?}")));
        }
        if !(0.0..1.0).contains(&arch.dropout_ratio) {
            return Err(Error::InvalidArgument(format!(
                "dropout ratio must be in [0, 1), got {}",
                arch.dropout_ratio
            )));
        }
        let d = arch.tap_channels;
        let mut params = ParamStore::new();
        let fusion_conv = match arch.fusion.style {
            FusionStyle::Concat => None,
            FusionStyle::Conv => {
                let f = params.add("fusion.filter", averaging_filter(d));
                let b = params.add("fusion.bias", Tensor::zeros(&[d]));
                Some((f, b))
            }
        };
        let cin = arch.trunk_in_channels();
        let t1k = params.add("trunk1.kernel", he_normal(&[3, 3, cin, d], 9 * cin, rng));
        let t1b = params.add("trunk1.bias", Tensor::zeros(&[d]));
        let t2k = params.add("trunk2.kernel", he_normal(&[3, 3, d, 2 * d], 9 * d, rng));
        let t2b = params.add("trunk2.bias", Tensor::zeros(&[2 * d]));
        let out = arch.trunk_out();
        let hgw = params.add("head_g.weight", Tensor::zeros(&[out, 2]));
        let hgb = params.add("head_g.bias", Tensor::filled(&[2], head_g_bias_init(activation)));
        let hcw = params.add("head_c.weight", he_normal(&[out, arch.num_classes], out, rng));
        let hcb = params.add("head_c.bias", Tensor::zeros(&[arch.num_classes]));
        Ok(GateNet {
            arch,
            activation,
            params,
            fusion_conv,
            trunk: [(t1k, t1b), (t2k, t2b)],
            head_g: (hgw, hgb),
            head_c: (hcw, hcb),
        })
    }

    pub fn head_g_ids(&self) -> (ParamId, ParamId) {
        self.head_g
    }

    pub fn head_c_ids(&self) -> (ParamId, ParamId) {
        self.head_c
    }

    pub fn fusion_conv_ids(&self) -> Option<(ParamId, ParamId)> {
        self.fusion_conv
    }

    /// Trunk parameters (shared by both heads), including the fusion conv.
    pub fn trunk_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        if let Some((f, b)) = self.fusion_conv {
            ids.extend([f, b]);
        }
        for (k, b) in self.trunk {
            ids.extend([k, b]);
        }
        ids
    }

    fn fuse(&self, g: &mut Graph<'_>, a: NodeId, b: NodeId) -> Result<NodeId> {
        let stacked = g.interleave(a, b)?;
        match self.fusion_conv {
            None => Ok(stacked),
            Some((f, bias)) => {
                let (fnode, bnode) = (g.param(f), g.param(bias));
                g.conv2d(stacked, fnode, bnode, 1, 0)
            }
        }
    }

    /// Records the gate on `g` for K snippet pairs `(spatial tap, temporal tap)`.
    pub fn build<R: Rng + ?Sized>(
        &self,
        g: &mut Graph<'_>,
        snippets: &[(NodeId, NodeId)],
        training: bool,
        rng: &mut R,
    ) -> Result<GateNodes> {
        if snippets.is_empty() {
            return Err(Error::Empty("gate forward over zero snippets"));
        }
        let mut raws = Vec::with_capacity(snippets.len());
        let mut classes = Vec::with_capacity(snippets.len());
        let mut pooled_features = Vec::with_capacity(snippets.len());
        for &(a, b) in snippets {
            let (_, _, ca) = g.value(a).hwc()?;
            if ca != self.arch.tap_channels {
                return Err(Error::shape(
                    "gate_forward",
                    format!("gate expects {} tap channels, got {ca}", self.arch.tap_channels),
                ));
            }
            let mut x = self.fuse(g, a, b)?;
            for &(k, bias) in &self.trunk {
                let (kn, bn) = (g.param(k), g.param(bias));
                x = g.conv2d(x, kn, bn, 1, 1)?;
                x = g.relu(x);
            }
            let pooled = g.global_avg_pool(x)?;
            pooled_features.push(pooled);
            let dropped = g.dropout(pooled, self.arch.dropout_ratio, training, rng)?;
            let (gw, gb) = (g.param(self.head_g.0), g.param(self.head_g.1));
            raws.push(g.fully_connected(dropped, gw, gb)?);
            let (cw, cb) = (g.param(self.head_c.0), g.param(self.head_c.1));
            classes.push(g.fully_connected(dropped, cw, cb)?);
        }
        let pooled_raw = g.mean(&raws)?;
        let w = match self.activation {
            GateActivation::Softmax => g.softmax(pooled_raw),
            GateActivation::Relu => {
                let r = g.relu(pooled_raw);
                g.even_fallback(r)
            }
        };
        let g_c = g.mean(&classes)?;
        Ok(GateNodes {
            w,
            g_c,
            per_segment_raw: raws,
            pooled_features,
        })
    }

    /// Records gate, fused prediction and the multi-task loss.
    pub fn build_loss<R: Rng + ?Sized>(
        &self,
        g: &mut Graph<'_>,
        inputs: &GateInputs,
        lambda: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<GateLossNodes> {
        if lambda < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "lambda must be non-negative, got {lambda}"
            )));
        }
        let snippet_nodes: Vec<(NodeId, NodeId)> = inputs
            .snippets
            .iter()
            .map(|(a, b)| (g.constant(a.clone()), g.constant(b.clone())))
            .collect();
        let gate = self.build(g, &snippet_nodes, training, rng)?;
        let rgb = g.constant(inputs.scores.g_rgb.clone());
        let flow = g.constant(inputs.scores.g_flow.clone());
        let fused = g.mix(gate.w, rgb, flow)?;
        let fused_ce = g.cross_entropy(fused, inputs.label)?;
        let class_ce = g.cross_entropy(gate.g_c, inputs.label)?;
        let class_term = g.scale(class_ce, lambda);
        let total = g.add(fused_ce, class_term)?;
        Ok(GateLossNodes {
            gate,
            fused,
            fused_ce,
            class_ce,
            class_term,
            total,
        })
    }

    /// Inference-mode (or training-mode, with `rng`) gate evaluation.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        snippets: &[(Tensor, Tensor)],
        training: bool,
        rng: &mut R,
    ) -> Result<GateOutput> {
        let mut g = Graph::new(&self.params);
        let nodes: Vec<(NodeId, NodeId)> = snippets
            .iter()
            .map(|(a, b)| (g.constant(a.clone()), g.constant(b.clone())))
            .collect();
        let out = self.build(&mut g, &nodes, training, rng)?;
        let w = g.value(out.w).data();
        Ok(GateOutput {
            w: [w[0], w[1]],
            g_c: g.value(out.g_c).clone(),
            per_segment_raw: out
                .per_segment_raw
                .iter()
                .map(|&r| [g.value(r).data()[0], g.value(r).data()[1]])
                .collect(),
            dead: g.fallback_triggered(out.w),
        })
    }

    /// Mean over snippets of the trunk's globally pooled features.
    pub fn trunk_features(&self, snippets: &[(Tensor, Tensor)]) -> Result<Tensor> {
        let mut g = Graph::new(&self.params);
        let nodes: Vec<(NodeId, NodeId)> = snippets
            .iter()
            .map(|(a, b)| (g.constant(a.clone()), g.constant(b.clone())))
            .collect();
        let mut rng = crate::rng::stream(0, crate::rng::Stream::Misc);
        let out = self.build(&mut g, &nodes, false, &mut rng)?;
        let feats: Vec<Tensor> = out.pooled_features.iter().map(|&n| g.value(n).clone()).collect();
        tensor::mean_of(&feats)
    }
}

fn head_g_bias_init(activation: GateActivation) -> f64 {
    match activation {
        // Softmax of equal logits is already (0.5, 0.5).
        GateActivation::Softmax => 0.0,
        // ReLU needs a positive pre-activation to pass gradient; 0.5 gives
        // the same even-averaging start as the softmax gate.
        GateActivation::Relu => 0.5,
    }
}

/// 1x1 filter that averages matching channels of the two streams.
fn averaging_filter(d: usize) -> Tensor {
    let mut f = Tensor::zeros(&[1, 1, 2 * d, d]);
    for k in 0..d {
        f.data_mut()[(2 * k) * d + k] = 0.5;
        f.data_mut()[(2 * k + 1) * d + k] = 0.5;
    }
    f
}

/// Channel-interleaved stacking: with 1-based channels, output channel
/// `2d` is `xa[d]` and channel `2d - 1` is `xb[d]`.
pub fn concat_fuse(xa: &Tensor, xb: &Tensor) -> Result<Tensor> {
    graph::interleave_channels(xa, xb)
}

/// [`concat_fuse`] followed by a 1x1 convolution with `filter`
/// (`1 x 1 x 2D x D`) and `bias` (`D`).
pub fn conv_fuse(xa: &Tensor, xb: &Tensor, filter: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (_, _, d) = xa.hwc()?;
    if filter.shape() != [1, 1, 2 * d, d] {
        return Err(Error::shape(
            "conv_fuse",
            format!("filter must be 1x1x{}x{d}, got {:?}", 2 * d, filter.shape()),
        ));
    }
    let mut g = Graph::detached();
    let a = g.constant(xa.clone());
    let b = g.constant(xb.clone());
    let stacked = g.interleave(a, b)?;
    let f = g.constant(filter.clone());
    let bn = g.constant(bias.clone());
    let out = g.conv2d(stacked, f, bn, 1, 0)?;
    Ok(g.value(out).clone())
}

/// `w1 * g_rgb + w2 * g_flow` on pre-softmax scores.
pub fn gated_fuse(scores: &ExpertScores, w: [f64; 2]) -> Result<Tensor> {
    if w[0] < 0.0 || w[1] < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "fusion weights must be non-negative, got {w:?}"
        )));
    }
    scores
        .g_rgb
        .zip_with(&scores.g_flow, "gated_fuse", |a, b| w[0] * a + w[1] * b)
}

/// `CE(g_adap, label) + lambda * CE(g_c, label)`.
pub fn multitask_loss(label: usize, g_adap: &Tensor, g_c: &Tensor, lambda: f64) -> Result<f64> {
    if lambda < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "lambda must be non-negative, got {lambda}"
        )));
    }
    Ok(cross_entropy(g_adap, label)? + lambda * cross_entropy(g_c, label)?)
}

pub fn cross_entropy(scores: &Tensor, label: usize) -> Result<f64> {
    if label >= scores.len() {
        return Err(Error::LabelOutOfRange {
            label,
            classes: scores.len(),
        });
    }
    Ok(tensor::log_sum_exp(scores.data()) - scores.data()[label])
}

/// Result of comparing autodiff gate gradients with central differences.
#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub checked: usize,
    /// Coordinates skipped because the perturbation crossed a ReLU kink or
    /// flipped the dead-gate fallback.
    pub skipped_kinks: usize,
}

/// Denominator floor of the relative error; below it errors are absolute.
pub const GRADCHECK_FLOOR: f64 = 1e-5;

fn gate_loss_eval(gate: &GateNet, inputs: &GateInputs, lambda: f64, dropout_seed: u64) -> Result<(f64, Vec<bool>)> {
    let mut g = Graph::new(&gate.params);
    let mut rng = dropout_rng(dropout_seed);
    let nodes = gate.build_loss(&mut g, inputs, lambda, true, &mut rng)?;
    Ok((g.value(nodes.total).data()[0], g.activation_pattern()))
}

fn dropout_rng(seed: u64) -> DetRng {
    crate::rng::stream(seed, crate::rng::Stream::GateTrain)
}

/// Analytic gradients of every gate parameter versus central finite
/// differences of the multi-task loss, with a fixed dropout mask.
pub fn gate_backward_check(
    gate: &GateNet,
    inputs: &GateInputs,
    lambda: f64,
    h: f64,
    dropout_seed: u64,
) -> Result<GradCheckReport> {
    let analytic = {
        let mut g = Graph::new(&gate.params);
        let mut rng = dropout_rng(dropout_seed);
        let nodes = gate.build_loss(&mut g, inputs, lambda, true, &mut rng)?;
        let base_pattern = g.activation_pattern();
        (g.backward(nodes.total)?, base_pattern)
    };
    let (grads, base_pattern) = analytic;
    let mut probe = gate.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        checked: 0,
        skipped_kinks: 0,
    };
    for id in gate.params.ids().collect::<Vec<_>>() {
        if gate.params.get(id).is_frozen() {
            continue;
        }
        let name = gate.params.get(id).name.clone();
        let n = gate.params.get(id).value().len();
        let g_analytic = grads
            .param(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(gate.params.get(id).value().shape()));
        for i in 0..n {
            let original = gate.params.get(id).value().data()[i];
            probe.params.get_mut(id).value_mut().data_mut()[i] = original + h;
            let (plus, p_pat) = gate_loss_eval(&probe, inputs, lambda, dropout_seed)?;
            probe.params.get_mut(id).value_mut().data_mut()[i] = original - h;
            let (minus, m_pat) = gate_loss_eval(&probe, inputs, lambda, dropout_seed)?;
            probe.params.get_mut(id).value_mut().data_mut()[i] = original;
            if p_pat != base_pattern || m_pat != base_pattern {
                report.skipped_kinks += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * h);
            let a = g_analytic.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRADCHECK_FLOOR);
            report.checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_param = format!("{name}[{i}]");
            }
        }
    }
    Ok(report)
}
