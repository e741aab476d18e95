//! The two convolutional experts and segmental consensus.
//!
//! Each expert is three conv blocks (3x3 conv, ReLU, and 2x2 mean pooling on
//! the first two blocks) followed by global average pooling and one fully
//! connected layer to class scores. Any block's output can be exported as the
//! fusion feature ("tap"); taps are post-activation.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::param::{ParamId, ParamStore};
use crate::tensor::{self, Tensor};

pub const NUM_BLOCKS: usize = 3;
pub const DEFAULT_WIDTHS: [usize; NUM_BLOCKS] = [8, 16, 32];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StreamKind {
    Spatial,
    Temporal,
}

impl StreamKind {
    pub fn name(self) -> &'static str {
        match self {
            StreamKind::Spatial => "spatial",
            StreamKind::Temporal => "temporal",
        }
    }
}

/// One sampled segment: an appearance frame and the flow stack starting at
/// the same time index.
#[derive(Debug, Clone, PartialEq)]
pub struct Snippet {
    pub start: usize,
    pub spatial: Tensor,
    pub temporal: Tensor,
}

impl Snippet {
    pub fn input(&self, stream: StreamKind) -> &Tensor {
        match stream {
            StreamKind::Spatial => &self.spatial,
            StreamKind::Temporal => &self.temporal,
        }
    }
}

/// K snippets of one video plus its label.
#[derive(Debug, Clone, PartialEq)]
pub struct SnippetBatch {
    pub segments: Vec<Snippet>,
    pub label: usize,
}

/// Pre-softmax video-level scores of both experts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertScores {
    pub g_rgb: Tensor,
    pub g_flow: Tensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertArch {
    pub in_channels: usize,
    pub widths: [usize; NUM_BLOCKS],
    pub num_classes: usize,
}

impl ExpertArch {
    /// `(h, w, channels)` of the tap feature for an `h x w` input.
    pub fn tap_shape(&self, h: usize, w: usize, tap_layer: usize) -> Result<[usize; 3]> {
        check_tap(tap_layer)?;
        let pools = tap_layer.min(2);
        Ok([h >> pools, w >> pools, self.widths[tap_layer - 1]])
    }
}

fn check_tap(tap_layer: usize) -> Result<()> {
    if (1..=NUM_BLOCKS).contains(&tap_layer) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "tap layer must be in 1..={NUM_BLOCKS}, got {tap_layer}"
        )))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpertNet {
    pub stream: StreamKind,
    pub arch: ExpertArch,
    pub tap_layer: usize,
    pub params: ParamStore,
    convs: [(ParamId, ParamId); NUM_BLOCKS],
    fc: (ParamId, ParamId),
}

impl ExpertNet {
    /// He-initialised conv and fully connected weights, zero biases.
    pub fn new<R: Rng + ?Sized>(stream: StreamKind, arch: ExpertArch, tap_layer: usize, rng: &mut R) -> Result<Self> {
        check_tap(tap_layer)?;
        if arch.num_classes < 2 || arch.in_channels == 0 {
            return Err(Error::InvalidArgument(format!("invalid expert architecture {arch:?}")));
        }
        let mut params = ParamStore::new();
        let mut convs = Vec::with_capacity(NUM_BLOCKS);
        let mut cin = arch.in_channels;
        for (b, &cout) in arch.widths.iter().enumerate() {
            let k = params.add(
                format!("conv{}.kernel", b + 1),
                he_normal(&[3, 3, cin, cout], 9 * cin, rng),
            );
            let bias = params.add(format!("conv{}.bias", b + 1), Tensor::zeros(&[cout]));
            convs.push((k, bias));
            cin = cout;
        }
        let w = params.add("fc.weight", he_normal(&[cin, arch.num_classes], cin, rng));
        let b = params.add("fc.bias", Tensor::zeros(&[arch.num_classes]));
        Ok(ExpertNet {
            stream,
            arch,
            tap_layer,
            params,
            convs: [convs[0], convs[1], convs[2]],
            fc: (w, b),
        })
    }

    pub fn fc_ids(&self) -> (ParamId, ParamId) {
        self.fc
    }

    pub fn freeze(&mut self) {
        self.params.set_frozen(true);
    }

    pub fn is_frozen(&self) -> bool {
        self.params.all_frozen()
    }

    fn check_input(&self, input: &Tensor) -> Result<()> {
        let (h, w, c) = input.hwc()?;
        if c != self.arch.in_channels {
            return Err(Error::shape(
                "expert_forward",
                format!(
                    "{} expert expects {} channels, got {c}",
                    self.stream.name(),
                    self.arch.in_channels
                ),
            ));
        }
        if h < 4 || w < 4 {
            return Err(Error::shape(
                "expert_forward",
                format!("input {h}x{w} smaller than 4x4"),
            ));
        }
        Ok(())
    }

    /// Records the forward pass on `g`; returns `(tap feature, scores)` nodes.
    pub fn build(&self, g: &mut Graph<'_>, input: NodeId, tap_layer: usize) -> Result<(NodeId, NodeId)> {
        check_tap(tap_layer)?;
        let (taps, scores) = self.build_taps(g, input)?;
        Ok((taps[tap_layer - 1], scores))
    }

    /// Like [`ExpertNet::build`] but returns the output node of every block.
    pub fn build_taps(&self, g: &mut Graph<'_>, input: NodeId) -> Result<([NodeId; NUM_BLOCKS], NodeId)> {
        self.check_input(g.value(input))?;
        let mut x = input;
        let mut taps = [input; NUM_BLOCKS];
        for (b, &(k, bias)) in self.convs.iter().enumerate() {
            let (kn, bn) = (g.param(k), g.param(bias));
            x = g.conv2d(x, kn, bn, 1, 1)?;
            x = g.relu(x);
            if b + 1 < NUM_BLOCKS {
                x = g.mean_pool2(x)?;
            }
            taps[b] = x;
        }
        let pooled = g.global_avg_pool(x)?;
        let (w, b) = (g.param(self.fc.0), g.param(self.fc.1));
        let scores = g.fully_connected(pooled, w, b)?;
        Ok((taps, scores))
    }

    /// Every block's output plus the scores, from one forward pass.
    pub fn forward_taps(&self, input: &Tensor) -> Result<([Tensor; NUM_BLOCKS], Tensor)> {
        let mut g = Graph::new(&self.params);
        let x = g.constant(input.clone());
        let (taps, scores) = self.build_taps(&mut g, x)?;
        Ok((taps.map(|t| g.value(t).clone()), g.value(scores).clone()))
    }

    /// Runs the layers after `tap_layer` on a tap feature.
    pub fn head_from_tap(&self, feature: &Tensor, tap_layer: usize) -> Result<Tensor> {
        check_tap(tap_layer)?;
        let mut g = Graph::new(&self.params);
        let mut x = g.constant(feature.clone());
        for b in tap_layer..NUM_BLOCKS {
            let (k, bias) = self.convs[b];
            let (kn, bn) = (g.param(k), g.param(bias));
            x = g.conv2d(x, kn, bn, 1, 1)?;
            x = g.relu(x);
            if b + 1 < NUM_BLOCKS {
                x = g.mean_pool2(x)?;
            }
        }
        let pooled = g.global_avg_pool(x)?;
        let (w, b) = (g.param(self.fc.0), g.param(self.fc.1));
        let scores = g.fully_connected(pooled, w, b)?;
        Ok(g.value(scores).clone())
    }

    /// One shared forward pass returning the tap feature and the scores.
    pub fn forward(&self, input: &Tensor) -> Result<(Tensor, Tensor)> {
        self.forward_at(input, self.tap_layer)
    }

    pub fn forward_at(&self, input: &Tensor, tap_layer: usize) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new(&self.params);
        let x = g.constant(input.clone());
        let (tap, scores) = self.build(&mut g, x, tap_layer)?;
        Ok((g.value(tap).clone(), g.value(scores).clone()))
    }

    /// Video-level scores: consensus over the batch's per-segment scores.
    pub fn video_scores(&self, batch: &SnippetBatch) -> Result<Tensor> {
        let per_segment = batch
            .segments
            .iter()
            .map(|s| self.forward(s.input(self.stream)).map(|(_, scores)| scores))
            .collect::<Result<Vec<_>>>()?;
        segmental_consensus(&per_segment)
    }

    /// Cross-entropy of the consensus scores, recorded for training.
    pub fn build_loss(&self, g: &mut Graph<'_>, batch: &SnippetBatch) -> Result<NodeId> {
        let mut scores = Vec::with_capacity(batch.segments.len());
        for s in &batch.segments {
            let x = g.constant(s.input(self.stream).clone());
            let (_, sc) = self.build(g, x, self.tap_layer)?;
            scores.push(sc);
        }
        let consensus = g.mean(&scores)?;
        g.cross_entropy(consensus, batch.label)
    }
}

/// Elementwise mean of per-segment score vectors.
pub fn segmental_consensus(per_segment: &[Tensor]) -> Result<Tensor> {
    if per_segment.is_empty() {
        return Err(Error::Empty("segmental consensus over zero segments"));
    }
    tensor::mean_of(per_segment)
}

/// Consensus scores of `net` for one stream of a batch.
pub fn video_expert_scores(net: &ExpertNet, batch: &SnippetBatch, stream: StreamKind) -> Result<Tensor> {
    if net.stream != stream {
        return Err(Error::InvalidArgument(format!(
            "{} expert asked for {} scores",
            net.stream.name(),
            stream.name()
        )));
    }
    net.video_scores(batch)
}

pub(crate) fn he_normal<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| normal.sample(rng)).collect()).expect("shape matches")
}
