//! Three-stage training: experts, then gate fusion weights with the experts
//! frozen, then the gate's weight and classification heads jointly.
//!
//! Each stage evaluates on the validation split before its first step
//! (epoch 0) and after every epoch, keeps the best checkpoint by validation
//! accuracy (lower validation loss breaks ties), drops the learning rate once
//! after `patience` epochs without improvement and stops after a second such
//! window.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::config::ExperimentConfig;
use crate::data::{self, SynthVideo};
use crate::error::{Error, Result};
use crate::experts::{segmental_consensus, ExpertArch, ExpertNet, ExpertScores, StreamKind, NUM_BLOCKS};
use crate::gating::{self, FusionSpec, GateArch, GateInputs, GateNet};
use crate::graph::{Gradients, Graph};
use crate::param::{ParamId, ParamStore};
use crate::rng::{self, DetRng, Stream};
use crate::tensor::Tensor;

/// Momentum buffers for the parameters that were trainable at creation.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    velocity: Vec<Option<Tensor>>,
}

impl OptimizerState {
    pub fn new(store: &ParamStore) -> Self {
        OptimizerState {
            velocity: store
                .iter()
                .map(|(_, p)| (!p.is_frozen()).then(|| Tensor::zeros(p.value().shape())))
                .collect(),
        }
    }

    pub fn velocity(&self, id: ParamId) -> Option<&Tensor> {
        self.velocity.get(id.index()).and_then(Option::as_ref)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    /// Global L2 norm of the trainable gradients before clipping.
    pub grad_norm: f64,
    /// The same norm after clipping.
    pub clipped_norm: f64,
}

/// Global L2 norm over the gradients of non-frozen parameters.
pub fn global_grad_norm(store: &ParamStore) -> f64 {
    store
        .iter()
        .filter(|(_, p)| !p.is_frozen())
        .flat_map(|(_, p)| p.grad().data().iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt()
}

/// One momentum SGD step on the gradients stored in `store`:
/// clip globally to `clip`, then `v <- momentum * v + g`, `p <- p - lr * v`.
pub fn sgd_step(
    store: &mut ParamStore,
    state: &mut OptimizerState,
    lr: f64,
    momentum: f64,
    clip: f64,
) -> Result<StepStats> {
    if state.velocity.len() != store.len() {
        return Err(Error::InvalidArgument(format!(
            "optimizer state has {} buffers for {} parameters",
            state.velocity.len(),
            store.len()
        )));
    }
    let norm = global_grad_norm(store);
    let scale = if norm > clip { clip / norm } else { 1.0 };
    for ((_, p), v) in store.iter_mut().zip(state.velocity.iter_mut()) {
        if p.is_frozen() {
            continue;
        }
        let Some(v) = v else { continue };
        if v.shape() != p.value().shape() {
            return Err(Error::shape(
                "sgd_step",
                format!("velocity {:?} for {}", v.shape(), p.name),
            ));
        }
        let grad: Vec<f64> = p.grad().data().iter().map(|g| g * scale).collect();
        for (vi, gi) in v.data_mut().iter_mut().zip(&grad) {
            *vi = momentum * *vi + gi;
        }
        for (pi, vi) in p.value_mut().data_mut().iter_mut().zip(v.data()) {
            *pi -= lr * vi;
        }
    }
    Ok(StepStats {
        grad_norm: norm,
        clipped_norm: norm * scale,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: u8,
    pub stage_name: String,
    pub epoch: usize,
    pub lambda: f64,
    pub lr: f64,
    /// Mean training loss; absent for the pre-training evaluation.
    pub train_loss: Option<f64>,
    pub val_accuracy: f64,
    pub val_loss: f64,
    /// Dead-gate fallbacks during this epoch's training passes.
    pub dead_gate_count: usize,
    pub val_dead_gate_count: usize,
    pub steps: usize,
    pub max_grad_norm: f64,
    pub max_clipped_grad_norm: f64,
    /// Largest gradient norm seen on the gate's classification head.
    pub head_c_grad_max: Option<f64>,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub stage: u8,
    pub stage_name: String,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub best_val_loss: f64,
    pub epochs_run: usize,
    pub best_checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    pub stages: Vec<StageSummary>,
}

impl TrainLog {
    pub fn stage(&self, name: &str) -> Option<&StageSummary> {
        self.stages.iter().find(|s| s.stage_name == name)
    }

    /// One JSON object per epoch, then one per stage summary.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        for r in &self.epochs {
            let line = serde_json::json!({"record": "epoch", "data": r});
            writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
        }
        for s in &self.stages {
            let line = serde_json::json!({"record": "stage", "data": s});
            writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }
}

struct StageCtl {
    stage: u8,
    name: String,
    lambda: f64,
    lr_initial: f64,
    lr_reduced: f64,
    max_epochs: usize,
    patience: usize,
    batch_size: usize,
    momentum: f64,
    clip: f64,
    watch: Vec<ParamId>,
}

struct SampleOut {
    loss: f64,
    grads: Gradients,
    dead: bool,
}

struct ValStats {
    accuracy: f64,
    loss: f64,
    dead: usize,
}

fn better(a: (f64, f64), b: (f64, f64)) -> bool {
    a.0 > b.0 || (a.0 == b.0 && a.1 < b.1)
}

fn divergence(stage: &str, detail: impl Into<String>) -> Error {
    Error::Divergence {
        stage: stage.to_string(),
        detail: detail.into(),
    }
}

/// Generic stage loop. `step` returns loss and gradients of one training
/// video given a per-sample seed; `evaluate` scores the validation split.
fn run_stage<S, E>(
    ctl: &StageCtl,
    params: &mut ParamStore,
    n_train: usize,
    rng: &mut DetRng,
    step: S,
    evaluate: E,
    log: &mut TrainLog,
) -> Result<StageSummary>
where
    S: Fn(&ParamStore, usize, u64) -> Result<SampleOut> + Sync,
    E: Fn(&ParamStore) -> Result<ValStats>,
{
    if n_train == 0 {
        return Err(Error::Empty("training split"));
    }
    let start = Instant::now();
    let mut state = OptimizerState::new(params);
    let val = evaluate(params)?;
    let record = |epoch, lr, train_loss, val: &ValStats, dead, steps, norms: (f64, f64), head_c| EpochRecord {
        stage: ctl.stage,
        stage_name: ctl.name.clone(),
        epoch,
        lambda: ctl.lambda,
        lr,
        train_loss,
        val_accuracy: val.accuracy,
        val_loss: val.loss,
        dead_gate_count: dead,
        val_dead_gate_count: val.dead,
        steps,
        max_grad_norm: norms.0,
        max_clipped_grad_norm: norms.1,
        head_c_grad_max: head_c,
        wall_time_s: start.elapsed().as_secs_f64(),
    };
    log.epochs
        .push(record(0, ctl.lr_initial, None, &val, 0, 0, (0.0, 0.0), None));
    let mut best_key = (val.accuracy, val.loss);
    let mut best_epoch = 0;
    let mut best_params = params.clone();
    let mut lr = ctl.lr_initial;
    let mut dropped = false;
    let mut since = 0;
    let mut epochs_run = 0;
    let mut order: Vec<usize> = (0..n_train).collect();
    for epoch in 1..=ctl.max_epochs {
        epochs_run = epoch;
        order.shuffle(rng);
        let (mut loss_sum, mut dead, mut steps) = (0.0, 0usize, 0usize);
        let (mut max_norm, mut max_clipped) = (0.0f64, 0.0f64);
        let mut head_c: Option<f64> = None;
        for chunk in order.chunks(ctl.batch_size) {
            let seeds: Vec<u64> = chunk.iter().map(|_| rng.random()).collect();
            let outs: Vec<Result<SampleOut>> = chunk
                .par_iter()
                .zip(seeds.par_iter())
                .map(|(&i, &s)| step(params, i, s))
                .collect();
            params.zero_grads();
            let scale = 1.0 / chunk.len() as f64;
            for out in outs {
                let out = out?;
                if !out.loss.is_finite() {
                    return Err(divergence(&ctl.name, format!("non-finite loss at epoch {epoch}")));
                }
                loss_sum += out.loss;
                dead += usize::from(out.dead);
                params.accumulate(&out.grads, scale);
            }
            if !ctl.watch.is_empty() {
                let n = ctl
                    .watch
                    .iter()
                    .flat_map(|&id| params.get(id).grad().data().iter())
                    .map(|g| g * g)
                    .sum::<f64>()
                    .sqrt();
                head_c = Some(head_c.map_or(n, |m| m.max(n)));
            }
            let stats = sgd_step(params, &mut state, lr, ctl.momentum, ctl.clip)?;
            if !stats.grad_norm.is_finite() {
                return Err(divergence(
                    &ctl.name,
                    format!("non-finite gradient norm at epoch {epoch}"),
                ));
            }
            max_norm = max_norm.max(stats.grad_norm);
            max_clipped = max_clipped.max(stats.clipped_norm);
            steps += 1;
        }
        let val = evaluate(params)?;
        if !val.loss.is_finite() {
            return Err(divergence(
                &ctl.name,
                format!("non-finite validation loss at epoch {epoch}"),
            ));
        }
        let train_loss = loss_sum / n_train as f64;
        log.epochs.push(record(
            epoch,
            lr,
            Some(train_loss),
            &val,
            dead,
            steps,
            (max_norm, max_clipped),
            head_c,
        ));
        if better((val.accuracy, val.loss), best_key) {
            best_key = (val.accuracy, val.loss);
            best_epoch = epoch;
            best_params = params.clone();
            since = 0;
        } else {
            since += 1;
            if since >= ctl.patience {
                if dropped {
                    break;
                }
                lr = ctl.lr_reduced;
                dropped = true;
                since = 0;
            }
        }
    }
    params.load_values(&best_params)?;
    Ok(StageSummary {
        stage: ctl.stage,
        stage_name: ctl.name.clone(),
        best_epoch,
        best_val_accuracy: best_key.0,
        best_val_loss: best_key.1,
        epochs_run,
        best_checkpoint: None,
    })
}

pub fn expert_arch(cfg: &ExperimentConfig, stream: StreamKind) -> ExpertArch {
    ExpertArch {
        in_channels: match stream {
            StreamKind::Spatial => 3,
            StreamKind::Temporal => 2 * cfg.dataset.flow_len,
        },
        widths: cfg.model.widths,
        num_classes: cfg.dataset.num_classes(),
    }
}

pub fn gate_arch(cfg: &ExperimentConfig) -> GateArch {
    GateArch {
        tap_channels: cfg.model.widths[cfg.model.tap_layer - 1],
        fusion: FusionSpec {
            style: cfg.model.fusion_style,
            tap_layer: cfg.model.tap_layer,
        },
        num_classes: cfg.dataset.num_classes(),
        dropout_ratio: cfg.model.dropout_ratio,
    }
}

pub fn new_gate(cfg: &ExperimentConfig) -> Result<GateNet> {
    let mut rng = rng::stream(cfg.seed, Stream::GateInit);
    GateNet::new(gate_arch(cfg), cfg.model.activation, &mut rng)
}

/// Consensus scores of an expert whose parameters live in `params`.
fn expert_video_scores(net: &ExpertNet, params: &ParamStore, batch: &crate::experts::SnippetBatch) -> Result<Tensor> {
    let mut per_segment = Vec::with_capacity(batch.segments.len());
    for s in &batch.segments {
        let mut g = Graph::new(params);
        let x = g.constant(s.input(net.stream).clone());
        let (_, sc) = net.build(&mut g, x, net.tap_layer)?;
        per_segment.push(g.value(sc).clone());
    }
    segmental_consensus(&per_segment)
}

/// Trains one expert from scratch; the returned net is frozen.
pub fn train_expert(
    cfg: &ExperimentConfig,
    stream: StreamKind,
    train: &[SynthVideo],
    val: &[SynthVideo],
    log: &mut TrainLog,
) -> Result<ExpertNet> {
    let (init, train_stream) = match stream {
        StreamKind::Spatial => (Stream::SpatialInit, Stream::SpatialTrain),
        StreamKind::Temporal => (Stream::TemporalInit, Stream::TemporalTrain),
    };
    let mut net = ExpertNet::new(
        stream,
        expert_arch(cfg, stream),
        cfg.model.tap_layer,
        &mut rng::stream(cfg.seed, init),
    )?;
    let t = &cfg.train;
    let (k, l) = (t.num_segments, cfg.dataset.flow_len);
    let ctl = StageCtl {
        stage: 1,
        name: format!("expert_{}", stream.name()),
        lambda: 0.0,
        lr_initial: t.expert_lr_initial,
        lr_reduced: t.expert_lr_reduced,
        max_epochs: t.max_epochs_expert,
        patience: t.patience,
        batch_size: t.expert_batch_size,
        momentum: t.momentum,
        clip: t.grad_clip_l2,
        watch: Vec::new(),
    };
    let val_batches: Vec<_> = val
        .iter()
        .map(|v| data::centered_snippets(v, k, l))
        .collect::<Result<_>>()?;
    let mut params = std::mem::take(&mut net.params);
    let summary = {
        let net = &net;
        let step = |p: &ParamStore, i: usize, seed: u64| -> Result<SampleOut> {
            let mut r = DetRng::seed_from_u64(seed);
            let batch = data::sample_snippets(&train[i], k, l, &mut r)?;
            let mut g = Graph::new(p);
            let loss = net.build_loss(&mut g, &batch)?;
            Ok(SampleOut {
                loss: g.value(loss).data()[0],
                grads: g.backward(loss)?,
                dead: false,
            })
        };
        let evaluate = |p: &ParamStore| -> Result<ValStats> {
            let res: Vec<(bool, f64)> = val_batches
                .par_iter()
                .map(|b| {
                    let s = expert_video_scores(net, p, b)?;
                    Ok((s.argmax() == b.label, gating::cross_entropy(&s, b.label)?))
                })
                .collect::<Result<_>>()?;
            Ok(summarize(&res, 0))
        };
        run_stage(
            &ctl,
            &mut params,
            train.len(),
            &mut rng::stream(cfg.seed, train_stream),
            step,
            evaluate,
            log,
        )?
    };
    net.params = params;
    net.freeze();
    log.stages.push(summary);
    Ok(net)
}

fn summarize(res: &[(bool, f64)], dead: usize) -> ValStats {
    if res.is_empty() {
        return ValStats {
            accuracy: 0.0,
            loss: 0.0,
            dead,
        };
    }
    let n = res.len() as f64;
    ValStats {
        accuracy: res.iter().filter(|r| r.0).count() as f64 / n,
        loss: res.iter().map(|r| r.1).sum::<f64>() / n,
        dead,
    }
}

/// Expert outputs for one snippet start.
#[derive(Debug, Clone, PartialEq)]
pub struct SnippetFeatures {
    pub spatial_taps: [Option<Tensor>; NUM_BLOCKS],
    pub temporal_taps: [Option<Tensor>; NUM_BLOCKS],
    pub scores: ExpertScores,
}

impl SnippetFeatures {
    pub fn taps(&self, tap_layer: usize) -> Result<(Tensor, Tensor)> {
        match (&self.spatial_taps[tap_layer - 1], &self.temporal_taps[tap_layer - 1]) {
            (Some(a), Some(b)) => Ok((a.clone(), b.clone())),
            _ => Err(Error::InvalidArgument(format!("tap layer {tap_layer} was not cached"))),
        }
    }
}

/// Cached expert outputs per video and snippet start.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoFeatures {
    pub id: String,
    pub label: usize,
    pub starts: Vec<Option<SnippetFeatures>>,
}

impl VideoFeatures {
    pub fn at(&self, start: usize) -> Result<&SnippetFeatures> {
        self.starts
            .get(start)
            .and_then(Option::as_ref)
            .ok_or_else(|| Error::InvalidArgument(format!("start {start} of {} was not cached", self.id)))
    }

    /// Gate inputs for the given starts: tap pairs and consensus scores.
    pub fn gate_inputs(&self, starts: &[usize], tap_layer: usize) -> Result<GateInputs> {
        let mut snippets = Vec::with_capacity(starts.len());
        let (mut rgb, mut flow) = (Vec::new(), Vec::new());
        for &s in starts {
            let f = self.at(s)?;
            snippets.push(f.taps(tap_layer)?);
            rgb.push(f.scores.g_rgb.clone());
            flow.push(f.scores.g_flow.clone());
        }
        Ok(GateInputs {
            snippets,
            scores: ExpertScores {
                g_rgb: segmental_consensus(&rgb)?,
                g_flow: segmental_consensus(&flow)?,
            },
            label: self.label,
        })
    }
}

/// Frozen experts of both streams.
#[derive(Debug, Clone, PartialEq)]
pub struct Experts {
    pub spatial: ExpertNet,
    pub temporal: ExpertNet,
}

impl Experts {
    /// Combined parameter hash of both experts.
    pub fn content_hash(&self) -> String {
        format!(
            "{}:{}",
            self.spatial.params.content_hash(),
            self.temporal.params.content_hash()
        )
    }

    pub fn snippet_features(&self, snippet: &crate::experts::Snippet, tap_layers: &[usize]) -> Result<SnippetFeatures> {
        let (st, ss) = self.spatial.forward_taps(&snippet.spatial)?;
        let (tt, ts) = self.temporal.forward_taps(&snippet.temporal)?;
        let keep = |taps: [Tensor; NUM_BLOCKS]| {
            let mut out: [Option<Tensor>; NUM_BLOCKS] = Default::default();
            for (i, t) in taps.into_iter().enumerate() {
                if tap_layers.contains(&(i + 1)) {
                    out[i] = Some(t);
                }
            }
            out
        };
        Ok(SnippetFeatures {
            spatial_taps: keep(st),
            temporal_taps: keep(tt),
            scores: ExpertScores { g_rgb: ss, g_flow: ts },
        })
    }

    /// Caches the requested starts (`None` = every valid start) of each video.
    pub fn cache(
        &self,
        videos: &[SynthVideo],
        flow_len: usize,
        starts: Option<&[usize]>,
        tap_layers: &[usize],
    ) -> Result<Vec<VideoFeatures>> {
        videos
            .par_iter()
            .map(|v| {
                let n = v.num_starts(flow_len);
                let wanted: Vec<usize> = match starts {
                    Some(s) => s.to_vec(),
                    None => (0..n).collect(),
                };
                let mut slots = vec![None; n];
                for s in wanted {
                    if s >= n {
                        return Err(Error::InvalidArgument(format!("start {s} out of range for {}", v.id)));
                    }
                    slots[s] = Some(self.snippet_features(&v.snippet(s, flow_len)?, tap_layers)?);
                }
                Ok(VideoFeatures {
                    id: v.id.clone(),
                    label: v.label,
                    starts: slots,
                })
            })
            .collect()
    }
}

/// Expert features for gate training and validation, shareable across runs.
#[derive(Debug, Clone, PartialEq)]
pub struct GateData {
    pub train: Vec<VideoFeatures>,
    pub val: Vec<VideoFeatures>,
    pub val_starts: Vec<usize>,
    pub num_starts: usize,
}

impl GateData {
    pub fn build(
        experts: &Experts,
        cfg: &ExperimentConfig,
        train: &[SynthVideo],
        val: &[SynthVideo],
        tap_layers: &[usize],
    ) -> Result<Self> {
        let l = cfg.dataset.flow_len;
        let num_starts = cfg.dataset.frames - l;
        let val_starts = data::equally_spaced_starts(num_starts, cfg.train.num_segments);
        Ok(GateData {
            train: experts.cache(train, l, None, tap_layers)?,
            val: experts.cache(val, l, Some(&val_starts), tap_layers)?,
            val_starts,
            num_starts,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateStage {
    /// Fusion weights only.
    Weights,
    /// Fusion weights and the gate's own classification head.
    Multitask,
}

/// Trains `gate` in place for one stage and returns the stage summary; the
/// gate ends holding its best-validation parameters.
pub fn train_gate_stage(
    cfg: &ExperimentConfig,
    gate: &mut GateNet,
    which: GateStage,
    data: &GateData,
    log: &mut TrainLog,
) -> Result<StageSummary> {
    let t = &cfg.train;
    let (stage, name, lambda) = match which {
        GateStage::Weights => (2u8, "gate", t.lambda_stage2),
        GateStage::Multitask => (3u8, "multitask", t.lambda_stage3),
    };
    let (hw, hb) = gate.head_c_ids();
    let ctl = StageCtl {
        stage,
        name: name.to_string(),
        lambda,
        lr_initial: t.lr_initial,
        lr_reduced: t.lr_reduced,
        max_epochs: t.max_epochs_gate,
        patience: t.patience,
        batch_size: t.gate_batch_size,
        momentum: t.momentum,
        clip: t.grad_clip_l2,
        watch: vec![hw, hb],
    };
    let tap = gate.arch.fusion.tap_layer;
    let k = t.num_segments;
    let val_inputs: Vec<GateInputs> = data
        .val
        .iter()
        .map(|v| v.gate_inputs(&data.val_starts, tap))
        .collect::<Result<_>>()?;
    let mut params = std::mem::take(&mut gate.params);
    let summary = {
        let gate = &*gate;
        let step = |p: &ParamStore, i: usize, seed: u64| -> Result<SampleOut> {
            let mut r = DetRng::seed_from_u64(seed);
            let starts = data::segment_starts(data.num_starts, k, &mut r)?;
            let inputs = data.train[i].gate_inputs(&starts, tap)?;
            let mut g = Graph::new(p);
            let nodes = gate.build_loss(&mut g, &inputs, lambda, true, &mut r)?;
            Ok(SampleOut {
                loss: g.value(nodes.total).data()[0],
                dead: g.fallback_triggered(nodes.gate.w),
                grads: g.backward(nodes.total)?,
            })
        };
        let evaluate = |p: &ParamStore| -> Result<ValStats> {
            let res: Vec<(bool, f64, bool)> = val_inputs
                .par_iter()
                .map(|inp| {
                    let mut g = Graph::new(p);
                    let mut r = rng::stream(0, Stream::Misc);
                    let nodes = gate.build_loss(&mut g, inp, lambda, false, &mut r)?;
                    Ok((
                        g.value(nodes.fused).argmax() == inp.label,
                        g.value(nodes.total).data()[0],
                        g.fallback_triggered(nodes.gate.w),
                    ))
                })
                .collect::<Result<_>>()?;
            let dead = res.iter().filter(|r| r.2).count();
            let pairs: Vec<(bool, f64)> = res.iter().map(|r| (r.0, r.1)).collect();
            Ok(summarize(&pairs, dead))
        };
        let mut rng_train = rng::stream(rng::derive_seed(cfg.seed, stage as u64), Stream::GateTrain);
        run_stage(&ctl, &mut params, data.train.len(), &mut rng_train, step, evaluate, log)?
    };
    gate.params = params;
    log.stages.push(summary.clone());
    Ok(summary)
}

/// Everything produced by a full training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub experts: Arc<Experts>,
    pub gate_stage2: GateNet,
    pub gate_final: GateNet,
    /// True when the joint stage beat the weight-only checkpoint on validation.
    pub stage3_improved: bool,
    pub expert_hash_before_gate: String,
    pub expert_hash_after_gate: String,
    pub log: TrainLog,
}

pub const SPATIAL_CKPT: &str = "expert_spatial.ckpt";
pub const TEMPORAL_CKPT: &str = "expert_temporal.ckpt";
pub const GATE_STAGE2_CKPT: &str = "gate_stage2.ckpt";
pub const GATE_STAGE3_CKPT: &str = "gate_stage3.ckpt";
pub const GATE_FINAL_CKPT: &str = "gate_final.ckpt";
pub const TRAIN_LOG: &str = "train_log.jsonl";

fn expert_meta(net: &ExpertNet) -> serde_json::Value {
    serde_json::json!({
        "kind": "expert",
        "stage": 1,
        "stream": net.stream.name(),
        "arch": net.arch,
    })
}

fn gate_meta(gate: &GateNet, stage: u8) -> serde_json::Value {
    serde_json::json!({
        "kind": "gate",
        "stage": stage,
        "activation": gate.activation,
        "arch": gate.arch,
    })
}

/// Trains both experts (stage 1).
pub fn train_experts(
    cfg: &ExperimentConfig,
    train: &[SynthVideo],
    val: &[SynthVideo],
    log: &mut TrainLog,
) -> Result<Experts> {
    Ok(Experts {
        spatial: train_expert(cfg, StreamKind::Spatial, train, val, log)?,
        temporal: train_expert(cfg, StreamKind::Temporal, train, val, log)?,
    })
}

/// Runs the gate stages on frozen experts and cached features.
pub fn train_gate(
    cfg: &ExperimentConfig,
    experts: Arc<Experts>,
    data: &GateData,
    mut log: TrainLog,
) -> Result<TrainOutcome> {
    if !experts.spatial.is_frozen() || !experts.temporal.is_frozen() {
        return Err(Error::InvalidArgument("gate training needs frozen experts".into()));
    }
    let before = experts.content_hash();
    let mut gate = new_gate(cfg)?;
    train_gate_stage(cfg, &mut gate, GateStage::Weights, data, &mut log)?;
    let stage2 = gate.clone();
    let mut improved = false;
    if cfg.train.multitask {
        let s3 = train_gate_stage(cfg, &mut gate, GateStage::Multitask, data, &mut log)?;
        // Epoch 0 of the joint stage is the weight-only checkpoint, so a
        // best epoch of 0 means the fallback was taken.
        improved = s3.best_epoch > 0;
    }
    let after = experts.content_hash();
    Ok(TrainOutcome {
        experts,
        gate_stage2: stage2,
        gate_final: gate,
        stage3_improved: improved,
        expert_hash_before_gate: before,
        expert_hash_after_gate: after,
        log,
    })
}

/// Full three-stage run. With `out`, checkpoints and the log are written there.
pub fn run_training(
    cfg: &ExperimentConfig,
    train: &[SynthVideo],
    val: &[SynthVideo],
    out: Option<&Path>,
) -> Result<TrainOutcome> {
    let mut log = TrainLog::default();
    let experts = Arc::new(train_experts(cfg, train, val, &mut log)?);
    if let Some(dir) = out {
        save_experts(dir, &experts, &mut log)?;
    }
    let data = GateData::build(&experts, cfg, train, val, &[cfg.model.tap_layer])?;
    let outcome = train_gate(cfg, experts, &data, log)?;
    finish(cfg, outcome, out)
}

fn save_experts(dir: &Path, experts: &Experts, log: &mut TrainLog) -> Result<()> {
    for (net, file) in [(&experts.spatial, SPATIAL_CKPT), (&experts.temporal, TEMPORAL_CKPT)] {
        let path = dir.join(file);
        checkpoint::save_params(&path, &net.params, expert_meta(net))?;
        let name = format!("expert_{}", net.stream.name());
        if let Some(s) = log.stages.iter_mut().find(|s| s.stage_name == name) {
            s.best_checkpoint = Some(path);
        }
    }
    Ok(())
}

fn finish(cfg: &ExperimentConfig, mut outcome: TrainOutcome, out: Option<&Path>) -> Result<TrainOutcome> {
    let Some(dir) = out else { return Ok(outcome) };
    let p2 = dir.join(GATE_STAGE2_CKPT);
    checkpoint::save_params(&p2, &outcome.gate_stage2.params, gate_meta(&outcome.gate_stage2, 2))?;
    if let Some(s) = outcome.log.stages.iter_mut().find(|s| s.stage == 2) {
        s.best_checkpoint = Some(p2);
    }
    let final_stage = if cfg.train.multitask {
        let p3 = dir.join(GATE_STAGE3_CKPT);
        checkpoint::save_params(&p3, &outcome.gate_final.params, gate_meta(&outcome.gate_final, 3))?;
        if let Some(s) = outcome.log.stages.iter_mut().find(|s| s.stage == 3) {
            s.best_checkpoint = Some(p3);
        }
        3
    } else {
        2
    };
    checkpoint::save_params(
        &dir.join(GATE_FINAL_CKPT),
        &outcome.gate_final.params,
        gate_meta(&outcome.gate_final, final_stage),
    )?;
    outcome.log.write_jsonl(&dir.join(TRAIN_LOG))?;
    Ok(outcome)
}

/// Rebuilds the experts from the checkpoints in `dir`, checking them against
/// the architecture the config implies.
pub fn load_experts(cfg: &ExperimentConfig, dir: &Path) -> Result<Experts> {
    let load = |stream: StreamKind, file: &str| -> Result<ExpertNet> {
        let mut rng = rng::stream(0, Stream::Misc);
        let mut net = ExpertNet::new(stream, expert_arch(cfg, stream), cfg.model.tap_layer, &mut rng)?;
        let header = checkpoint::load_params(&dir.join(file), &mut net.params)?;
        if header.meta.get("kind").and_then(|k| k.as_str()) != Some("expert") {
            return Err(Error::CheckpointMismatch(format!("{file} is not an expert checkpoint")));
        }
        net.freeze();
        Ok(net)
    };
    Ok(Experts {
        spatial: load(StreamKind::Spatial, SPATIAL_CKPT)?,
        temporal: load(StreamKind::Temporal, TEMPORAL_CKPT)?,
    })
}

/// Loads a gate checkpoint, rejecting one built for another architecture.
pub fn load_gate(cfg: &ExperimentConfig, path: &Path) -> Result<(GateNet, u8)> {
    let mut gate = new_gate(cfg)?;
    let header = checkpoint::load_params(path, &mut gate.params)?;
    let meta = &header.meta;
    if meta.get("kind").and_then(|k| k.as_str()) != Some("gate") {
        return Err(Error::CheckpointMismatch(format!(
            "{} is not a gate checkpoint",
            path.display()
        )));
    }
    let arch: GateArch = serde_json::from_value(meta.get("arch").cloned().unwrap_or_default())
        .map_err(|e| Error::CheckpointMismatch(format!("gate architecture unreadable: {e}")))?;
    if arch != gate.arch {
        return Err(Error::CheckpointMismatch(format!(
            "checkpoint gate {arch:?} does not match config gate {:?}",
            gate.arch
        )));
    }
    let activation = meta.get("activation").cloned().unwrap_or_default();
    if activation != serde_json::json!(gate.activation) {
        return Err(Error::CheckpointMismatch(format!(
            "checkpoint activation {activation} does not match config {:?}",
            gate.activation
        )));
    }
    let stage = meta.get("stage").and_then(|s| s.as_u64()).unwrap_or(0) as u8;
    Ok((gate, stage))
}

/// Resumes from any stage checkpoint in a run directory: an expert
/// checkpoint skips stage 1, a weight-only gate checkpoint skips to the
/// joint stage, a joint-stage checkpoint only reloads.
pub fn resume_training(
    cfg: &ExperimentConfig,
    train: &[SynthVideo],
    val: &[SynthVideo],
    resume: &Path,
    out: Option<&Path>,
) -> Result<TrainOutcome> {
    let dir = resume.parent().unwrap_or(Path::new("."));
    let (header, _) = checkpoint::read_file(resume)?;
    let kind = header.meta.get("kind").and_then(|k| k.as_str()).unwrap_or("");
    let experts = Arc::new(load_experts(cfg, dir)?);
    let mut log = TrainLog::default();
    if let Some(dir) = out {
        save_experts(dir, &experts, &mut log)?;
    }
    match kind {
        "expert" => {
            let data = GateData::build(&experts, cfg, train, val, &[cfg.model.tap_layer])?;
            let outcome = train_gate(cfg, experts, &data, log)?;
            finish(cfg, outcome, out)
        }
        "gate" => {
            let (mut gate, stage) = load_gate(cfg, resume)?;
            let before = experts.content_hash();
            let stage2 = gate.clone();
            let mut improved = false;
            if stage == 2 && cfg.train.multitask {
                let data = GateData::build(&experts, cfg, train, val, &[cfg.model.tap_layer])?;
                let s3 = train_gate_stage(cfg, &mut gate, GateStage::Multitask, &data, &mut log)?;
                improved = s3.best_epoch > 0;
            }
            let after = experts.content_hash();
            let outcome = TrainOutcome {
                experts,
                gate_stage2: stage2,
                gate_final: gate,
                stage3_improved: improved,
                expert_hash_before_gate: before,
                expert_hash_after_gate: after,
                log,
            };
            finish(cfg, outcome, out)
        }
        other => Err(Error::CheckpointMismatch(format!("unknown checkpoint kind {other:?}"))),
    }
}
