//! Test-time evaluation, experiment reports, the ablation grid and plot-data
//! exports.
//!
//! Every test video is pushed through both experts once per crop; all fusion
//! methods then read those same crop outputs, so differences between methods
//! come from fusion alone.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::{self, FixedWeight};
use crate::config::ExperimentConfig;
use crate::data::{self, CueType, Splits, SynthVideo, TestProtocol};
use crate::error::{Error, Result};
use crate::experts::ExpertScores;
use crate::gating::{self, FusionStyle, GateActivation, GateNet};
use crate::rng::{self, Stream};
use crate::tensor::{self, Tensor};
use crate::trainer::{self, Experts, GateData, SnippetFeatures, TrainOutcome};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Both experts' outputs for every crop of one video.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoCrops {
    pub id: String,
    pub label: usize,
    pub cue_type: CueType,
    pub crops: Vec<SnippetFeatures>,
}

impl VideoCrops {
    /// Mean crop scores of each stream.
    pub fn mean_scores(&self) -> Result<ExpertScores> {
        let rgb: Vec<Tensor> = self.crops.iter().map(|c| c.scores.g_rgb.clone()).collect();
        let flow: Vec<Tensor> = self.crops.iter().map(|c| c.scores.g_flow.clone()).collect();
        Ok(ExpertScores {
            g_rgb: tensor::mean_of(&rgb)?,
            g_flow: tensor::mean_of(&flow)?,
        })
    }
}

/// Runs the test protocol on every video; each crop costs one forward pass
/// per stream.
pub fn crop_outputs(
    experts: &Experts,
    videos: &[SynthVideo],
    flow_len: usize,
    protocol: &TestProtocol,
    tap_layers: &[usize],
) -> Result<Vec<VideoCrops>> {
    videos
        .par_iter()
        .map(|v| {
            let samples = data::test_protocol(v, flow_len, protocol)?;
            let crops = samples
                .iter()
                .map(|s| experts.snippet_features(&s.snippet, tap_layers))
                .collect::<Result<_>>()?;
            Ok(VideoCrops {
                id: v.id.clone(),
                label: v.label,
                cue_type: v.cue_type,
                crops,
            })
        })
        .collect()
}

/// SHA-256 over every crop score tensor, in video and crop order.
pub fn scores_hash(videos: &[VideoCrops]) -> String {
    let mut h = Sha256::new();
    for v in videos {
        for c in &v.crops {
            h.update(c.scores.g_rgb.to_le_bytes());
            h.update(c.scores.g_flow.to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Where the gate's fusion weights come from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GateMode {
    Learned,
    Forced([f64; 2]),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightSample {
    pub id: String,
    pub label: usize,
    pub cue_type: CueType,
    /// Mean spatial and temporal weights over the video's crops.
    pub w_spatial: f64,
    pub w_temporal: f64,
    pub correct: bool,
    /// At least one crop fell back to even weights.
    pub dead: bool,
}

impl WeightSample {
    pub fn spatial_share(&self) -> f64 {
        let total = self.w_spatial + self.w_temporal;
        if total > 0.0 {
            self.w_spatial / total
        } else {
            0.5
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatedResult {
    pub accuracy: f64,
    pub samples: Vec<WeightSample>,
    pub dead_crops: usize,
    pub total_crops: usize,
}

impl GatedResult {
    pub fn dead_rate(&self) -> f64 {
        if self.total_crops == 0 {
            0.0
        } else {
            self.dead_crops as f64 / self.total_crops as f64
        }
    }
}

/// Mean over crops of `w1 * g_rgb + w2 * g_flow`, with the gate run on each
/// crop as a single snippet.
pub fn gated_eval(gate: &GateNet, videos: &[VideoCrops], mode: GateMode) -> Result<GatedResult> {
    if videos.is_empty() {
        return Err(Error::Empty("evaluation over zero videos"));
    }
    let tap = gate.arch.fusion.tap_layer;
    let per_video: Vec<(WeightSample, usize, usize)> = videos
        .par_iter()
        .map(|v| {
            let mut fused = Vec::with_capacity(v.crops.len());
            let (mut ws, mut wt, mut dead) = (0.0, 0.0, 0usize);
            for c in &v.crops {
                let w = match mode {
                    GateMode::Forced(w) => w,
                    GateMode::Learned => {
                        let mut r = rng::stream(0, Stream::Misc);
                        let out = gate.forward(&[c.taps(tap)?], false, &mut r)?;
                        dead += usize::from(out.dead);
                        out.w
                    }
                };
                ws += w[0];
                wt += w[1];
                fused.push(gating::gated_fuse(&c.scores, w)?);
            }
            let n = v.crops.len() as f64;
            let correct = tensor::mean_of(&fused)?.argmax() == v.label;
            Ok((
                WeightSample {
                    id: v.id.clone(),
                    label: v.label,
                    cue_type: v.cue_type,
                    w_spatial: ws / n,
                    w_temporal: wt / n,
                    correct,
                    dead: dead > 0,
                },
                dead,
                v.crops.len(),
            ))
        })
        .collect::<Result<_>>()?;
    let correct = per_video.iter().filter(|p| p.0.correct).count();
    Ok(GatedResult {
        accuracy: correct as f64 / videos.len() as f64,
        dead_crops: per_video.iter().map(|p| p.1).sum(),
        total_crops: per_video.iter().map(|p| p.2).sum(),
        samples: per_video.into_iter().map(|p| p.0).collect(),
    })
}

fn accuracy_of(videos: &[VideoCrops], predict: impl Fn(&VideoCrops) -> Result<usize> + Sync) -> Result<f64> {
    if videos.is_empty() {
        return Err(Error::Empty("evaluation over zero videos"));
    }
    let correct: Vec<bool> = videos
        .par_iter()
        .map(|v| Ok(predict(v)? == v.label))
        .collect::<Result<_>>()?;
    Ok(correct.iter().filter(|&&c| c).count() as f64 / videos.len() as f64)
}

/// Video-level scores for the fixed-weight grid search.
pub fn video_level(videos: &[VideoCrops]) -> Result<Vec<(ExpertScores, usize)>> {
    videos.iter().map(|v| Ok((v.mean_scores()?, v.label))).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodAccuracy {
    pub gated: f64,
    /// The weight-only gate, before the joint stage.
    pub gated_stage2: f64,
    /// Fixed weights chosen by grid search on validation.
    pub fixed_grid: f64,
    /// Fixed weights 1 : 1.5.
    pub fixed_default: f64,
    /// Even averaging: the gate path with weights forced to (0.5, 0.5).
    pub even: f64,
    pub sci: f64,
    pub spatial: f64,
    pub temporal: f64,
}

/// Accuracy of every method on shared crop outputs.
pub fn method_accuracies(
    gate: &GateNet,
    gate_stage2: &GateNet,
    test: &[VideoCrops],
    fixed: FixedWeight,
) -> Result<(MethodAccuracy, GatedResult, GatedResult)> {
    let gated = gated_eval(gate, test, GateMode::Learned)?;
    let gated2 = gated_eval(gate_stage2, test, GateMode::Learned)?;
    let even = gated_eval(gate, test, GateMode::Forced([0.5, 0.5]))?;
    let fixed_acc = |w: FixedWeight| accuracy_of(test, |v| Ok(baselines::fixed_fuse(&v.mean_scores()?, w)?.argmax()));
    let sci = accuracy_of(test, |v| {
        let fused: Vec<Tensor> = v
            .crops
            .iter()
            .map(|c| baselines::sci_fuse(&c.scores))
            .collect::<Result<_>>()?;
        Ok(tensor::mean_of(&fused)?.argmax())
    })?;
    let acc = MethodAccuracy {
        gated: gated.accuracy,
        gated_stage2: gated2.accuracy,
        fixed_grid: fixed_acc(fixed)?,
        fixed_default: fixed_acc(FixedWeight::new(1.0, 1.5)?)?,
        even: even.accuracy,
        sci,
        spatial: accuracy_of(test, |v| Ok(v.mean_scores()?.g_rgb.argmax()))?,
        temporal: accuracy_of(test, |v| Ok(v.mean_scores()?.g_flow.argmax()))?,
    };
    Ok((acc, gated, gated2))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochsToBest {
    pub expert_spatial: Option<usize>,
    pub expert_temporal: Option<usize>,
    pub gate: Option<usize>,
    pub multitask: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub schema_version: u32,
    pub config: ExperimentConfig,
    pub accuracy: MethodAccuracy,
    /// Accuracy per cue type for the gated and grid-searched fixed methods.
    pub per_cue_accuracy: BTreeMap<String, [f64; 2]>,
    pub fixed_weight: FixedWeight,
    pub dead_gate_rate: f64,
    pub weight_samples: Vec<WeightSample>,
    pub stage2_weight_samples: Vec<WeightSample>,
    /// Standard deviation of the spatial share `w1 / (w1 + w2)`.
    pub spatial_share_std: f64,
    pub stage2_spatial_share_std: f64,
    pub epochs_to_best: EpochsToBest,
    pub val_accuracy_stage2: Option<f64>,
    pub val_accuracy_stage3: Option<f64>,
    pub stage3_improved: bool,
    pub test_videos: usize,
    pub crops_per_video: usize,
    /// Forward passes per stream over the whole test split.
    pub crop_evaluations_per_stream: usize,
    pub expert_scores_hash: String,
    pub expert_hash: String,
    pub wall_time_s: f64,
}

impl ExperimentReport {
    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let report: ExperimentReport = serde_json::from_str(&text)?;
        if report.schema_version != REPORT_SCHEMA_VERSION {
            return Err(Error::InvalidArgument(format!(
                "report schema version {} is not {REPORT_SCHEMA_VERSION}",
                report.schema_version
            )));
        }
        Ok(report)
    }
}

pub fn share_std(samples: &[WeightSample]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let n = samples.len() as f64;
    let mean = samples.iter().map(|s| s.spatial_share()).sum::<f64>() / n;
    (samples.iter().map(|s| (s.spatial_share() - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Expert outputs shared by every fusion method and every gate of one seed.
#[derive(Debug, Clone)]
pub struct EvalData {
    pub val: Vec<VideoCrops>,
    pub test: Vec<VideoCrops>,
    pub fixed_weight: FixedWeight,
}

impl EvalData {
    pub fn build(experts: &Experts, cfg: &ExperimentConfig, splits: &Splits, tap_layers: &[usize]) -> Result<Self> {
        let protocol = cfg.test.protocol();
        let l = cfg.dataset.flow_len;
        let val = crop_outputs(experts, &splits.val, l, &protocol, tap_layers)?;
        let test = crop_outputs(experts, &splits.test, l, &protocol, tap_layers)?;
        let fixed_weight = baselines::grid_search_weight(&video_level(&val)?, &baselines::default_grid())?;
        Ok(EvalData {
            val,
            test,
            fixed_weight,
        })
    }
}

/// Builds the report of a finished run from shared evaluation data.
pub fn report(
    cfg: &ExperimentConfig,
    outcome: &TrainOutcome,
    eval: &EvalData,
    started: Instant,
) -> Result<ExperimentReport> {
    let (accuracy, gated, gated2) =
        method_accuracies(&outcome.gate_final, &outcome.gate_stage2, &eval.test, eval.fixed_weight)?;
    let mut per_cue = BTreeMap::new();
    for cue in [CueType::SpatialOnly, CueType::TemporalOnly, CueType::Both] {
        let subset: Vec<VideoCrops> = eval.test.iter().filter(|v| v.cue_type == cue).cloned().collect();
        if subset.is_empty() {
            continue;
        }
        let g = gated_eval(&outcome.gate_final, &subset, GateMode::Learned)?.accuracy;
        let f = accuracy_of(&subset, |v| {
            Ok(baselines::fixed_fuse(&v.mean_scores()?, eval.fixed_weight)?.argmax())
        })?;
        per_cue.insert(format!("{cue:?}"), [g, f]);
    }
    let stage = |name: &str| outcome.log.stage(name);
    let crops_per_video = eval.test.first().map_or(0, |v| v.crops.len());
    Ok(ExperimentReport {
        schema_version: REPORT_SCHEMA_VERSION,
        config: cfg.clone(),
        accuracy,
        per_cue_accuracy: per_cue,
        fixed_weight: eval.fixed_weight,
        dead_gate_rate: gated.dead_rate(),
        spatial_share_std: share_std(&gated.samples),
        stage2_spatial_share_std: share_std(&gated2.samples),
        weight_samples: gated.samples,
        stage2_weight_samples: gated2.samples,
        epochs_to_best: EpochsToBest {
            expert_spatial: stage("expert_spatial").map(|s| s.best_epoch),
            expert_temporal: stage("expert_temporal").map(|s| s.best_epoch),
            gate: stage("gate").map(|s| s.best_epoch),
            multitask: stage("multitask").map(|s| s.best_epoch),
        },
        val_accuracy_stage2: stage("gate").map(|s| s.best_val_accuracy),
        val_accuracy_stage3: stage("multitask").map(|s| s.best_val_accuracy),
        stage3_improved: outcome.stage3_improved,
        test_videos: eval.test.len(),
        crops_per_video,
        crop_evaluations_per_stream: eval.test.iter().map(|v| v.crops.len()).sum(),
        expert_scores_hash: scores_hash(&eval.test),
        expert_hash: outcome.experts.content_hash(),
        wall_time_s: started.elapsed().as_secs_f64(),
    })
}

/// Generates data, trains all stages, evaluates and (with `out`) writes the
/// run directory.
pub fn run_experiment(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<(TrainOutcome, ExperimentReport)> {
    let started = Instant::now();
    cfg.validate()?;
    let splits = data::generate_dataset(&cfg.dataset)?;
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("config.json");
        fs::write(&path, serde_json::to_vec_pretty(cfg)?).map_err(|e| Error::io(&path, e))?;
    }
    let outcome = trainer::run_training(cfg, &splits.train, &splits.val, out)?;
    let eval = EvalData::build(&outcome.experts, cfg, &splits, &[cfg.model.tap_layer])?;
    let report = report(cfg, &outcome, &eval, started)?;
    if let Some(dir) = out {
        report.write(&dir.join("report.json"))?;
    }
    Ok((outcome, report))
}

/// Evaluates the checkpoints of a finished run directory.
pub fn eval_run_dir(cfg: &ExperimentConfig, dir: &Path) -> Result<ExperimentReport> {
    let started = Instant::now();
    let splits = data::generate_dataset(&cfg.dataset)?;
    let experts = Arc::new(trainer::load_experts(cfg, dir)?);
    let (gate_final, _) = trainer::load_gate(cfg, &dir.join(trainer::GATE_FINAL_CKPT))?;
    let (gate_stage2, _) = trainer::load_gate(cfg, &dir.join(trainer::GATE_STAGE2_CKPT))?;
    let log = read_log(&dir.join(trainer::TRAIN_LOG)).unwrap_or_default();
    let stage3_improved = log.stage("multitask").is_some_and(|s| s.best_epoch > 0);
    let outcome = TrainOutcome {
        expert_hash_before_gate: experts.content_hash(),
        expert_hash_after_gate: experts.content_hash(),
        experts,
        gate_stage2,
        gate_final,
        stage3_improved,
        log,
    };
    let eval = EvalData::build(&outcome.experts, cfg, &splits, &[cfg.model.tap_layer])?;
    report(cfg, &outcome, &eval, started)
}

/// Parses a JSON-lines training log.
pub fn read_log(path: &Path) -> Result<trainer::TrainLog> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut log = trainer::TrainLog::default();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let v: serde_json::Value = serde_json::from_str(line)?;
        match v.get("record").and_then(|r| r.as_str()) {
            Some("epoch") => log.epochs.push(serde_json::from_value(v["data"].clone())?),
            Some("stage") => log.stages.push(serde_json::from_value(v["data"].clone())?),
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "unrecognised log line in {}",
                    path.display()
                )))
            }
        }
    }
    Ok(log)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationCell {
    pub activation: GateActivation,
    pub fusion_style: FusionStyle,
    pub tap_layer: usize,
    pub multitask: bool,
}

impl AblationCell {
    pub fn apply(&self, base: &ExperimentConfig, seed: u64) -> ExperimentConfig {
        let mut cfg = base.clone();
        cfg.model.activation = self.activation;
        cfg.model.fusion_style = self.fusion_style;
        cfg.model.tap_layer = self.tap_layer;
        cfg.train.multitask = self.multitask;
        cfg.seed = seed;
        cfg
    }

    pub fn label(&self) -> String {
        format!(
            "{}_{}_tap{}_{}",
            serde_json::to_value(self.activation)
                .ok()
                .and_then(|v| v.as_str().map(str::to_string))
                .unwrap_or_default(),
            serde_json::to_value(self.fusion_style)
                .ok()
                .and_then(|v| v.as_str().map(str::to_string))
                .unwrap_or_default(),
            self.tap_layer,
            if self.multitask { "mt" } else { "nomt" }
        )
    }
}

pub fn ablation_cells(base: &ExperimentConfig) -> Vec<AblationCell> {
    let a = &base.ablation;
    let mut cells = Vec::with_capacity(a.num_cells());
    for &activation in &a.activations {
        for &fusion_style in &a.fusion_styles {
            for &tap_layer in &a.tap_layers {
                for &multitask in &a.multitask {
                    cells.push(AblationCell {
                        activation,
                        fusion_style,
                        tap_layer,
                        multitask,
                    });
                }
            }
        }
    }
    cells
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRun {
    pub cell: AblationCell,
    pub seed: u64,
    pub report: Option<ExperimentReport>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub runs: Vec<CellRun>,
}

impl AblationResult {
    pub fn failures(&self) -> usize {
        self.runs.iter().filter(|r| r.report.is_none()).count()
    }
}

/// Runs every cell for every replicate seed. Experts and their cached
/// outputs are shared by all cells of one seed; a failing cell is recorded
/// and the grid continues. `threads` caps concurrent cells.
pub fn run_ablation(base: &ExperimentConfig, out: Option<&Path>, threads: usize) -> Result<AblationResult> {
    base.validate()?;
    let splits = data::generate_dataset(&base.dataset)?;
    let cells = ablation_cells(base);
    let taps: Vec<usize> = {
        let mut t = base.ablation.tap_layers.clone();
        t.sort_unstable();
        t.dedup();
        t
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    let mut runs = Vec::new();
    for &seed in &base.ablation.seeds {
        let mut seed_cfg = base.clone();
        seed_cfg.seed = seed;
        let started = Instant::now();
        let prepared = pool.install(|| -> Result<_> {
            let mut log = trainer::TrainLog::default();
            let experts = Arc::new(trainer::train_experts(&seed_cfg, &splits.train, &splits.val, &mut log)?);
            let gate_data = GateData::build(&experts, &seed_cfg, &splits.train, &splits.val, &taps)?;
            let eval = EvalData::build(&experts, &seed_cfg, &splits, &taps)?;
            Ok((experts, log, gate_data, eval))
        });
        let (experts, log, gate_data, eval) = match prepared {
            Ok(p) => p,
            Err(e) => {
                runs.extend(cells.iter().map(|&cell| CellRun {
                    cell,
                    seed,
                    report: None,
                    error: Some(format!("expert training failed: {e}")),
                }));
                continue;
            }
        };
        let seed_runs: Vec<CellRun> = pool.install(|| {
            cells
                .par_iter()
                .map(|&cell| {
                    let cfg = cell.apply(base, seed);
                    let res = trainer::train_gate(&cfg, experts.clone(), &gate_data, log.clone())
                        .and_then(|outcome| report(&cfg, &outcome, &eval, started));
                    match res {
                        Ok(r) => {
                            if let Some(dir) = out {
                                let path = dir.join(format!("{}_seed{seed}.json", cell.label()));
                                if let Err(e) = r.write(&path) {
                                    return CellRun {
                                        cell,
                                        seed,
                                        report: None,
                                        error: Some(e.to_string()),
                                    };
                                }
                            }
                            CellRun {
                                cell,
                                seed,
                                report: Some(r),
                                error: None,
                            }
                        }
                        Err(e) => CellRun {
                            cell,
                            seed,
                            report: None,
                            error: Some(e.to_string()),
                        },
                    }
                })
                .collect()
        });
        runs.extend(seed_runs);
    }
    Ok(AblationResult { runs })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
struct LongRow {
    activation: String,
    fusion_style: String,
    tap_layer: usize,
    multitask: bool,
    seed: u64,
    gated: Option<f64>,
    fixed_grid: Option<f64>,
    sci: Option<f64>,
    even: Option<f64>,
    spatial: Option<f64>,
    temporal: Option<f64>,
    dead_gate_rate: Option<f64>,
    error: Option<String>,
}

fn name_of<T: Serialize>(v: T) -> String {
    serde_json::to_value(v)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}

/// Mean and population standard deviation.
pub fn mean_sd(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    (m, (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt())
}

/// Writes `ablation_long.csv` (one row per cell and seed) and
/// `ablation_table.csv` (rows: activation, multitask, tap layer; columns:
/// fusion style; entries mean ± sd of gated accuracy in percent).
pub fn write_ablation_csv(dir: &Path, result: &AblationResult) -> Result<(PathBuf, PathBuf)> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let long = dir.join("ablation_long.csv");
    let mut w = csv::Writer::from_path(&long).map_err(|e| csv_err(&long, e))?;
    for r in &result.runs {
        let a = r.report.as_ref().map(|x| &x.accuracy);
        w.serialize(LongRow {
            activation: name_of(r.cell.activation),
            fusion_style: name_of(r.cell.fusion_style),
            tap_layer: r.cell.tap_layer,
            multitask: r.cell.multitask,
            seed: r.seed,
            gated: a.map(|a| a.gated),
            fixed_grid: a.map(|a| a.fixed_grid),
            sci: a.map(|a| a.sci),
            even: a.map(|a| a.even),
            spatial: a.map(|a| a.spatial),
            temporal: a.map(|a| a.temporal),
            dead_gate_rate: r.report.as_ref().map(|x| x.dead_gate_rate),
            error: r.error.clone(),
        })
        .map_err(|e| csv_err(&long, e))?;
    }
    w.flush().map_err(|e| Error::io(&long, e))?;

    let table = dir.join("ablation_table.csv");
    let mut styles: Vec<FusionStyle> = result.runs.iter().map(|r| r.cell.fusion_style).collect();
    styles.dedup();
    styles.sort_by_key(|s| name_of(*s));
    styles.dedup();
    let mut rows: Vec<(GateActivation, bool, usize)> = result
        .runs
        .iter()
        .map(|r| (r.cell.activation, r.cell.multitask, r.cell.tap_layer))
        .collect();
    rows.sort_by_key(|&(a, m, t)| (name_of(a), m, t));
    rows.dedup();
    let mut w = csv::Writer::from_path(&table).map_err(|e| csv_err(&table, e))?;
    let mut header = vec!["activation".to_string(), "multitask".into(), "tap_layer".into()];
    header.extend(styles.iter().map(|s| name_of(*s)));
    w.write_record(&header).map_err(|e| csv_err(&table, e))?;
    for (act, mt, tap) in rows {
        let mut rec = vec![name_of(act), mt.to_string(), tap.to_string()];
        for style in &styles {
            let accs: Vec<f64> = result
                .runs
                .iter()
                .filter(|r| {
                    r.cell.activation == act
                        && r.cell.multitask == mt
                        && r.cell.tap_layer == tap
                        && r.cell.fusion_style == *style
                })
                .filter_map(|r| r.report.as_ref().map(|x| 100.0 * x.accuracy.gated))
                .collect();
            let (m, sd) = mean_sd(&accs);
            rec.push(if accs.is_empty() {
                "failed".into()
            } else {
                format!("{m:.2} ± {sd:.2}")
            });
        }
        w.write_record(&rec).map_err(|e| csv_err(&table, e))?;
    }
    w.flush().map_err(|e| Error::io(&table, e))?;
    Ok((long, table))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e.to_string()))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
struct ScatterRow<'a> {
    id: &'a str,
    w_temporal: f64,
    w_spatial: f64,
    correct: bool,
    cue_type: String,
    dead: bool,
}

/// Histogram of the spatial share over `bins` equal bins of `[0, 1]`.
pub fn share_histogram(samples: &[WeightSample], bins: usize) -> Vec<(f64, f64, usize)> {
    let bins = bins.max(1);
    let mut counts = vec![0usize; bins];
    for s in samples {
        let b = ((s.spatial_share() * bins as f64).floor() as usize).min(bins - 1);
        counts[b] += 1;
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(i, c)| (i as f64 / bins as f64, (i + 1) as f64 / bins as f64, c))
        .collect()
}

/// Writes `weights_scatter.csv` and `weights_hist.csv` for a report's
/// weight samples. `prefix` distinguishes several exports in one directory.
pub fn export_weights(dir: &Path, samples: &[WeightSample], prefix: &str, bins: usize) -> Result<(PathBuf, PathBuf)> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let scatter = dir.join(format!("{prefix}weights_scatter.csv"));
    let mut w = csv::Writer::from_path(&scatter).map_err(|e| csv_err(&scatter, e))?;
    for s in samples {
        w.serialize(ScatterRow {
            id: &s.id,
            w_temporal: s.w_temporal,
            w_spatial: s.w_spatial,
            correct: s.correct,
            cue_type: format!("{:?}", s.cue_type),
            dead: s.dead,
        })
        .map_err(|e| csv_err(&scatter, e))?;
    }
    w.flush().map_err(|e| Error::io(&scatter, e))?;
    let hist = dir.join(format!("{prefix}weights_hist.csv"));
    let mut w = csv::Writer::from_path(&hist).map_err(|e| csv_err(&hist, e))?;
    w.write_record(["bin_lo", "bin_hi", "count"])
        .map_err(|e| csv_err(&hist, e))?;
    for (lo, hi, c) in share_histogram(samples, bins) {
        w.write_record([lo.to_string(), hi.to_string(), c.to_string()])
            .map_err(|e| csv_err(&hist, e))?;
    }
    w.flush().map_err(|e| Error::io(&hist, e))?;
    Ok((scatter, hist))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Projection {
    pub coords: Vec<[f64; 2]>,
    pub explained_variance_ratio: [f64; 2],
}

/// Projects rows onto their top two principal components. Each component's
/// sign is fixed so that its largest-magnitude loading is positive.
pub fn pca_2d(rows: &[Vec<f64>]) -> Result<Projection> {
    if rows.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "PCA needs at least 2 samples, got {}",
            rows.len()
        )));
    }
    let d = rows[0].len();
    if d == 0 || rows.iter().any(|r| r.len() != d) {
        return Err(Error::shape("pca_2d", "rows must share a positive length"));
    }
    let n = rows.len();
    let x = DMatrix::from_fn(n, d, |i, j| rows[i][j]);
    let mean = x.row_mean();
    let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let total: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0)).sum();
    let mut comps = Vec::with_capacity(2);
    let mut ratios = [0.0; 2];
    for (k, &idx) in order.iter().take(2).enumerate() {
        let mut v: Vec<f64> = eig.eigenvectors.column(idx).iter().copied().collect();
        let lead = v
            .iter()
            .copied()
            .fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
        if lead < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        comps.push(v);
        ratios[k] = if total > 0.0 {
            eig.eigenvalues[idx].max(0.0) / total
        } else {
            0.0
        };
    }
    let coords = (0..n)
        .map(|i| {
            let mut c = [0.0; 2];
            for (k, v) in comps.iter().enumerate() {
                c[k] = (0..d).map(|j| centered[(i, j)] * v[j]).sum();
            }
            c
        })
        .collect();
    Ok(Projection {
        coords,
        explained_variance_ratio: ratios,
    })
}

/// Gate trunk features of every test video (K segment-centre snippets),
/// projected to 2-D; writes `projection.csv`.
pub fn project_features(cfg: &ExperimentConfig, dir: &Path, out: &Path) -> Result<PathBuf> {
    let splits = data::generate_dataset(&cfg.dataset)?;
    let experts = trainer::load_experts(cfg, dir)?;
    let (gate, _) = trainer::load_gate(cfg, &dir.join(trainer::GATE_FINAL_CKPT))?;
    let l = cfg.dataset.flow_len;
    let starts = data::equally_spaced_starts(cfg.dataset.frames - l, cfg.train.num_segments);
    let cached = experts.cache(&splits.test, l, Some(&starts), &[cfg.model.tap_layer])?;
    let feats: Vec<Vec<f64>> = cached
        .par_iter()
        .map(|v| {
            let inputs = v.gate_inputs(&starts, cfg.model.tap_layer)?;
            Ok(gate.trunk_features(&inputs.snippets)?.into_data())
        })
        .collect::<Result<_>>()?;
    let proj = pca_2d(&feats)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let path = out.join("projection.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| csv_err(&path, e))?;
    w.write_record(["id", "label", "cue_type", "pc1", "pc2"])
        .map_err(|e| csv_err(&path, e))?;
    for (v, c) in splits.test.iter().zip(&proj.coords) {
        w.write_record([
            v.id.clone(),
            v.label.to_string(),
            format!("{:?}", v.cue_type),
            c[0].to_string(),
            c[1].to_string(),
        ])
        .map_err(|e| csv_err(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pca_of_centered_2d_is_rotation() {
        let rows = vec![vec![1.0, 0.5], vec![-1.0, -0.5], vec![0.3, -0.2], vec![-0.3, 0.2]];
        let p = pca_2d(&rows).unwrap();
        for i in 0..rows.len() {
            for j in 0..rows.len() {
                let d0 = ((rows[i][0] - rows[j][0]).powi(2) + (rows[i][1] - rows[j][1]).powi(2)).sqrt();
                let c = (&p.coords[i], &p.coords[j]);
                let d1 = ((c.0[0] - c.1[0]).powi(2) + (c.0[1] - c.1[1]).powi(2)).sqrt();
                assert!((d0 - d1).abs() < 1e-9);
            }
        }
        assert!(p.explained_variance_ratio.iter().sum::<f64>() <= 1.0 + 1e-12);
        assert!(pca_2d(&rows[..1]).is_err());
    }

    #[test]
    fn histogram_counts_every_sample() {
        let s = |w1: f64, w2: f64| WeightSample {
            id: String::new(),
            label: 0,
            cue_type: CueType::Both,
            w_spatial: w1,
            w_temporal: w2,
            correct: true,
            dead: false,
        };
        let samples = vec![s(1.0, 0.0), s(0.0, 1.0), s(0.5, 0.5), s(0.2, 0.6)];
        let h = share_histogram(&samples, 10);
        assert_eq!(h.iter().map(|b| b.2).sum::<usize>(), 4);
        assert_eq!(h[9].2, 1);
        assert_eq!(h[0].2, 1);
    }
}
