//! JSON experiment configuration.
//!
//! `model.activation`, `model.fusion_style` and `model.tap_layer` are
//! required; every other field has a default. Unknown fields are rejected so
//! typos surface as errors naming the offending path.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{CropSet, DatasetSpec, TestProtocol};
use crate::error::{Error, Result};
use crate::experts::{DEFAULT_WIDTHS, NUM_BLOCKS};
use crate::gating::{FusionStyle, GateActivation};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub activation: GateActivation,
    pub fusion_style: FusionStyle,
    /// Expert block (1..=3) whose output feeds the gate.
    pub tap_layer: usize,
    #[serde(default = "default_widths")]
    pub widths: [usize; NUM_BLOCKS],
    #[serde(default = "default_dropout")]
    pub dropout_ratio: f64,
}

fn default_widths() -> [usize; NUM_BLOCKS] {
    DEFAULT_WIDTHS
}

fn default_dropout() -> f64 {
    0.8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub num_segments: usize,
    pub expert_batch_size: usize,
    pub gate_batch_size: usize,
    pub momentum: f64,
    pub grad_clip_l2: f64,
    /// Gate learning rate before and after the single drop.
    pub lr_initial: f64,
    pub lr_reduced: f64,
    /// Expert learning rates; experts here start from scratch.
    pub expert_lr_initial: f64,
    pub expert_lr_reduced: f64,
    pub lambda_stage2: f64,
    pub lambda_stage3: f64,
    /// Run the joint stage after the weight-only stage.
    pub multitask: bool,
    /// Epochs without validation improvement before the lr drop (and again
    /// before stopping).
    pub patience: usize,
    pub max_epochs_expert: usize,
    pub max_epochs_gate: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            num_segments: 3,
            expert_batch_size: 32,
            gate_batch_size: 8,
            momentum: 0.9,
            grad_clip_l2: 40.0,
            lr_initial: 0.01,
            lr_reduced: 0.001,
            expert_lr_initial: 0.02,
            expert_lr_reduced: 0.002,
            lambda_stage2: 0.0,
            lambda_stage3: 1.0,
            multitask: true,
            patience: 5,
            max_epochs_expert: 60,
            max_epochs_gate: 40,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TestConfig {
    pub num_samples: usize,
    pub crops: CropSet,
}

impl Default for TestConfig {
    fn default() -> Self {
        let p = TestProtocol::desk();
        TestConfig {
            num_samples: p.num_samples,
            crops: p.crops,
        }
    }
}

impl TestConfig {
    pub fn protocol(&self) -> TestProtocol {
        TestProtocol {
            num_samples: self.num_samples,
            crops: self.crops,
        }
    }
}

/// Axes of the ablation grid; every cell shares the data seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationSpec {
    pub activations: Vec<GateActivation>,
    pub fusion_styles: Vec<FusionStyle>,
    pub tap_layers: Vec<usize>,
    pub multitask: Vec<bool>,
    pub seeds: Vec<u64>,
}

impl Default for AblationSpec {
    fn default() -> Self {
        AblationSpec {
            activations: vec![GateActivation::Relu, GateActivation::Softmax],
            fusion_styles: vec![FusionStyle::Concat, FusionStyle::Conv],
            tap_layers: vec![1, 2, 3],
            multitask: vec![false, true],
            seeds: vec![0, 1, 2],
        }
    }
}

impl AblationSpec {
    pub fn num_cells(&self) -> usize {
        self.activations.len() * self.fusion_styles.len() * self.tap_layers.len() * self.multitask.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub test: TestConfig,
    #[serde(default)]
    pub ablation: AblationSpec,
    /// Model and training seed; the data seed lives in `dataset.seed`.
    #[serde(default)]
    pub seed: u64,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            // For missing fields the path points at the parent object.
            let msg = inner.to_string();
            let field = match missing_field(&msg) {
                Some(name) if path == "." => name.to_string(),
                Some(name) => format!("{path}.{name}"),
                None => path,
            };
            Error::config(field, msg)
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        if !(1..=NUM_BLOCKS).contains(&m.tap_layer) {
            return Err(Error::config("model.tap_layer", format!("must be in 1..={NUM_BLOCKS}")));
        }
        if m.widths.contains(&0) {
            return Err(Error::config("model.widths", "widths must be positive"));
        }
        if !(0.0..1.0).contains(&m.dropout_ratio) {
            return Err(Error::config("model.dropout_ratio", "must be in [0, 1)"));
        }
        self.dataset.validate()?;
        let t = &self.train;
        if t.num_segments == 0 {
            return Err(Error::config("train.num_segments", "must be at least 1"));
        }
        if self.dataset.frames < t.num_segments * (self.dataset.flow_len + 1) {
            return Err(Error::config(
                "dataset.frames",
                format!(
                    "{} frames cannot host {} segments of {} flows",
                    self.dataset.frames, t.num_segments, self.dataset.flow_len
                ),
            ));
        }
        for (name, v) in [
            ("train.expert_batch_size", t.expert_batch_size),
            ("train.gate_batch_size", t.gate_batch_size),
            ("train.patience", t.patience),
            ("train.max_epochs_expert", t.max_epochs_expert),
            ("train.max_epochs_gate", t.max_epochs_gate),
        ] {
            if v == 0 {
                return Err(Error::config(name, "must be positive"));
            }
        }
        for (name, v) in [
            ("train.lr_initial", t.lr_initial),
            ("train.lr_reduced", t.lr_reduced),
            ("train.expert_lr_initial", t.expert_lr_initial),
            ("train.expert_lr_reduced", t.expert_lr_reduced),
            ("train.grad_clip_l2", t.grad_clip_l2),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(name, "must be a positive number"));
            }
        }
        if !(0.0..1.0).contains(&t.momentum) {
            return Err(Error::config("train.momentum", "must be in [0, 1)"));
        }
        if t.lambda_stage2 < 0.0 || t.lambda_stage3 < 0.0 {
            return Err(Error::config("train.lambda_stage3", "must be non-negative"));
        }
        if self.test.num_samples == 0 {
            return Err(Error::config("test.num_samples", "must be positive"));
        }
        self.test
            .crops
            .crops(self.dataset.height, self.dataset.width)
            .map_err(|e| Error::config("test.crops", e.to_string()))?;
        let a = &self.ablation;
        if a.activations.is_empty() || a.fusion_styles.is_empty() || a.multitask.is_empty() {
            return Err(Error::config("ablation", "every axis needs at least one value"));
        }
        if a.tap_layers.is_empty() || a.tap_layers.iter().any(|l| !(1..=NUM_BLOCKS).contains(l)) {
            return Err(Error::config(
                "ablation.tap_layers",
                format!("values must be in 1..={NUM_BLOCKS}"),
            ));
        }
        if a.seeds.is_empty() {
            return Err(Error::config("ablation.seeds", "need at least one seed"));
        }
        Ok(())
    }

    /// Switches the test protocol to 25 samples x 10 crops.
    pub fn use_paper_scale_test(&mut self) {
        let p = TestProtocol::paper_scale(self.dataset.height.min(self.dataset.width));
        self.test = TestConfig {
            num_samples: p.num_samples,
            crops: p.crops,
        };
    }
}

fn missing_field(msg: &str) -> Option<&str> {
    let rest = msg.strip_prefix("missing field `")?;
    rest.split('`').next()
}
