mod common;

use std::sync::{Arc, OnceLock};

use common::{config, RELU_CONV_2};
use gated_moe::config::ExperimentConfig;
use gated_moe::data::{self, Splits};
use gated_moe::experts::StreamKind;
use gated_moe::gating;
use gated_moe::trainer::{
    self, resume_training, run_training, train_expert, EpochRecord, GateData, TrainLog, TrainOutcome,
};
use gated_moe::Error;

const SMALL_DATA: &str = r#""videos_per_class": 10"#;
const SMALL_TRAIN: &str = r#""max_epochs_expert": 4, "max_epochs_gate": 4, "patience": 2"#;

struct Fixture {
    cfg: ExperimentConfig,
    splits: Splits,
    outcome: TrainOutcome,
    dir: tempfile::TempDir,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let cfg = config(RELU_CONV_2, SMALL_DATA, SMALL_TRAIN);
        let splits = data::generate_dataset(&cfg.dataset).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let outcome = run_training(&cfg, &splits.train, &splits.val, Some(dir.path())).unwrap();
        Fixture {
            cfg,
            splits,
            outcome,
            dir,
        }
    })
}

fn stage_records<'a>(log: &'a TrainLog, name: &str) -> Vec<&'a EpochRecord> {
    log.epochs.iter().filter(|r| r.stage_name == name).collect()
}

fn without_wall_time(log: &TrainLog) -> TrainLog {
    let mut log = log.clone();
    for r in &mut log.epochs {
        r.wall_time_s = 0.0;
    }
    for s in &mut log.stages {
        s.best_checkpoint = None;
    }
    log
}

#[test]
fn post_clip_gradient_norm_never_exceeds_limit() {
    let f = fixture();
    for r in &f.outcome.log.epochs {
        assert!(r.max_clipped_grad_norm <= 40.0 + 1e-9, "{r:?}");
    }
    // A tiny limit makes clipping active on every step.
    let mut cfg = config(
        RELU_CONV_2,
        SMALL_DATA,
        r#""max_epochs_expert": 2, "patience": 2, "grad_clip_l2": 0.01"#,
    );
    cfg.train.max_epochs_expert = 2;
    let mut log = TrainLog::default();
    train_expert(&cfg, StreamKind::Temporal, &f.splits.train, &f.splits.val, &mut log).unwrap();
    for r in log.epochs.iter().filter(|r| r.epoch > 0) {
        assert!(r.max_grad_norm > 0.01);
        assert!(r.max_clipped_grad_norm <= 0.01 + 1e-12);
    }
}

#[test]
fn experts_stay_frozen_through_gate_stages() {
    let f = fixture();
    assert_eq!(f.outcome.expert_hash_before_gate, f.outcome.expert_hash_after_gate);
    assert!(f.outcome.experts.spatial.params.all_frozen());
    assert!(f.outcome.experts.temporal.params.all_frozen());
    let reloaded = trainer::load_experts(&f.cfg, f.dir.path()).unwrap();
    assert_eq!(reloaded.content_hash(), f.outcome.expert_hash_after_gate);
}

#[test]
fn identical_seeds_reproduce_the_log_bit_exactly() {
    let f = fixture();
    let again = run_training(&f.cfg, &f.splits.train, &f.splits.val, None).unwrap();
    assert_eq!(without_wall_time(&again.log), without_wall_time(&f.outcome.log));
    assert_eq!(again.gate_final.params, f.outcome.gate_final.params);
    assert_eq!(again.experts.content_hash(), f.outcome.experts.content_hash());

    let mut other = f.cfg.clone();
    other.seed = 1;
    let diff = run_training(&other, &f.splits.train, &f.splits.val, None).unwrap();
    assert_ne!(without_wall_time(&diff.log), without_wall_time(&f.outcome.log));
}

#[test]
fn lambda_flips_at_stage_boundary_and_head_c_gradient_follows() {
    let f = fixture();
    let gate = stage_records(&f.outcome.log, "gate");
    let multitask = stage_records(&f.outcome.log, "multitask");
    assert!(gate.iter().all(|r| r.lambda == 0.0 && r.stage == 2));
    assert!(multitask.iter().all(|r| r.lambda == 1.0 && r.stage == 3));
    let last_gate = f.outcome.log.epochs.iter().rposition(|r| r.stage == 2).unwrap();
    assert_eq!(f.outcome.log.epochs[last_gate + 1].stage, 3);
    for r in gate.iter().filter(|r| r.epoch > 0) {
        assert_eq!(r.head_c_grad_max, Some(0.0));
    }
    assert!(multitask
        .iter()
        .filter(|r| r.epoch > 0)
        .all(|r| r.head_c_grad_max.unwrap() > 0.0));
}

#[test]
fn each_stage_emits_its_best_validation_checkpoint() {
    let f = fixture();
    for s in &f.outcome.log.stages {
        let recs = stage_records(&f.outcome.log, &s.stage_name);
        let epochs: Vec<usize> = recs.iter().map(|r| r.epoch).collect();
        assert!(epochs.windows(2).all(|w| w[0] < w[1]), "{epochs:?}");
        let max = recs.iter().map(|r| r.val_accuracy).fold(0.0, f64::max);
        assert_eq!(s.best_val_accuracy, max, "{}", s.stage_name);
        assert!(s.best_val_accuracy >= recs[0].val_accuracy);
        assert!(s.best_checkpoint.as_ref().is_some_and(|p| p.exists()));
    }
    let s2 = f.outcome.log.stage("gate").unwrap();
    let s3 = f.outcome.log.stage("multitask").unwrap();
    assert!(s3.best_val_accuracy >= s2.best_val_accuracy);
}

#[test]
fn stage_two_starts_at_even_averaging() {
    let f = fixture();
    let experts = Arc::clone(&f.outcome.experts);
    let gd = GateData::build(&experts, &f.cfg, &f.splits.train, &f.splits.val, &[2]).unwrap();
    let correct = gd
        .val
        .iter()
        .filter(|v| {
            let inp = v.gate_inputs(&gd.val_starts, 2).unwrap();
            gating::gated_fuse(&inp.scores, [0.5, 0.5]).unwrap().argmax() == inp.label
        })
        .count();
    let even = correct as f64 / gd.val.len() as f64;
    let epoch0 = stage_records(&f.outcome.log, "gate")[0];
    assert_eq!(epoch0.epoch, 0);
    assert_eq!(epoch0.val_accuracy, even);
}

#[test]
fn resume_from_weight_only_checkpoint_reproduces_final_gate() {
    let f = fixture();
    let out = tempfile::tempdir().unwrap();
    let resumed = resume_training(
        &f.cfg,
        &f.splits.train,
        &f.splits.val,
        &f.dir.path().join(trainer::GATE_STAGE2_CKPT),
        Some(out.path()),
    )
    .unwrap();
    assert_eq!(resumed.gate_final.params, f.outcome.gate_final.params);
    assert!(out.path().join(trainer::GATE_FINAL_CKPT).exists());

    let from_experts = resume_training(
        &f.cfg,
        &f.splits.train,
        &f.splits.val,
        &f.dir.path().join(trainer::SPATIAL_CKPT),
        None,
    )
    .unwrap();
    assert_eq!(from_experts.gate_final.params, f.outcome.gate_final.params);
}

#[test]
fn gate_checkpoint_for_other_architecture_is_rejected() {
    let f = fixture();
    let mut other = f.cfg.clone();
    other.model.fusion_style = gating::FusionStyle::Concat;
    let err = trainer::load_gate(&other, &f.dir.path().join(trainer::GATE_FINAL_CKPT)).unwrap_err();
    assert!(matches!(err, Error::CheckpointMismatch(_)), "{err}");
    let mut other = f.cfg.clone();
    other.model.activation = gating::GateActivation::Softmax;
    let err = trainer::load_gate(&other, &f.dir.path().join(trainer::GATE_FINAL_CKPT)).unwrap_err();
    assert!(matches!(err, Error::CheckpointMismatch(_)), "{err}");
}

#[test]
fn multitask_off_skips_stage_three() {
    let f = fixture();
    let mut cfg = f.cfg.clone();
    cfg.train.multitask = false;
    let gd = GateData::build(&f.outcome.experts, &cfg, &f.splits.train, &f.splits.val, &[2]).unwrap();
    let out = trainer::train_gate(&cfg, Arc::clone(&f.outcome.experts), &gd, TrainLog::default()).unwrap();
    assert!(out.log.stage("multitask").is_none());
    assert_eq!(out.gate_final.params, out.gate_stage2.params);
    assert_eq!(out.gate_stage2.params, f.outcome.gate_stage2.params);
}

#[test]
fn exploding_learning_rate_is_reported_as_divergence() {
    let f = fixture();
    let cfg = config(
        RELU_CONV_2,
        SMALL_DATA,
        r#""max_epochs_expert": 3, "expert_lr_initial": 1e200, "expert_lr_reduced": 1e200, "momentum": 0.0"#,
    );
    let err = train_expert(
        &cfg,
        StreamKind::Spatial,
        &f.splits.train,
        &f.splits.val,
        &mut TrainLog::default(),
    )
    .expect_err("training should diverge");
    assert!(matches!(err, Error::Divergence { .. }), "{err}");
}

#[test]
fn log_round_trips_through_jsonl() {
    let f = fixture();
    let log = gated_moe::eval::read_log(&f.dir.path().join(trainer::TRAIN_LOG)).unwrap();
    assert_eq!(log, f.outcome.log);
}
