mod common;

use std::path::Path;
use std::sync::OnceLock;

use common::{config, RELU_CONV_2};
use gated_moe::config::ExperimentConfig;
use gated_moe::data::{self, CueType, Splits};
use gated_moe::eval::{self, EvalData, ExperimentReport, GateMode};
use gated_moe::gating::{GateActivation, GateNet};
use gated_moe::rng::{self, Stream};
use gated_moe::trainer::{Experts, TrainOutcome};
use gated_moe::Error;

const SMALL_DATA: &str = r#""videos_per_class": 10"#;
const SMALL_TRAIN: &str = r#""max_epochs_expert": 6, "max_epochs_gate": 4, "patience": 2"#;

struct Fixture {
    cfg: ExperimentConfig,
    splits: Splits,
    outcome: TrainOutcome,
    report: ExperimentReport,
    eval: EvalData,
    dir: tempfile::TempDir,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let cfg = config(RELU_CONV_2, SMALL_DATA, SMALL_TRAIN);
        let dir = tempfile::tempdir().unwrap();
        let (outcome, report) = eval::run_experiment(&cfg, Some(dir.path())).unwrap();
        let splits = data::generate_dataset(&cfg.dataset).unwrap();
        let eval = EvalData::build(&outcome.experts, &cfg, &splits, &[2]).unwrap();
        Fixture {
            cfg,
            splits,
            outcome,
            report,
            eval,
            dir,
        }
    })
}

fn strip_time(mut r: ExperimentReport) -> ExperimentReport {
    r.wall_time_s = 0.0;
    r
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Per video: predicted classes of (spatial, temporal, gated) from a fresh
/// forward pass over every test crop.
fn rerun_predictions(
    cfg: &ExperimentConfig,
    experts: &Experts,
    gate: &GateNet,
    videos: &[data::SynthVideo],
) -> Vec<[usize; 3]> {
    let tap = cfg.model.tap_layer;
    let protocol = cfg.test.protocol();
    videos
        .iter()
        .map(|v| {
            let samples = data::test_protocol(v, cfg.dataset.flow_len, &protocol).unwrap();
            let mut sums = [Vec::new(), Vec::new(), Vec::new()];
            for s in &samples {
                let (ts, gs) = experts.spatial.forward_at(&s.snippet.spatial, tap).unwrap();
                let (tt, gt) = experts.temporal.forward_at(&s.snippet.temporal, tap).unwrap();
                let mut r = rng::stream(0, Stream::Misc);
                let w = gate.forward(&[(ts, tt)], false, &mut r).unwrap().w;
                let fused: Vec<f64> = gs
                    .data()
                    .iter()
                    .zip(gt.data())
                    .map(|(a, b)| w[0] * a + w[1] * b)
                    .collect();
                for (k, x) in [gs.data().to_vec(), gt.data().to_vec(), fused].into_iter().enumerate() {
                    if sums[k].is_empty() {
                        sums[k] = vec![0.0; x.len()];
                    }
                    sums[k].iter_mut().zip(x).for_each(|(acc, x)| *acc += x);
                }
            }
            [argmax(&sums[0]), argmax(&sums[1]), argmax(&sums[2])]
        })
        .collect()
}

#[test]
fn fresh_forward_passes_reproduce_single_stream_and_gated_accuracy() {
    let f = fixture();
    let preds = rerun_predictions(&f.cfg, &f.outcome.experts, &f.outcome.gate_final, &f.splits.test);
    let n = f.splits.test.len() as f64;
    let acc = |k: usize| {
        preds
            .iter()
            .zip(&f.splits.test)
            .filter(|(p, v)| p[k] == v.label)
            .count() as f64
            / n
    };
    assert_eq!(acc(0), f.report.accuracy.spatial);
    assert_eq!(acc(1), f.report.accuracy.temporal);
    assert_eq!(acc(2), f.report.accuracy.gated);
    for ((p, v), s) in preds.iter().zip(&f.splits.test).zip(&f.report.weight_samples) {
        assert_eq!(s.id, v.id);
        assert_eq!(s.correct, p[2] == v.label);
    }
}

#[test]
fn forced_half_weights_equal_even_averaging_per_video() {
    let f = fixture();
    let forced = eval::gated_eval(&f.outcome.gate_final, &f.eval.test, GateMode::Forced([0.5, 0.5])).unwrap();
    assert_eq!(forced.accuracy, f.report.accuracy.even);
    assert_eq!(forced.dead_crops, 0);
    for (s, v) in forced.samples.iter().zip(&f.eval.test) {
        let m = v.mean_scores().unwrap();
        let even: Vec<f64> = m
            .g_rgb
            .data()
            .iter()
            .zip(m.g_flow.data())
            .map(|(a, b)| (a + b) / 2.0)
            .collect();
        assert_eq!(s.correct, argmax(&even) == v.label, "{}", s.id);
        assert_eq!((s.w_spatial, s.w_temporal), (0.5, 0.5));
    }
}

#[test]
fn every_method_scores_the_same_crops() {
    let f = fixture();
    assert_eq!(eval::scores_hash(&f.eval.test), f.report.expert_scores_hash);
    let crops = f.report.crops_per_video;
    assert_eq!(
        crops,
        f.cfg.test.protocol().num_samples * f.cfg.test.protocol().crops.crops(16, 16).unwrap().len()
    );
    assert_eq!(f.report.crop_evaluations_per_stream, crops * f.splits.test.len());
    assert!(f.eval.test.iter().all(|v| v.crops.len() == crops));
}

#[test]
fn per_cue_gated_accuracy_recombines_to_the_total() {
    let f = fixture();
    let mut correct = 0.0;
    for cue in [CueType::SpatialOnly, CueType::TemporalOnly, CueType::Both] {
        let n = f.splits.test.iter().filter(|v| v.cue_type == cue).count() as f64;
        correct += f.report.per_cue_accuracy[&format!("{cue:?}")][0] * n;
    }
    let total = correct / f.splits.test.len() as f64;
    assert!((total - f.report.accuracy.gated).abs() < 1e-12);
}

#[test]
fn stored_run_directory_evaluates_to_the_same_report() {
    let f = fixture();
    let again = eval::eval_run_dir(&f.cfg, f.dir.path()).unwrap();
    assert_eq!(strip_time(again), strip_time(f.report.clone()));
    let read = ExperimentReport::read(&f.dir.path().join("report.json")).unwrap();
    assert_eq!(read, f.report);
}

fn assert_matches_schema(report: &ExperimentReport) {
    let schema_path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../schemas/report.schema.json");
    let schema: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(schema_path).unwrap()).unwrap();
    let validator = jsonschema::validator_for(&schema).unwrap();
    let value = serde_json::to_value(report).unwrap();
    let errors: Vec<String> = validator.iter_errors(&value).map(|e| e.to_string()).collect();
    assert!(errors.is_empty(), "{errors:?}");
}

#[test]
fn report_validates_against_published_schema() {
    let f = fixture();
    assert_matches_schema(&f.report);
    let mut broken = serde_json::to_value(&f.report).unwrap();
    broken["accuracy"]["gated"] = serde_json::json!(1.5);
    let schema_path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../schemas/report.schema.json");
    let schema: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(schema_path).unwrap()).unwrap();
    assert!(!jsonschema::validator_for(&schema).unwrap().is_valid(&broken));
}

#[test]
fn weight_export_has_one_row_per_test_video() {
    let f = fixture();
    let out = tempfile::tempdir().unwrap();
    let (scatter, hist) = eval::export_weights(out.path(), &f.report.weight_samples, "", 20).unwrap();
    let mut rd = csv::Reader::from_path(&scatter).unwrap();
    let headers: Vec<String> = rd.headers().unwrap().iter().map(str::to_string).collect();
    assert_eq!(
        headers,
        ["id", "w_temporal", "w_spatial", "correct", "cue_type", "dead"]
    );
    assert_eq!(rd.records().count(), f.splits.test.len());
    let counts: usize = csv::Reader::from_path(&hist)
        .unwrap()
        .records()
        .map(|r| r.unwrap()[2].parse::<usize>().unwrap())
        .sum();
    assert_eq!(counts, f.splits.test.len());
    let bins = eval::share_histogram(&f.report.weight_samples, 7);
    assert_eq!(bins.len(), 7);
    assert_eq!(bins.iter().map(|b| b.2).sum::<usize>(), f.report.weight_samples.len());
}

#[test]
fn paper_scale_protocol_runs_250_crops_per_video() {
    let f = fixture();
    let mut cfg = f.cfg.clone();
    cfg.use_paper_scale_test();
    cfg.validate().unwrap();
    let eval = EvalData::build(&f.outcome.experts, &cfg, &f.splits, &[2]).unwrap();
    let evaluations: usize = eval.test.iter().map(|v| v.crops.len()).sum();
    assert_eq!(evaluations, 250 * f.splits.test.len());
}

#[test]
fn pca_handles_duplicates_and_rejects_tiny_inputs() {
    let rows = vec![
        vec![1.0, 2.0, 3.0],
        vec![1.0, 2.0, 3.0],
        vec![-1.0, 0.5, 2.0],
        vec![4.0, -2.0, 0.0],
        vec![0.0, 0.0, 1.0],
    ];
    let p = eval::pca_2d(&rows).unwrap();
    assert_eq!(p.coords[0], p.coords[1]);
    let [a, b] = p.explained_variance_ratio;
    assert!(a >= b && b >= 0.0 && a + b <= 1.0 + 1e-12);
    assert!(matches!(eval::pca_2d(&rows[..1]), Err(Error::InvalidArgument(_))));
    assert!(eval::pca_2d(&[]).is_err());
}

#[test]
fn feature_projection_writes_one_row_per_test_video() {
    let f = fixture();
    let out = tempfile::tempdir().unwrap();
    let path = eval::project_features(&f.cfg, f.dir.path(), out.path()).unwrap();
    let rows = csv::Reader::from_path(path).unwrap().records().count();
    assert_eq!(rows, f.splits.test.len());
}

#[test]
fn ablation_grid_reuses_the_single_run_pipeline() {
    let f = fixture();
    let mut base = f.cfg.clone();
    base.ablation.activations = vec![GateActivation::Relu, GateActivation::Softmax];
    base.ablation.fusion_styles = vec![f.cfg.model.fusion_style];
    base.ablation.tap_layers = vec![2];
    base.ablation.multitask = vec![true, false];
    base.ablation.seeds = vec![f.cfg.seed];
    let result = eval::run_ablation(&base, None, 1).unwrap();
    assert_eq!(result.runs.len(), 4);
    assert_eq!(result.failures(), 0);

    let cell = |act: GateActivation, mt: bool| {
        result
            .runs
            .iter()
            .find(|r| r.cell.activation == act && r.cell.multitask == mt)
            .and_then(|r| r.report.clone())
            .unwrap()
    };
    let mut single = cell(GateActivation::Relu, true);
    assert_eq!(single.config.ablation, base.ablation);
    single.config.ablation = f.cfg.ablation.clone();
    assert_eq!(strip_time(single), strip_time(f.report.clone()));

    let (with, without) = (cell(GateActivation::Relu, true), cell(GateActivation::Relu, false));
    let mut a = with.config.clone();
    a.train.multitask = false;
    assert_eq!(a, without.config);
    assert_eq!(with.expert_hash, without.expert_hash);
    assert_eq!(with.accuracy.gated_stage2, without.accuracy.gated_stage2);
    assert_eq!(without.accuracy.gated, without.accuracy.gated_stage2);

    let softmax = cell(GateActivation::Softmax, true);
    assert_matches_schema(&softmax);
    for s in softmax.weight_samples.iter().chain(&softmax.stage2_weight_samples) {
        assert!((s.w_spatial + s.w_temporal - 1.0).abs() < 1e-12, "{s:?}");
    }

    let dir = tempfile::tempdir().unwrap();
    let (long, table) = eval::write_ablation_csv(dir.path(), &result).unwrap();
    assert_eq!(csv::Reader::from_path(long).unwrap().records().count(), 4);
    assert!(table.exists());
}

#[test]
fn mean_sd_matches_direct_formula() {
    let xs = [0.8, 0.9, 0.7, 0.85];
    let (m, sd) = eval::mean_sd(&xs);
    let mean = xs.iter().sum::<f64>() / 4.0;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / 4.0;
    assert!((m - mean).abs() < 1e-15 && (sd - var.sqrt()).abs() < 1e-15);
}
