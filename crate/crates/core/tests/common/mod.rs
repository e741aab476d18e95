#![allow(dead_code)]

use gated_moe::config::ExperimentConfig;
use gated_moe::graph::{Graph, NodeId};
use gated_moe::rng::DetRng;
use gated_moe::Tensor;
use rand::{Rng, SeedableRng};

pub fn rng(seed: u64) -> DetRng {
    DetRng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut DetRng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Entries in `[-hi, -lo] ∪ [lo, hi]`, away from ReLU's kink.
pub fn off_kink(shape: &[usize], lo: f64, hi: f64, rng: &mut DetRng) -> Tensor {
    uniform(shape, lo, hi, rng)
        .zip_with(
            &uniform(shape, 0.0, 1.0, rng),
            "sign",
            |v, s| if s < 0.5 { -v } else { v },
        )
        .unwrap()
}

/// Max relative error between `backward` and central differences of
/// `sum(probe * op(inputs))` over every input coordinate.
pub fn fd_max_rel_error<F>(inputs: &[Tensor], probe_seed: u64, h: f64, op: F) -> f64
where
    F: Fn(&mut Graph<'static>, &[NodeId]) -> NodeId,
{
    let eval = |xs: &[Tensor]| -> (f64, Vec<Tensor>) {
        let mut g = Graph::detached();
        let ids: Vec<NodeId> = xs.iter().map(|x| g.variable(x.clone())).collect();
        let out = op(&mut g, &ids);
        let n = g.value(out).len();
        let probe = uniform(&[n, 1], -1.0, 1.0, &mut rng(probe_seed));
        let p = g.constant(probe);
        let zero = g.constant(Tensor::zeros(&[1]));
        let proj = g.fully_connected(out, p, zero).unwrap();
        let loss = g.sum(proj);
        let value = g.value(loss).data()[0];
        let grads = g.backward(loss).unwrap();
        let gs = ids
            .iter()
            .map(|&i| {
                grads
                    .wrt(i)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(g.value(i).shape()))
            })
            .collect();
        (value, gs)
    };
    let (_, analytic) = eval(inputs);
    let mut worst = 0.0f64;
    for (k, x) in inputs.iter().enumerate() {
        for i in 0..x.len() {
            let mut xs = inputs.to_vec();
            xs[k].data_mut()[i] = x.data()[i] + h;
            let plus = eval(&xs).0;
            xs[k].data_mut()[i] = x.data()[i] - h;
            let minus = eval(&xs).0;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[k].data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-5);
            worst = worst.max(rel);
        }
    }
    worst
}

/// Default config with the given dataset and train overrides (JSON bodies
/// without braces).
pub fn config(model: &str, dataset: &str, train: &str) -> ExperimentConfig {
    ExperimentConfig::from_json(&format!(
        r#"{{"model": {{{model}}}, "dataset": {{{dataset}}}, "train": {{{train}}}}}"#
    ))
    .unwrap()
}

pub const RELU_CONV_2: &str = r#""activation": "relu", "fusion_style": "conv", "tap_layer": 2"#;

/// A small dataset that trains in seconds.
pub const TINY_DATA: &str = r#""spatial_only": 1, "temporal_only": 1, "both": 0, "videos_per_class": 10, "frames": 12, "height": 8, "width": 8, "flow_len": 3, "train_frac": 0.6, "val_frac": 0.2, "test_frac": 0.2"#;
pub const TINY_TRAIN: &str = r#""max_epochs_expert": 3, "max_epochs_gate": 3, "patience": 2"#;

use gated_moe::experts::ExpertScores;
use gated_moe::gating::{FusionSpec, FusionStyle, GateActivation, GateArch, GateInputs, GateNet};

/// One randomized gate-gradient case.
#[derive(Debug, Clone)]
pub struct GateCase {
    pub style: FusionStyle,
    pub activation: GateActivation,
    pub lambda: f64,
    pub k: usize,
    pub channels: usize,
    pub side: usize,
    pub classes: usize,
    pub seed: u64,
}

/// `n` cases cycling through both styles, both activations and both lambdas.
pub fn gate_cases(n: usize) -> Vec<GateCase> {
    let mut r = rng(777);
    (0..n)
        .map(|i| GateCase {
            style: if i % 2 == 0 {
                FusionStyle::Concat
            } else {
                FusionStyle::Conv
            },
            activation: if (i / 2) % 2 == 0 {
                GateActivation::Relu
            } else {
                GateActivation::Softmax
            },
            lambda: if (i / 4) % 2 == 0 { 0.0 } else { 1.0 },
            k: r.random_range(1..=3),
            channels: r.random_range(1..=3),
            side: r.random_range(2..=4),
            classes: r.random_range(2..=5),
            seed: 1000 + i as u64,
        })
        .collect()
}

/// A gate with every parameter randomized (so no gradient path is trivially
/// zero), plus matching inputs.
pub fn random_gate(case: &GateCase) -> (GateNet, GateInputs) {
    let mut r = rng(case.seed);
    let arch = GateArch {
        tap_channels: case.channels,
        fusion: FusionSpec {
            style: case.style,
            tap_layer: 2,
        },
        num_classes: case.classes,
        dropout_ratio: 0.5,
    };
    let mut gate = GateNet::new(arch, case.activation, &mut r).unwrap();
    let (_, head_g_bias) = gate.head_g_ids();
    for id in gate.params.ids().collect::<Vec<_>>() {
        let shape = gate.params.get(id).value().shape().to_vec();
        let mut v = uniform(&shape, -0.8, 0.8, &mut r);
        if id == head_g_bias {
            v = uniform(&shape, 0.3, 1.0, &mut r);
        }
        *gate.params.get_mut(id).value_mut() = v;
    }
    let inputs = random_inputs(&gate, case.k, case.side, &mut r);
    (gate, inputs)
}

pub fn random_inputs(gate: &GateNet, k: usize, side: usize, r: &mut DetRng) -> GateInputs {
    let d = gate.arch.tap_channels;
    let c = gate.arch.num_classes;
    GateInputs {
        snippets: (0..k)
            .map(|_| {
                (
                    uniform(&[side, side, d], 0.0, 2.0, r),
                    uniform(&[side, side, d], 0.0, 2.0, r),
                )
            })
            .collect(),
        scores: ExpertScores {
            g_rgb: uniform(&[c], -3.0, 3.0, r),
            g_flow: uniform(&[c], -3.0, 3.0, r),
        },
        label: r.random_range(0..c),
    }
}

/// Interleave written with 1-based channels: out[2d] = a[d], out[2d-1] = b[d].
pub fn concat_oracle(a: &Tensor, b: &Tensor) -> Tensor {
    let (h, w, d) = a.hwc().unwrap();
    let mut out = Tensor::zeros(&[h, w, 2 * d]);
    for y in 0..h {
        for x in 0..w {
            for one_based in 1..=d {
                let base = (y * w + x) * 2 * d;
                out.data_mut()[base + 2 * one_based - 1] = a.at3(y, x, one_based - 1);
                out.data_mut()[base + 2 * one_based - 2] = b.at3(y, x, one_based - 1);
            }
        }
    }
    out
}

/// SCI computed in two explicit steps: probabilities, then the index.
pub fn sci_two_step(scores: &[f64]) -> (Vec<f64>, f64) {
    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
    let z: f64 = e.iter().sum();
    let p: Vec<f64> = e.iter().map(|v| v / z).collect();
    let c = p.len() as f64;
    let max = p.iter().cloned().fold(0.0, f64::max);
    (p, (c * max - 1.0) / (c - 1.0))
}
