mod common;

use common::rng;
use gated_moe::data::{
    self, apply_crop, equally_spaced_starts, generate_dataset, sample_snippets, segment_starts, test_protocol, Crop,
    CropSet, CueType, DatasetSpec, SynthVideo, TestProtocol,
};
use gated_moe::Tensor;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

fn spec(spatial: usize, temporal: usize, both: usize) -> DatasetSpec {
    DatasetSpec {
        spatial_only: spatial,
        temporal_only: temporal,
        both,
        ..DatasetSpec::default()
    }
}

/// Translation- and mirror-invariant frame descriptor: the six distinct
/// entries of the pixel-averaged colour second-moment matrix, unit length.
fn colour_moments(frame: &Tensor) -> Vec<f64> {
    let mut m = [0.0; 6];
    let n = (frame.len() / 3) as f64;
    for px in frame.data().chunks_exact(3) {
        let mut i = 0;
        for a in 0..3 {
            for b in a..3 {
                m[i] += px[a] * px[b] / n;
                i += 1;
            }
        }
    }
    let norm = m.iter().map(|v| v * v).sum::<f64>().sqrt();
    m.iter().map(|v| v / norm).collect()
}

/// Perceptron with bias on `(features, ±1)` pairs.
fn train_perceptron(samples: &[(Vec<f64>, f64)], epochs: usize) -> Vec<f64> {
    let d = samples[0].0.len();
    let mut w = vec![0.0; d + 1];
    for _ in 0..epochs {
        let mut mistakes = 0;
        for (x, y) in samples {
            let s: f64 = w[d] + x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
            if s * y <= 0.0 {
                mistakes += 1;
                for (wi, xi) in w.iter_mut().zip(x) {
                    *wi += y * xi;
                }
                w[d] += y;
            }
        }
        if mistakes == 0 {
            break;
        }
    }
    w
}

fn predict(w: &[f64], x: &[f64]) -> f64 {
    let d = x.len();
    w[d] + x.iter().zip(w).map(|(a, b)| a * b).sum::<f64>()
}

fn frame_samples(videos: &[SynthVideo], per_video: usize, seed: u64) -> Vec<(Tensor, usize)> {
    let mut r = rng(seed);
    videos
        .iter()
        .flat_map(|v| {
            let mut idx: Vec<usize> = (0..v.frames.len()).collect();
            idx.shuffle(&mut r);
            idx.truncate(per_video);
            idx.into_iter()
                .map(|i| (v.frames[i].clone(), v.label))
                .collect::<Vec<_>>()
        })
        .collect()
}

#[test]
fn noiseless_spatial_classes_are_linearly_separable_from_one_frame() {
    let s = DatasetSpec {
        noise: 0.0,
        flow_noise: 0.0,
        shake_prob: 0.0,
        ..spec(2, 0, 0)
    };
    let splits = generate_dataset(&s).unwrap();
    let to_probe = |v: &[(Tensor, usize)]| -> Vec<(Vec<f64>, f64)> {
        v.iter()
            .map(|(f, l)| (colour_moments(f), if *l == 0 { 1.0 } else { -1.0 }))
            .collect()
    };
    let train = to_probe(&frame_samples(&splits.train, 24, 1));
    let test = to_probe(&frame_samples(&splits.test, 24, 2));
    let w = train_perceptron(&train, 1000);
    let correct = test.iter().filter(|(x, y)| predict(&w, x) * y > 0.0).count();
    assert_eq!(correct, test.len());
}

#[test]
fn time_shuffled_temporal_classes_are_at_chance_for_frame_classifiers() {
    let s = DatasetSpec {
        videos_per_class: 100,
        train_frac: 0.5,
        val_frac: 0.0,
        test_frac: 0.5,
        shake_prob: 0.0,
        ..spec(0, 2, 0)
    };
    let mut splits = generate_dataset(&s).unwrap();
    let mut r = rng(3);
    for v in splits.train.iter_mut().chain(splits.test.iter_mut()) {
        v.frames.shuffle(&mut r);
    }
    let train = frame_samples(&splits.train, 4, 4);
    let test = frame_samples(&splits.test, 1, 5);

    // Probe on invariant colour moments.
    let probe_train: Vec<_> = train
        .iter()
        .map(|(f, l)| (colour_moments(f), if *l == 0 { 1.0 } else { -1.0 }))
        .collect();
    let w = train_perceptron(&probe_train, 50);
    let probe_acc = test
        .iter()
        .filter(|(f, l)| (predict(&w, &colour_moments(f)) > 0.0) == (*l == 0))
        .count() as f64
        / test.len() as f64;

    // Nearest neighbour on raw pixels.
    let nn_acc = test
        .iter()
        .filter(|(f, l)| {
            let nearest = train
                .iter()
                .map(|(g, gl)| {
                    let d: f64 = f.data().iter().zip(g.data()).map(|(a, b)| (a - b) * (a - b)).sum();
                    (d, *gl)
                })
                .min_by(|a, b| a.0.total_cmp(&b.0))
                .unwrap();
            nearest.1 == *l
        })
        .count() as f64
        / test.len() as f64;

    // 100 test videos, one frame each: 3 sigma of a fair coin is 0.15.
    assert!((probe_acc - 0.5).abs() <= 0.15, "probe accuracy {probe_acc}");
    assert!((nn_acc - 0.5).abs() <= 0.15, "nearest-neighbour accuracy {nn_acc}");
}

#[test]
fn temporal_only_classes_share_frame_statistics() {
    let s = DatasetSpec {
        shake_prob: 0.0,
        ..spec(1, 3, 0)
    };
    let splits = generate_dataset(&s).unwrap();
    // Every TemporalOnly video is built from the same texture, so all share
    // the colour moments of that texture up to noise.
    let mut means = Vec::new();
    for class in 1..4 {
        let vids: Vec<_> = splits.train.iter().filter(|v| v.label == class).collect();
        assert!(vids.iter().all(|v| v.cue_type == CueType::TemporalOnly));
        let m: Vec<f64> = (0..6)
            .map(|i| vids.iter().map(|v| colour_moments(&v.frames[0])[i]).sum::<f64>() / vids.len() as f64)
            .collect();
        means.push(m);
    }
    for m in &means[1..] {
        let d: f64 = m.iter().zip(&means[0]).map(|(a, b)| (a - b).abs()).sum();
        assert!(d < 0.1, "class moment gap {d}");
    }
}

#[test]
fn segment_starts_are_uniform_within_segments() {
    let (num_starts, k, draws) = (19, 3, 10_000);
    let width = num_starts / k;
    let mut counts = vec![vec![0usize; width]; k];
    let mut r = rng(6);
    for _ in 0..draws {
        for (seg, s) in segment_starts(num_starts, k, &mut r).unwrap().into_iter().enumerate() {
            assert!(s >= seg * width && s < (seg + 1) * width);
            counts[seg][s - seg * width] += 1;
        }
    }
    // Chi-square, 5 degrees of freedom, 1% critical value.
    let critical = 15.086;
    let expected = draws as f64 / width as f64;
    for c in counts {
        let chi2: f64 = c.iter().map(|&o| (o as f64 - expected).powi(2) / expected).sum();
        assert!(chi2 < critical, "chi-square {chi2}");
    }
}

#[test]
fn snippets_align_frame_and_flow_starts() {
    let splits = generate_dataset(&DatasetSpec {
        videos_per_class: 5,
        ..DatasetSpec::default()
    })
    .unwrap();
    let v = &splits.train[0];
    let mut r = rng(7);
    for _ in 0..50 {
        let batch = sample_snippets(v, 3, 5, &mut r).unwrap();
        assert_eq!(batch.segments.len(), 3);
        assert_eq!(batch.label, v.label);
        for s in &batch.segments {
            assert_eq!(s.spatial, v.frames[s.start]);
            assert_eq!(s.temporal.shape(), &[16, 16, 10]);
            for j in 0..5 {
                assert_eq!(s.temporal.at3(3, 4, 2 * j), v.flows[s.start + j].at3(3, 4, 0));
                assert_eq!(s.temporal.at3(3, 4, 2 * j + 1), v.flows[s.start + j].at3(3, 4, 1));
            }
        }
    }
}

#[test]
fn short_video_is_rejected() {
    let splits = generate_dataset(&DatasetSpec {
        videos_per_class: 5,
        ..DatasetSpec::default()
    })
    .unwrap();
    let mut v = splits.train[0].clone();
    v.frames.truncate(10);
    v.flows.truncate(9);
    assert!(sample_snippets(&v, 3, 5, &mut rng(0)).is_err());
}

#[test]
fn test_protocol_counts_and_spacing() {
    let splits = generate_dataset(&DatasetSpec {
        videos_per_class: 5,
        ..DatasetSpec::default()
    })
    .unwrap();
    let v = &splits.test[0];
    let desk = test_protocol(v, 5, &TestProtocol::desk()).unwrap();
    assert_eq!(desk.len(), 10);
    let paper = test_protocol(v, 5, &TestProtocol::paper_scale(16)).unwrap();
    assert_eq!(paper.len(), 250);
    assert_eq!(paper[0].snippet.spatial.shape(), &[14, 14, 3]);
    let single = test_protocol(
        v,
        5,
        &TestProtocol {
            num_samples: 1,
            crops: CropSet::Full,
        },
    )
    .unwrap();
    assert_eq!(single.len(), 1);
    assert_eq!(
        single[0].snippet,
        v.snippet(equally_spaced_starts(v.num_starts(5), 1)[0], 5).unwrap()
    );
    assert_eq!(equally_spaced_starts(19, 5), vec![1, 5, 9, 13, 17]);
}

#[test]
fn flip_crop_of_mirror_symmetric_input_is_identity() {
    let (h, w) = (4, 6);
    let mut frame = Tensor::zeros(&[h, w, 3]);
    let mut flow = Tensor::zeros(&[h, w, 2]);
    let mut r = rng(8);
    for y in 0..h {
        for x in 0..w / 2 {
            for c in 0..3 {
                let v: f64 = r.random();
                frame.data_mut()[(y * w + x) * 3 + c] = v;
                frame.data_mut()[(y * w + w - 1 - x) * 3 + c] = v;
            }
            let (u, v): (f64, f64) = (r.random(), r.random());
            flow.data_mut()[(y * w + x) * 2] = u;
            flow.data_mut()[(y * w + w - 1 - x) * 2] = -u;
            flow.data_mut()[(y * w + x) * 2 + 1] = v;
            flow.data_mut()[(y * w + w - 1 - x) * 2 + 1] = v;
        }
    }
    let flip = Crop {
        y0: 0,
        x0: 0,
        h,
        w,
        flip: true,
    };
    assert_eq!(apply_crop(&frame, &flip, false).unwrap(), frame);
    assert_eq!(apply_crop(&flow, &flip, true).unwrap(), flow);
    // Without negation the mirrored flow is not the same field.
    assert_ne!(apply_crop(&flow, &flip, false).unwrap(), flow);
}

fn warp_residual_rms(v: &SynthVideo) -> f64 {
    let (h, w, c) = v.frames[0].hwc().unwrap();
    let mut sq = 0.0;
    let mut n = 0usize;
    for t in 0..v.flows.len() {
        let (a, b) = (&v.frames[t], &v.frames[t + 1]);
        for y in 0..h {
            for x in 0..w {
                let dx = v.flows[t].at3(y, x, 0).round() as i64;
                let dy = v.flows[t].at3(y, x, 1).round() as i64;
                let sy = (y as i64 - dy).rem_euclid(h as i64) as usize;
                let sx = (x as i64 - dx).rem_euclid(w as i64) as usize;
                for ch in 0..c {
                    sq += (b.at3(y, x, ch) - a.at3(sy, sx, ch)).powi(2);
                    n += 1;
                }
            }
        }
    }
    (sq / n as f64).sqrt()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn flows_warp_each_frame_onto_the_next(seed in 0u64..1000, noise in prop::sample::select(vec![0.0, 0.1, 0.4])) {
        let s = DatasetSpec {
            videos_per_class: 4,
            noise,
            flow_noise: 0.0,
            shake_prob: 0.5,
            seed,
            ..DatasetSpec::default()
        };
        let splits = generate_dataset(&s).unwrap();
        for v in splits.train.iter().chain(&splits.test) {
            let rms = warp_residual_rms(v);
            // Two independent noise draws: residual std is noise * sqrt(2).
            prop_assert!(rms <= 1.25 * noise * 2f64.sqrt() + 1e-12, "{} rms {}", v.id, rms);
        }
    }

    #[test]
    fn splits_partition_every_class(seed in 0u64..1000, n in 5usize..20) {
        let s = DatasetSpec { videos_per_class: n, seed, ..spec(1, 1, 1) };
        let splits = generate_dataset(&s).unwrap();
        let mut ids: Vec<&str> = splits.train.iter().chain(&splits.val).chain(&splits.test).map(|v| v.id.as_str()).collect();
        prop_assert_eq!(ids.len(), 3 * n);
        ids.sort_unstable();
        ids.dedup();
        prop_assert_eq!(ids.len(), 3 * n);
        for vs in [&splits.train, &splits.val, &splits.test] {
            let per = |class: usize| vs.iter().filter(|v| v.label == class).count();
            prop_assert!((1..3).all(|c| per(c) == per(0)));
        }
    }

    #[test]
    fn segment_starts_stay_in_range(num_starts in 1usize..60, k in 1usize..6, seed in 0u64..1000) {
        prop_assume!(num_starts >= k);
        let starts = segment_starts(num_starts, k, &mut rng(seed)).unwrap();
        prop_assert_eq!(starts.len(), k);
        prop_assert!(starts.windows(2).all(|p| p[0] < p[1]));
        prop_assert!(starts.iter().all(|&s| s < num_starts));
    }
}

#[test]
fn infeasible_specs_are_config_errors() {
    let too_short = DatasetSpec {
        frames: 2,
        ..DatasetSpec::default()
    };
    assert!(matches!(
        generate_dataset(&too_short),
        Err(gated_moe::Error::Config { .. })
    ));
    let bad_fracs = DatasetSpec {
        train_frac: 0.9,
        ..DatasetSpec::default()
    };
    assert!(matches!(
        generate_dataset(&bad_fracs),
        Err(gated_moe::Error::Config { .. })
    ));
    let one_class = spec(1, 0, 0);
    assert!(generate_dataset(&one_class).is_err());
    assert!(data::generate_dataset(&spec(1, 1, 0)).is_ok());
}
