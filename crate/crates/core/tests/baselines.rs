mod common;

use common::{rng, sci_two_step, uniform};
use gated_moe::baselines::{
    self, default_grid, fixed_accuracy, grid_search_weight, sci, sci_fuse, FixedWeight, DEFAULT_GRID,
};
use gated_moe::experts::ExpertScores;
use gated_moe::Tensor;
use proptest::prelude::*;
use rand::Rng;

fn random_samples(n: usize, c: usize, seed: u64) -> Vec<(ExpertScores, usize)> {
    let mut r = rng(seed);
    (0..n)
        .map(|_| {
            let s = ExpertScores {
                g_rgb: uniform(&[c], -2.0, 2.0, &mut r),
                g_flow: uniform(&[c], -2.0, 2.0, &mut r),
            };
            (s, r.random_range(0..c))
        })
        .collect()
}

/// Scores every ratio by brute force, counting correct argmaxes by hand.
fn exhaustive_best(samples: &[(ExpertScores, usize)]) -> (f64, Vec<f64>) {
    let accs: Vec<(f64, f64)> = DEFAULT_GRID
        .iter()
        .map(|&ratio| {
            let correct = samples
                .iter()
                .filter(|(s, label)| {
                    let fused: Vec<f64> = s
                        .g_rgb
                        .data()
                        .iter()
                        .zip(s.g_flow.data())
                        .map(|(a, b)| a + ratio * b)
                        .collect();
                    let mut best = 0;
                    for i in 1..fused.len() {
                        if fused[i] > fused[best] {
                            best = i;
                        }
                    }
                    best == *label
                })
                .count();
            (ratio, correct as f64 / samples.len() as f64)
        })
        .collect();
    let top = accs.iter().map(|a| a.1).fold(0.0, f64::max);
    (top, accs.iter().filter(|a| a.1 == top).map(|a| a.0).collect())
}

#[test]
fn grid_search_matches_exhaustive_oracle() {
    for seed in 0..30 {
        let samples = random_samples(40, 4, seed);
        let w = grid_search_weight(&samples, &default_grid()).unwrap();
        let (top, winners) = exhaustive_best(&samples);
        assert_eq!(fixed_accuracy(&samples, w).unwrap(), top);
        assert!(winners.contains(&w.temporal_ratio()));
        // Tie-break: closest to 1:1.
        let closest = winners.iter().map(|r| (r - 1.0).abs()).fold(f64::INFINITY, f64::min);
        assert_eq!((w.temporal_ratio() - 1.0).abs(), closest);
    }
}

#[test]
fn grid_search_rejects_empty_inputs() {
    assert!(grid_search_weight(&[], &default_grid()).is_err());
    assert!(grid_search_weight(&random_samples(3, 3, 0), &[]).is_err());
    assert!(FixedWeight::new(0.0, 0.0).is_err());
    assert!(FixedWeight::new(-1.0, 1.0).is_err());
}

#[test]
fn temporal_only_signal_picks_largest_ratio() {
    // Spatial scores are pure noise favouring a wrong class; only a large
    // temporal weight recovers the label.
    let samples: Vec<_> = (0..10)
        .map(|i| {
            let label = i % 3;
            let mut rgb = vec![0.0; 3];
            rgb[(label + 1) % 3] = 1.9;
            let mut flow = vec![0.0; 3];
            flow[label] = 1.0;
            (
                ExpertScores {
                    g_rgb: Tensor::vector(rgb),
                    g_flow: Tensor::vector(flow),
                },
                label,
            )
        })
        .collect();
    let w = grid_search_weight(&samples, &default_grid()).unwrap();
    assert_eq!(w.temporal_ratio(), 2.0);
}

#[test]
fn sci_fuse_matches_two_step_oracle() {
    let mut r = rng(40);
    for _ in 0..200 {
        let c = r.random_range(2..10);
        let s = ExpertScores {
            g_rgb: uniform(&[c], -4.0, 4.0, &mut r),
            g_flow: uniform(&[c], -4.0, 4.0, &mut r),
        };
        let (p1, s1) = sci_two_step(s.g_rgb.data());
        let (p2, s2) = sci_two_step(s.g_flow.data());
        let (a, b) = (s1 / (s1 + s2), s2 / (s1 + s2));
        let fused = sci_fuse(&s).unwrap();
        for i in 0..c {
            assert!((fused.data()[i] - (a * p1[i] + b * p2[i])).abs() <= 1e-12);
        }
        let report = baselines::sci_fuse_report(&s).unwrap();
        assert!((report.sci_spatial - s1).abs() <= 1e-12);
        assert!((report.sci_temporal - s2).abs() <= 1e-12);
    }
}

#[test]
fn sci_extremes() {
    assert_eq!(sci(&[1.0, 0.0, 0.0]).unwrap(), 1.0);
    assert_eq!(sci(&[0.25; 4]).unwrap(), 0.0);
    assert!(sci(&[0.0, 0.0]).is_err());
    assert!(sci(&[]).is_err());
    // Both streams uniform: even averaging of the probabilities.
    let s = ExpertScores {
        g_rgb: Tensor::vector(vec![0.0; 4]),
        g_flow: Tensor::vector(vec![1.0; 4]),
    };
    assert_eq!(sci_fuse(&s).unwrap().data(), &[0.25; 4]);
}

proptest! {
    #[test]
    fn sci_fuse_is_a_probability_vector(
        rgb in prop::collection::vec(-20.0f64..20.0, 2..12),
        seed in 0u64..1000,
    ) {
        let mut r = rng(seed);
        let flow = uniform(&[rgb.len()], -20.0, 20.0, &mut r);
        let s = ExpertScores { g_rgb: Tensor::vector(rgb), g_flow: flow };
        let p = sci_fuse(&s).unwrap();
        prop_assert!(p.data().iter().all(|&v| v >= 0.0));
        prop_assert!((p.sum() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn sci_in_unit_interval(p in prop::collection::vec(0.0f64..5.0, 1..12)) {
        prop_assume!(p.iter().sum::<f64>() > 0.0);
        let v = sci(&p).unwrap();
        prop_assert!((0.0..=1.0).contains(&v));
    }

    #[test]
    fn fixed_accuracy_is_scale_invariant(seed in 0u64..500, scale in 0.1f64..10.0) {
        let samples = random_samples(20, 4, seed);
        let a = fixed_accuracy(&samples, FixedWeight::new(1.0, 1.5).unwrap()).unwrap();
        let b = fixed_accuracy(&samples, FixedWeight::new(scale, 1.5 * scale).unwrap()).unwrap();
        prop_assert_eq!(a, b);
    }
}
