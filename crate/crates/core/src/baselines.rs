//! Reference fusion methods: fixed weighted averaging (with validation grid
//! search) and SCI-weighted probability fusion.
//!
//! The Sparsity Concentration Index used here is
//! `(C * max_i p_i / sum_i p_i - 1) / (C - 1)`, taken from the
//! sparse-representation literature: 1 for a one-hot vector, 0 for a uniform
//! one. It is an adopted definition, not something derived in this crate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experts::ExpertScores;
use crate::tensor::{self, Tensor};

/// Fixed stream weights applied to pre-softmax scores.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FixedWeight {
    pub w_spatial: f64,
    pub w_temporal: f64,
}

impl FixedWeight {
    pub fn new(w_spatial: f64, w_temporal: f64) -> Result<Self> {
        if w_spatial < 0.0 || w_temporal < 0.0 || (w_spatial == 0.0 && w_temporal == 0.0) {
            return Err(Error::InvalidArgument(format!(
                "fixed weights must be non-negative and not both zero, got ({w_spatial}, {w_temporal})"
            )));
        }
        Ok(FixedWeight { w_spatial, w_temporal })
    }

    /// Spatial weight 1, temporal weight `ratio`.
    pub fn ratio(ratio: f64) -> Result<Self> {
        FixedWeight::new(1.0, ratio)
    }

    pub fn temporal_ratio(&self) -> f64 {
        self.w_temporal / self.w_spatial
    }
}

/// Temporal:spatial ratios searched by default, spatial weight fixed at 1.
pub const DEFAULT_GRID: [f64; 7] = [0.5, 0.75, 1.0, 1.25, 1.5, 1.75, 2.0];

pub fn default_grid() -> Vec<FixedWeight> {
    DEFAULT_GRID
        .iter()
        .map(|&r| FixedWeight::ratio(r).expect("positive ratio"))
        .collect()
}

pub fn fixed_fuse(scores: &ExpertScores, w: FixedWeight) -> Result<Tensor> {
    scores
        .g_rgb
        .zip_with(&scores.g_flow, "fixed_fuse", |a, b| w.w_spatial * a + w.w_temporal * b)
}

/// Fraction of samples whose fused argmax equals the label.
pub fn fixed_accuracy(samples: &[(ExpertScores, usize)], w: FixedWeight) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Empty("accuracy over zero samples"));
    }
    let mut correct = 0usize;
    for (s, label) in samples {
        if fixed_fuse(s, w)?.argmax() == *label {
            correct += 1;
        }
    }
    Ok(correct as f64 / samples.len() as f64)
}

/// Picks the candidate with the best validation accuracy. Ties go to the
/// ratio closest to 1:1 (by `|ratio - 1|`), then to the smaller temporal
/// weight.
pub fn grid_search_weight(samples: &[(ExpertScores, usize)], grid: &[FixedWeight]) -> Result<FixedWeight> {
    if samples.is_empty() {
        return Err(Error::Empty("grid search over an empty validation set"));
    }
    if grid.is_empty() {
        return Err(Error::Empty("grid search over an empty grid"));
    }
    let mut best: Option<(f64, FixedWeight)> = None;
    for &w in grid {
        let acc = fixed_accuracy(samples, w)?;
        let better = match best {
            None => true,
            Some((best_acc, best_w)) => {
                if acc != best_acc {
                    acc > best_acc
                } else {
                    let d = (w.temporal_ratio() - 1.0).abs();
                    let bd = (best_w.temporal_ratio() - 1.0).abs();
                    if d != bd {
                        d < bd
                    } else {
                        w.temporal_ratio() < best_w.temporal_ratio()
                    }
                }
            }
        };
        if better {
            best = Some((acc, w));
        }
    }
    Ok(best.expect("non-empty grid").1)
}

/// Sparsity Concentration Index of a non-negative vector, in `[0, 1]`.
pub fn sci(p: &[f64]) -> Result<f64> {
    if p.is_empty() {
        return Err(Error::Empty("SCI of an empty vector"));
    }
    if p.iter().any(|&v| v < 0.0 || !v.is_finite()) {
        return Err(Error::InvalidArgument("SCI needs finite non-negative entries".into()));
    }
    let total: f64 = p.iter().sum();
    if total == 0.0 {
        return Err(Error::InvalidArgument("SCI of an all-zero vector is undefined".into()));
    }
    let c = p.len() as f64;
    if p.len() == 1 {
        return Ok(1.0);
    }
    let max = p.iter().cloned().fold(0.0, f64::max);
    Ok(((c * max / total - 1.0) / (c - 1.0)).clamp(0.0, 1.0))
}

/// Per-stream softmax probabilities weighted by their SCI, normalised over
/// the two streams; even averaging when both SCIs are zero.
pub fn sci_fuse(scores: &ExpertScores) -> Result<Tensor> {
    Ok(sci_fuse_report(scores)?.fused)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SciFusion {
    pub sci_spatial: f64,
    pub sci_temporal: f64,
    pub fused: Tensor,
}

pub fn sci_fuse_report(scores: &ExpertScores) -> Result<SciFusion> {
    if scores.g_rgb.shape() != scores.g_flow.shape() {
        return Err(Error::shape(
            "sci_fuse",
            format!("{:?} vs {:?}", scores.g_rgb.shape(), scores.g_flow.shape()),
        ));
    }
    let p_rgb = tensor::softmax(scores.g_rgb.data());
    let p_flow = tensor::softmax(scores.g_flow.data());
    let s_rgb = sci(&p_rgb)?;
    let s_flow = sci(&p_flow)?;
    let (a, b) = if s_rgb + s_flow > 0.0 {
        (s_rgb / (s_rgb + s_flow), s_flow / (s_rgb + s_flow))
    } else {
        (0.5, 0.5)
    };
    let fused = p_rgb.iter().zip(&p_flow).map(|(x, y)| a * x + b * y).collect();
    Ok(SciFusion {
        sci_spatial: s_rgb,
        sci_temporal: s_flow,
        fused: Tensor::vector(fused),
    })
}
