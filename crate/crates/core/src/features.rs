//! Per-video expert feature files and their manifest.
//!
//! A feature file holds, for `S` snippets of one video, both streams' tap
//! features (`spatial_tap`, `temporal_tap`, shape `S x H x W x D`) and
//! pre-softmax scores (`g_rgb`, `g_flow`, shape `S x C`). The header's `meta`
//! carries `id`, `label`, `num_classes` and `feature_shape`; the tensors must
//! agree with them. A directory of such files is indexed by `manifest.json`,
//! written after every feature file.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::data::CueType;
use crate::error::{Error, Result};
use crate::experts::ExpertScores;
use crate::tensor::Tensor;
use crate::trainer::{SnippetFeatures, VideoFeatures};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub label: usize,
    pub file: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cue_type: Option<CueType>,
}

/// Expert outputs of one video, as stored in a feature file.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoFeatureSet {
    pub id: String,
    pub label: usize,
    pub cue_type: Option<CueType>,
    /// Per snippet: (spatial tap, temporal tap).
    pub taps: Vec<(Tensor, Tensor)>,
    /// Per snippet scores.
    pub scores: Vec<ExpertScores>,
}

impl VideoFeatureSet {
    /// Collects the cached snippets of `video` at `tap_layer`.
    pub fn from_cache(video: &VideoFeatures, tap_layer: usize, cue_type: Option<CueType>) -> Result<Self> {
        let mut taps = Vec::new();
        let mut scores = Vec::new();
        for f in video.starts.iter().flatten() {
            taps.push(f.taps(tap_layer)?);
            scores.push(f.scores.clone());
        }
        if taps.is_empty() {
            return Err(Error::Empty("video without cached snippets"));
        }
        Ok(VideoFeatureSet {
            id: video.id.clone(),
            label: video.label,
            cue_type,
            taps,
            scores,
        })
    }

    /// Snippets become consecutive starts `0..S` of a cached video.
    pub fn into_cache(self, tap_layer: usize) -> VideoFeatures {
        let starts = self
            .taps
            .into_iter()
            .zip(self.scores)
            .map(|((a, b), scores)| {
                let mut spatial_taps: [Option<Tensor>; 3] = Default::default();
                let mut temporal_taps: [Option<Tensor>; 3] = Default::default();
                spatial_taps[tap_layer - 1] = Some(a);
                temporal_taps[tap_layer - 1] = Some(b);
                Some(SnippetFeatures {
                    spatial_taps,
                    temporal_taps,
                    scores,
                })
            })
            .collect();
        VideoFeatures {
            id: self.id,
            label: self.label,
            starts,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.scores[0].g_rgb.len()
    }
}

fn stack(items: &[&Tensor]) -> Result<Tensor> {
    let shape = items[0].shape().to_vec();
    let mut data = Vec::with_capacity(items.len() * items[0].len());
    for t in items {
        if t.shape() != shape.as_slice() {
            return Err(Error::shape("stack", format!("{:?} vs {:?}", t.shape(), shape)));
        }
        data.extend_from_slice(t.data());
    }
    let mut full = vec![items.len()];
    full.extend(shape);
    Tensor::new(full, data)
}

fn unstack(t: &Tensor) -> Vec<Tensor> {
    let inner = t.shape()[1..].to_vec();
    let n: usize = inner.iter().product();
    t.data()
        .chunks_exact(n)
        .map(|c| Tensor::new(inner.clone(), c.to_vec()).expect("chunk matches shape"))
        .collect()
}

/// Serialises one video's features to `path`.
pub fn write_features(path: &Path, set: &VideoFeatureSet) -> Result<()> {
    if set.taps.is_empty() || set.taps.len() != set.scores.len() {
        return Err(Error::InvalidArgument(format!(
            "video {} has inconsistent snippet counts",
            set.id
        )));
    }
    let sa: Vec<&Tensor> = set.taps.iter().map(|t| &t.0).collect();
    let ta: Vec<&Tensor> = set.taps.iter().map(|t| &t.1).collect();
    let rgb: Vec<&Tensor> = set.scores.iter().map(|s| &s.g_rgb).collect();
    let flow: Vec<&Tensor> = set.scores.iter().map(|s| &s.g_flow).collect();
    let (spatial, temporal, g_rgb, g_flow) = (stack(&sa)?, stack(&ta)?, stack(&rgb)?, stack(&flow)?);
    let meta = serde_json::json!({
        "id": set.id,
        "label": set.label,
        "cue_type": set.cue_type,
        "num_classes": set.num_classes(),
        "num_snippets": set.taps.len(),
        "feature_shape": set.taps[0].0.shape(),
    });
    checkpoint::write_file(
        path,
        &[
            ("spatial_tap", &spatial),
            ("temporal_tap", &temporal),
            ("g_rgb", &g_rgb),
            ("g_flow", &g_flow),
        ],
        meta,
    )
}

/// Reads one feature file, checking every tensor against the header metadata.
pub fn ingest_features(path: &Path) -> Result<VideoFeatureSet> {
    let (header, tensors) = checkpoint::read_file(path)?;
    let malformed = |detail: String| Error::MalformedHeader {
        path: path.to_path_buf(),
        detail,
    };
    let mismatch = |detail: String| Error::ShapeMismatch {
        path: path.to_path_buf(),
        detail,
    };
    let meta = &header.meta;
    let id = meta
        .get("id")
        .and_then(|v| v.as_str())
        .ok_or_else(|| malformed("missing meta.id".into()))?
        .to_string();
    let label = meta
        .get("label")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| malformed("missing meta.label".into()))? as usize;
    let num_classes = meta
        .get("num_classes")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| malformed("missing meta.num_classes".into()))? as usize;
    let feature_shape: Vec<usize> = meta
        .get("feature_shape")
        .cloned()
        .and_then(|v| serde_json::from_value(v).ok())
        .ok_or_else(|| malformed("missing meta.feature_shape".into()))?;
    let cue_type: Option<CueType> = meta
        .get("cue_type")
        .cloned()
        .and_then(|v| serde_json::from_value(v).ok());
    if label >= num_classes {
        return Err(malformed(format!(
            "label {label} out of range for {num_classes} classes"
        )));
    }
    let get = |name: &str| -> Result<&Tensor> {
        tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| malformed(format!("missing tensor {name}")))
    };
    let (spatial, temporal, g_rgb, g_flow) = (get("spatial_tap")?, get("temporal_tap")?, get("g_rgb")?, get("g_flow")?);
    let s = g_rgb.shape()[0];
    for (name, t, inner) in [
        ("g_rgb", g_rgb, vec![num_classes]),
        ("g_flow", g_flow, vec![num_classes]),
        ("spatial_tap", spatial, feature_shape.clone()),
        ("temporal_tap", temporal, feature_shape.clone()),
    ] {
        let mut want = vec![s];
        want.extend(inner);
        if t.shape() != want.as_slice() {
            return Err(mismatch(format!(
                "{name} has shape {:?}, header declares {want:?}",
                t.shape()
            )));
        }
    }
    let taps = unstack(spatial).into_iter().zip(unstack(temporal)).collect();
    let scores = unstack(g_rgb)
        .into_iter()
        .zip(unstack(g_flow))
        .map(|(g_rgb, g_flow)| ExpertScores { g_rgb, g_flow })
        .collect();
    Ok(VideoFeatureSet {
        id,
        label,
        cue_type,
        taps,
        scores,
    })
}

/// Writes one file per video into `dir`, then the manifest.
pub fn export_features(dir: &Path, sets: &[VideoFeatureSet]) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let entries: Vec<ManifestEntry> = sets
        .par_iter()
        .map(|set| {
            let file = format!("{}.feat", set.id);
            write_features(&dir.join(&file), set)?;
            Ok(ManifestEntry {
                id: set.id.clone(),
                label: set.label,
                file,
                cue_type: set.cue_type,
            })
        })
        .collect::<Result<_>>()?;
    let path = dir.join(MANIFEST);
    fs::write(&path, serde_json::to_vec_pretty(&entries)?).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Reads a manifest and every file it lists; labels must agree.
pub fn ingest_dir(dir: &Path) -> Result<Vec<VideoFeatureSet>> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let entries: Vec<ManifestEntry> = serde_json::from_str(&text).map_err(|e| Error::MalformedHeader {
        path: path.clone(),
        detail: e.to_string(),
    })?;
    entries
        .par_iter()
        .map(|e| {
            let set = ingest_features(&dir.join(&e.file))?;
            if set.label != e.label || set.id != e.id {
                return Err(Error::ShapeMismatch {
                    path: dir.join(&e.file),
                    detail: format!(
                        "manifest says {} / {}, file says {} / {}",
                        e.id, e.label, set.id, set.label
                    ),
                });
            }
            Ok(set)
        })
        .collect()
}
