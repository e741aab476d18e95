//! Synthetic two-modality videos and the snippet sampling protocols.
//!
//! A video is a static periodic texture translated over a torus. Frame `t+1`
//! is frame `t` shifted by an integer velocity `v(t)`, and flow field `t` is
//! that velocity at every pixel, so flows are exact displacement fields of
//! the clean frames. Classes differ in texture ("spatial" cue), in the
//! velocity sequence ("temporal" cue), or both. Classes without a spatial cue
//! share one texture and start at a uniformly random offset, so their frames
//! have identical marginals; classes without a temporal cue share one motion.
//! Half of the videos are mirrored left-right (flow x negated), so every
//! class is closed under the mirror crops of the test protocol.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experts::{Snippet, SnippetBatch};
use crate::rng::{self, DetRng, Stream};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CueType {
    SpatialOnly,
    TemporalOnly,
    Both,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub spatial_only: usize,
    pub temporal_only: usize,
    pub both: usize,
    pub videos_per_class: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub flow_len: usize,
    pub train_frac: f64,
    pub val_frac: f64,
    pub test_frac: f64,
    /// Standard deviation of per-pixel noise added to frames.
    pub noise: f64,
    /// Standard deviation of per-pixel noise added to flow fields.
    pub flow_noise: f64,
    /// Per-video texture contrast is drawn uniformly from this range.
    pub contrast: [f64; 2],
    /// Probability that one modality of a video (chosen at random) is
    /// degraded: its noise is multiplied by `degrade_gain`.
    pub degrade_prob: f64,
    pub degrade_gain: f64,
    /// Probability of camera shake: the flow gains a random per-step jitter
    /// of up to `shake_amp` pixels per axis, and the frames show the texture
    /// of another class instead of the video's own.
    pub shake_prob: f64,
    pub shake_amp: i32,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            spatial_only: 3,
            temporal_only: 3,
            both: 2,
            videos_per_class: 60,
            frames: 24,
            height: 16,
            width: 16,
            flow_len: 5,
            train_frac: 0.6,
            val_frac: 0.2,
            test_frac: 0.2,
            noise: 0.5,
            flow_noise: 1.5,
            contrast: [0.3, 1.0],
            degrade_prob: 0.0,
            degrade_gain: 4.0,
            shake_prob: 0.25,
            shake_amp: 1,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn num_classes(&self) -> usize {
        self.spatial_only + self.temporal_only + self.both
    }

    pub fn cue_of(&self, class: usize) -> CueType {
        if class < self.spatial_only {
            CueType::SpatialOnly
        } else if class < self.spatial_only + self.temporal_only {
            CueType::TemporalOnly
        } else {
            CueType::Both
        }
    }

    /// Checks the settings, reporting the first offending field.
    pub fn validate(&self) -> Result<()> {
        let field = |f: &str| format!("dataset.{f}");
        if self.num_classes() < 2 {
            return Err(Error::config(field("spatial_only"), "need at least 2 classes in total"));
        }
        if self.videos_per_class == 0 {
            return Err(Error::config(field("videos_per_class"), "must be positive"));
        }
        if self.height < 4 || self.width < 4 {
            return Err(Error::config(field("height"), "frames must be at least 4x4"));
        }
        if self.flow_len == 0 {
            return Err(Error::config(field("flow_len"), "must be positive"));
        }
        if self.frames < self.flow_len + 1 {
            return Err(Error::config(
                field("frames"),
                format!("{} frames cannot host a {}-flow stack", self.frames, self.flow_len),
            ));
        }
        for (name, v) in [
            ("train_frac", self.train_frac),
            ("val_frac", self.val_frac),
            ("test_frac", self.test_frac),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(field(name), "must be in [0, 1]"));
            }
        }
        if (self.train_frac + self.val_frac + self.test_frac - 1.0).abs() > 1e-9 {
            return Err(Error::config(field("test_frac"), "split fractions must sum to 1"));
        }
        if self.noise < 0.0 || self.flow_noise < 0.0 {
            return Err(Error::config(field("noise"), "must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.degrade_prob) {
            return Err(Error::config(field("degrade_prob"), "must be in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.shake_prob) {
            return Err(Error::config(field("shake_prob"), "must be in [0, 1]"));
        }
        if self.shake_amp < 0 {
            return Err(Error::config(field("shake_amp"), "must be non-negative"));
        }
        if self.degrade_gain < 0.0 {
            return Err(Error::config(field("degrade_gain"), "must be non-negative"));
        }
        if !(self.contrast[0] >= 0.0 && self.contrast[0] <= self.contrast[1]) {
            return Err(Error::config(field("contrast"), "need 0 <= low <= high"));
        }
        let motions_needed = self.temporal_only + self.both + usize::from(self.spatial_only > 0);
        if motions_needed > MOTIONS.len() {
            return Err(Error::config(
                field("temporal_only"),
                format!("at most {} distinct motions are available", MOTIONS.len()),
            ));
        }
        Ok(())
    }
}

/// Velocity sequences `(dx, dy)` per step; sequences are cycled. No entry
/// is the horizontal mirror of another, since every video is mirrored with
/// probability one half.
const MOTIONS: &[&[(i32, i32)]] = &[
    &[(0, 0)],
    &[(1, 0)],
    &[(0, 1)],
    &[(0, -1)],
    &[(1, 0), (-1, 0)],
    &[(1, 1)],
    &[(1, -1)],
    &[(0, 1), (0, -1)],
    &[(1, 0), (0, 1)],
    &[(2, 0)],
    &[(1, 0), (0, 0)],
    &[(0, 2)],
];

#[derive(Debug, Clone, PartialEq)]
pub struct SynthVideo {
    pub id: String,
    pub label: usize,
    pub cue_type: CueType,
    pub shaken: bool,
    /// `T` frames of shape `H x W x 3`.
    pub frames: Vec<Tensor>,
    /// `T - 1` flow fields of shape `H x W x 2` (x then y displacement).
    pub flows: Vec<Tensor>,
}

impl SynthVideo {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Number of valid snippet start indices for flow stacks of length `l`.
    pub fn num_starts(&self, l: usize) -> usize {
        self.frames.len().saturating_sub(l)
    }

    /// Frame at `start` and the `l` flows beginning there, stacked channelwise.
    pub fn snippet(&self, start: usize, l: usize) -> Result<Snippet> {
        if start + l > self.flows.len() {
            return Err(Error::InvalidArgument(format!(
                "snippet at {start} with {l} flows exceeds {} flow fields",
                self.flows.len()
            )));
        }
        let spatial = self.frames[start].clone();
        let temporal = stack_channels(&self.flows[start..start + l])?;
        Ok(Snippet {
            start,
            spatial,
            temporal,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Vec<SynthVideo>,
    pub val: Vec<SynthVideo>,
    pub test: Vec<SynthVideo>,
}

fn stack_channels(maps: &[Tensor]) -> Result<Tensor> {
    let (h, w, c) = maps[0].hwc()?;
    let total = c * maps.len();
    let mut out = vec![0.0; h * w * total];
    for (i, m) in maps.iter().enumerate() {
        for (p, px) in m.data().chunks_exact(c).enumerate() {
            out[p * total + i * c..p * total + (i + 1) * c].copy_from_slice(px);
        }
    }
    Tensor::new(vec![h, w, total], out)
}

/// Zero-mean periodic colour texture on an `h x w` torus, scaled to unit RMS.
/// Frames are therefore already mean-subtracted.
fn texture(h: usize, w: usize, rng: &mut DetRng) -> Vec<f64> {
    let mut out = vec![0.0; h * w * 3];
    let waves = 3;
    for _ in 0..waves {
        let fx = rng.random_range(-3i32..=3) as f64;
        let fy = rng.random_range(-3i32..=3) as f64;
        let (fx, fy) = if fx == 0.0 && fy == 0.0 { (1.0, 2.0) } else { (fx, fy) };
        let phase = rng.random::<f64>() * std::f64::consts::TAU;
        let colour: [f64; 3] = [
            rng.random::<f64>() * 2.0 - 1.0,
            rng.random::<f64>() * 2.0 - 1.0,
            rng.random::<f64>() * 2.0 - 1.0,
        ];
        for y in 0..h {
            for x in 0..w {
                let arg = std::f64::consts::TAU * (fx * x as f64 / w as f64 + fy * y as f64 / h as f64) + phase;
                let v = arg.cos() / waves as f64;
                for c in 0..3 {
                    out[(y * w + x) * 3 + c] += v * colour[c];
                }
            }
        }
    }
    let rms = (out.iter().map(|v| v * v).sum::<f64>() / out.len() as f64).sqrt();
    if rms > 0.0 {
        out.iter_mut().for_each(|v| *v /= rms);
    }
    out
}

struct ClassCues {
    texture: usize,
    motion: usize,
}

fn class_cues(spec: &DatasetSpec) -> Vec<ClassCues> {
    // Texture 0 and motion 0 are the shared "no cue" values.
    let mut next_motion = 1;
    (0..spec.num_classes())
        .map(|c| match spec.cue_of(c) {
            CueType::SpatialOnly => ClassCues {
                texture: c + 1,
                motion: 0,
            },
            CueType::TemporalOnly => {
                next_motion += 1;
                ClassCues {
                    texture: 0,
                    motion: next_motion - 1,
                }
            }
            CueType::Both => {
                next_motion += 1;
                ClassCues {
                    texture: c + 1,
                    motion: next_motion - 1,
                }
            }
        })
        .collect()
}

fn render_video(
    spec: &DatasetSpec,
    id: String,
    label: usize,
    textures: &[&[f64]],
    own: usize,
    motion: &[(i32, i32)],
    rng: &mut DetRng,
) -> SynthVideo {
    let (h, w, t) = (spec.height, spec.width, spec.frames);
    let shaken = rng.random::<f64>() < spec.shake_prob;
    let tex = if shaken && textures.len() > 1 {
        let pick = rng.random_range(0..textures.len() - 1);
        textures[if pick >= own { pick + 1 } else { pick }]
    } else {
        textures[own]
    };
    let contrast = spec.contrast[0] + (spec.contrast[1] - spec.contrast[0]) * rng.random::<f64>();
    let (mut pix_noise, mut flow_noise) = (spec.noise, spec.flow_noise);
    if rng.random::<f64>() < spec.degrade_prob {
        if rng.random::<bool>() {
            pix_noise *= spec.degrade_gain;
        } else {
            flow_noise *= spec.degrade_gain;
        }
    }
    let pix = Normal::new(0.0, pix_noise.max(0.0)).expect("finite std");
    let flo = Normal::new(0.0, flow_noise.max(0.0)).expect("finite std");
    let mirror = rng.random::<bool>();
    let phase = rng.random_range(0..motion.len());
    let mut oy = rng.random_range(0..h) as i64;
    let mut ox = rng.random_range(0..w) as i64;
    let mut frames = Vec::with_capacity(t);
    let mut flows = Vec::with_capacity(t - 1);
    for step in 0..t {
        let mut data = vec![0.0; h * w * 3];
        for y in 0..h {
            let sy = (y as i64 - oy).rem_euclid(h as i64) as usize;
            for x in 0..w {
                let sx = (x as i64 - ox).rem_euclid(w as i64) as usize;
                for c in 0..3 {
                    let clean = contrast * tex[(sy * w + sx) * 3 + c];
                    data[(y * w + x) * 3 + c] = clean + noise_sample(&pix, pix_noise, rng);
                }
            }
        }
        frames.push(Tensor::new(vec![h, w, 3], data).expect("frame shape"));
        if step + 1 < t {
            let (mut dx, mut dy) = motion[(phase + step) % motion.len()];
            if shaken {
                dx += rng.random_range(-spec.shake_amp..=spec.shake_amp);
                dy += rng.random_range(-spec.shake_amp..=spec.shake_amp);
            }
            let mut f = vec![0.0; h * w * 2];
            for px in f.chunks_exact_mut(2) {
                px[0] = dx as f64 + noise_sample(&flo, flow_noise, rng);
                px[1] = dy as f64 + noise_sample(&flo, flow_noise, rng);
            }
            flows.push(Tensor::new(vec![h, w, 2], f).expect("flow shape"));
            ox += dx as i64;
            oy += dy as i64;
        }
    }
    if mirror {
        let full = Crop {
            y0: 0,
            x0: 0,
            h,
            w,
            flip: true,
        };
        frames = frames
            .iter()
            .map(|f| apply_crop(f, &full, false).expect("in bounds"))
            .collect();
        flows = flows
            .iter()
            .map(|f| apply_crop(f, &full, true).expect("in bounds"))
            .collect();
    }
    SynthVideo {
        id,
        label,
        cue_type: spec.cue_of(label),
        shaken,
        frames,
        flows,
    }
}

fn noise_sample(dist: &Normal<f64>, std: f64, rng: &mut DetRng) -> f64 {
    if std > 0.0 {
        dist.sample(rng)
    } else {
        0.0
    }
}

/// Generates class-balanced train/val/test splits, deterministic in `spec.seed`.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<Splits> {
    spec.validate()?;
    let mut rng = rng::stream(spec.seed, Stream::Data);
    let textures: Vec<Vec<f64>> = (0..=spec.num_classes())
        .map(|_| texture(spec.height, spec.width, &mut rng))
        .collect();
    let cues = class_cues(spec);
    let mut used: Vec<usize> = cues.iter().map(|c| c.texture).collect();
    used.sort_unstable();
    used.dedup();
    let palette: Vec<&[f64]> = used.iter().map(|&i| textures[i].as_slice()).collect();
    let n = spec.videos_per_class;
    let n_train = (n as f64 * spec.train_frac).round() as usize;
    let n_val = ((n as f64 * spec.val_frac).round() as usize).min(n - n_train.min(n));
    let mut splits = Splits {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for (class, cue) in cues.iter().enumerate() {
        let mut videos: Vec<SynthVideo> = (0..n)
            .map(|i| {
                render_video(
                    spec,
                    format!("c{class:02}_v{i:04}"),
                    class,
                    &palette,
                    used.iter().position(|&u| u == cue.texture).expect("texture in palette"),
                    MOTIONS[cue.motion],
                    &mut rng,
                )
            })
            .collect();
        videos.shuffle(&mut rng);
        let rest = videos.split_off(n_train.min(n));
        let (val, test) = {
            let mut rest = rest;
            let test = rest.split_off(n_val.min(rest.len()));
            (rest, test)
        };
        splits.train.extend(videos);
        splits.val.extend(val);
        splits.test.extend(test);
    }
    Ok(splits)
}

/// TSN-style sampling: the valid start range is cut into `k` equal segments
/// and one start is drawn uniformly inside each.
pub fn segment_starts<R: Rng + ?Sized>(num_starts: usize, k: usize, rng: &mut R) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(Error::InvalidArgument("need at least one segment".into()));
    }
    let width = num_starts / k;
    if width == 0 {
        return Err(Error::InvalidArgument(format!(
            "{num_starts} start positions cannot be split into {k} segments"
        )));
    }
    Ok((0..k).map(|s| s * width + rng.random_range(0..width)).collect())
}

/// One snippet per segment; spatial frame and flow stack share their start.
pub fn sample_snippets<R: Rng + ?Sized>(video: &SynthVideo, k: usize, l: usize, rng: &mut R) -> Result<SnippetBatch> {
    if video.len() < k * (l + 1) {
        return Err(Error::InvalidArgument(format!(
            "video {} has {} frames, needs {} for {k} segments of {l} flows",
            video.id,
            video.len(),
            k * (l + 1)
        )));
    }
    let starts = segment_starts(video.num_starts(l), k, rng)?;
    Ok(SnippetBatch {
        segments: starts.into_iter().map(|s| video.snippet(s, l)).collect::<Result<_>>()?,
        label: video.label,
    })
}

/// `n` equally spaced start indices over `num_starts` positions.
pub fn equally_spaced_starts(num_starts: usize, n: usize) -> Vec<usize> {
    (0..n)
        .map(|i| (((i as f64 + 0.5) * num_starts as f64 / n as f64).floor() as usize).min(num_starts - 1))
        .collect()
}

/// Deterministic K-snippet batch at the segment centres (used for validation).
pub fn centered_snippets(video: &SynthVideo, k: usize, l: usize) -> Result<SnippetBatch> {
    let starts = equally_spaced_starts(video.num_starts(l), k);
    Ok(SnippetBatch {
        segments: starts.into_iter().map(|s| video.snippet(s, l)).collect::<Result<_>>()?,
        label: video.label,
    })
}

/// A rectangular crop, optionally mirrored horizontally.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Crop {
    pub y0: usize,
    pub x0: usize,
    pub h: usize,
    pub w: usize,
    pub flip: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CropSet {
    /// The full frame only.
    Full,
    /// The full frame and its mirror image.
    FullAndFlip,
    /// Four corners and the centre at `size x size`, plus their mirrors.
    CornersCenterFlip { size: usize },
}

impl CropSet {
    pub fn crops(&self, h: usize, w: usize) -> Result<Vec<Crop>> {
        match *self {
            CropSet::Full => Ok(vec![Crop {
                y0: 0,
                x0: 0,
                h,
                w,
                flip: false,
            }]),
            CropSet::FullAndFlip => Ok(vec![
                Crop {
                    y0: 0,
                    x0: 0,
                    h,
                    w,
                    flip: false,
                },
                Crop {
                    y0: 0,
                    x0: 0,
                    h,
                    w,
                    flip: true,
                },
            ]),
            CropSet::CornersCenterFlip { size } => {
                if size > h || size > w || size < 4 {
                    return Err(Error::InvalidArgument(format!(
                        "crop size {size} does not fit a {h}x{w} frame"
                    )));
                }
                let positions = [
                    (0, 0),
                    (0, w - size),
                    (h - size, 0),
                    (h - size, w - size),
                    ((h - size) / 2, (w - size) / 2),
                ];
                Ok([false, true]
                    .iter()
                    .flat_map(|&flip| {
                        positions.iter().map(move |&(y0, x0)| Crop {
                            y0,
                            x0,
                            h: size,
                            w: size,
                            flip,
                        })
                    })
                    .collect())
            }
        }
    }
}

/// Crops a map; when mirroring with `negate_x`, the even channels (the x
/// component of flow) change sign.
pub fn apply_crop(t: &Tensor, crop: &Crop, negate_x: bool) -> Result<Tensor> {
    let (h, w, c) = t.hwc()?;
    if crop.y0 + crop.h > h || crop.x0 + crop.w > w {
        return Err(Error::shape("crop", format!("{crop:?} exceeds {h}x{w}")));
    }
    let mut out = Vec::with_capacity(crop.h * crop.w * c);
    for y in 0..crop.h {
        for x in 0..crop.w {
            let sx = if crop.flip {
                crop.x0 + crop.w - 1 - x
            } else {
                crop.x0 + x
            };
            let base = ((crop.y0 + y) * w + sx) * c;
            for ch in 0..c {
                let v = t.data()[base + ch];
                out.push(if crop.flip && negate_x && ch % 2 == 0 { -v } else { v });
            }
        }
    }
    Tensor::new(vec![crop.h, crop.w, c], out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestProtocol {
    pub num_samples: usize,
    pub crops: CropSet,
}

impl TestProtocol {
    pub fn desk() -> Self {
        TestProtocol {
            num_samples: 5,
            crops: CropSet::FullAndFlip,
        }
    }

    /// 25 temporal samples, four corners plus centre, and their mirrors.
    pub fn paper_scale(frame_size: usize) -> Self {
        TestProtocol {
            num_samples: 25,
            crops: CropSet::CornersCenterFlip {
                size: (frame_size * 7 / 8).max(4) & !1,
            },
        }
    }
}

/// A single-segment test input: one start, one crop, both modalities.
#[derive(Debug, Clone, PartialEq)]
pub struct TestSample {
    pub crop: Crop,
    pub snippet: Snippet,
}

/// All `num_samples x crops` single-segment inputs of one video.
pub fn test_protocol(video: &SynthVideo, l: usize, protocol: &TestProtocol) -> Result<Vec<TestSample>> {
    if protocol.num_samples == 0 {
        return Err(Error::InvalidArgument("test protocol needs at least one sample".into()));
    }
    let (h, w, _) = video.frames[0].hwc()?;
    let crops = protocol.crops.crops(h, w)?;
    let mut out = Vec::with_capacity(protocol.num_samples * crops.len());
    for start in equally_spaced_starts(video.num_starts(l), protocol.num_samples) {
        let base = video.snippet(start, l)?;
        for crop in &crops {
            out.push(TestSample {
                crop: *crop,
                snippet: Snippet {
                    start,
                    spatial: apply_crop(&base.spatial, crop, false)?,
                    temporal: apply_crop(&base.temporal, crop, true)?,
                },
            });
        }
    }
    Ok(out)
}
