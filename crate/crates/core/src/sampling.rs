//! Dynamic multi-rate sampling: split an arbitrary-length frame sequence into
//! `K_s = 2^s · K_1` equal segments at each scale, draw a `w`-frame snippet
//! from every segment, and embed each snippet with a [`Backbone`] to build the
//! feature pyramid the network consumes.
//!
//! Scale and segment indices are zero-based throughout the API.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io_formats::GroundTruthSegment;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingConfig {
    /// Number of scales `S`.
    pub scales: usize,
    /// Segment count at the coarsest scale, `K_1`.
    pub base_segments: usize,
    /// Frames per snippet, `w`.
    pub window: usize,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            scales: 5,
            base_segments: 16,
            window: 8,
        }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scales == 0 || self.scales > 24 {
            return Err(Error::Config(format!("scale count {} out of range", self.scales)));
        }
        if !self.base_segments.is_power_of_two() {
            return Err(Error::Config(format!(
                "base segment count {} must be a power of two",
                self.base_segments
            )));
        }
        if self.window == 0 {
            return Err(Error::Config("snippet window must be ≥ 1".into()));
        }
        Ok(())
    }

    /// `K_s` for zero-based scale `s`.
    pub fn segments_at(&self, s: usize) -> usize {
        self.base_segments << s
    }

    pub fn total_snippets(&self) -> usize {
        self.base_segments * ((1 << self.scales) - 1)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SnippetPlan {
    pub scale: usize,
    pub segment: usize,
    pub frame_indices: Vec<usize>,
}

/// Frame range `[first, end)` of segment `i` when `frames` are split into `k` parts.
pub fn segment_range(frames: usize, k: usize, i: usize) -> (usize, usize) {
    (i * frames / k, (i + 1) * frames / k)
}

/// Endpoint-inclusive, rounded linear spacing of `window` indices over a
/// segment. Segments shorter than the window repeat frames; an empty segment
/// (more segments than frames) borrows the nearest frame at or before it.
fn snippet_indices(first: usize, end: usize, frames: usize, window: usize) -> Vec<usize> {
    if end <= first {
        return vec![first.min(frames - 1); window];
    }
    let n = end - first;
    if window == 1 {
        return vec![first];
    }
    let span = (n - 1) as u64;
    let den = (window - 1) as u64;
    (0..window as u64)
        .map(|j| first + ((2 * j * span + den) / (2 * den)) as usize)
        .collect()
}

pub fn plan_snippets(frames: usize, cfg: &SamplingConfig) -> Vec<SnippetPlan> {
    assert!(frames >= 1, "cannot sample an empty frame sequence");
    let mut plans = Vec::with_capacity(cfg.total_snippets());
    for s in 0..cfg.scales {
        let k = cfg.segments_at(s);
        for i in 0..k {
            let (first, end) = segment_range(frames, k, i);
            plans.push(SnippetPlan {
                scale: s,
                segment: i,
                frame_indices: snippet_indices(first, end, frames, cfg.window),
            });
        }
    }
    plans
}

/// Equivalent feature-level sampling rate, in features per second.
pub fn feature_rate(fps: f64, segments: usize, frames: usize) -> f64 {
    assert!(frames > 0);
    fps * segments as f64 / frames as f64
}

/// One feature matrix per scale; scale `s` holds `K_1 · 2^s` rows of `d`
/// values, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct PyramidFeature {
    dim: usize,
    base_segments: usize,
    levels: Vec<Vec<f32>>,
}

impl PyramidFeature {
    pub fn new(dim: usize, base_segments: usize, levels: Vec<Vec<f32>>) -> Result<Self> {
        if dim == 0 || base_segments == 0 || levels.is_empty() {
            return Err(Error::Shape("empty pyramid".into()));
        }
        for (s, level) in levels.iter().enumerate() {
            let rows = base_segments << s;
            if level.len() != rows * dim {
                return Err(Error::Shape(format!(
                    "scale {s}: expected {rows}×{dim} values, got {}",
                    level.len()
                )));
            }
        }
        Ok(Self {
            dim,
            base_segments,
            levels,
        })
    }

    pub fn zeros(dim: usize, scales: usize, base_segments: usize) -> Self {
        let levels = (0..scales)
            .map(|s| vec![0.0; (base_segments << s) * dim])
            .collect();
        Self {
            dim,
            base_segments,
            levels,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn scales(&self) -> usize {
        self.levels.len()
    }

    pub fn base_segments(&self) -> usize {
        self.base_segments
    }

    pub fn rows(&self, s: usize) -> usize {
        self.base_segments << s
    }

    pub fn levels(&self) -> &[Vec<f32>] {
        &self.levels
    }

    pub fn level(&self, s: usize) -> &[f32] {
        &self.levels[s]
    }

    pub fn row(&self, s: usize, i: usize) -> &[f32] {
        &self.levels[s][i * self.dim..(i + 1) * self.dim]
    }

    /// Keep only the first `scales` levels.
    pub fn truncated(&self, scales: usize) -> Result<Self> {
        if scales == 0 || scales > self.scales() {
            return Err(Error::Config(format!(
                "cannot keep {scales} of {} scales",
                self.scales()
            )));
        }
        Ok(Self {
            dim: self.dim,
            base_segments: self.base_segments,
            levels: self.levels[..scales].to_vec(),
        })
    }

    pub fn matches(&self, cfg: &SamplingConfig) -> bool {
        self.scales() == cfg.scales && self.base_segments == cfg.base_segments
    }
}

/// A frame sequence: `num_frames` records of `frame_dim` floats each.
#[derive(Clone, Debug, PartialEq)]
pub struct Frames {
    frame_dim: usize,
    data: Vec<f32>,
}

impl Frames {
    pub fn new(frame_dim: usize, data: Vec<f32>) -> Result<Self> {
        if frame_dim == 0 || data.is_empty() || !data.len().is_multiple_of(frame_dim) {
            return Err(Error::Shape(format!(
                "{} values do not form whole frames of dimension {frame_dim}",
                data.len()
            )));
        }
        Ok(Self { frame_dim, data })
    }

    pub fn frame_dim(&self) -> usize {
        self.frame_dim
    }

    pub fn num_frames(&self) -> usize {
        self.data.len() / self.frame_dim
    }

    pub fn frame(&self, i: usize) -> &[f32] {
        &self.data[i * self.frame_dim..(i + 1) * self.frame_dim]
    }

    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.data.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    fn parse(bytes: &[u8], frame_dim: usize, path: &Path) -> Result<Vec<f32>> {
        if !bytes.len().is_multiple_of(4) {
            return Err(Error::format(path, "frame data is not a whole number of f32 values"));
        }
        let values: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if !values.len().is_multiple_of(frame_dim) {
            return Err(Error::format(
                path,
                format!("{} values are not a multiple of frame_dim {frame_dim}", values.len()),
            ));
        }
        Ok(values)
    }

    /// Read either a raw little-endian `F × frame_dim` f32 file, or a
    /// directory holding one such record per file (read in file-name order).
    pub fn read(path: &Path, frame_dim: usize) -> Result<Self> {
        let data = if path.is_dir() {
            let mut entries: Vec<_> = std::fs::read_dir(path)
                .map_err(|e| Error::io(path, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.is_file())
                .collect();
            entries.sort();
            let mut data = Vec::new();
            for p in entries {
                let bytes = std::fs::read(&p).map_err(|e| Error::io(&p, e))?;
                let rec = Self::parse(&bytes, frame_dim, &p)?;
                if rec.len() != frame_dim {
                    return Err(Error::format(&p, "per-frame record must hold exactly one frame"));
                }
                data.extend(rec);
            }
            data
        } else {
            let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
            Self::parse(&bytes, frame_dim, path)?
        };
        Self::new(frame_dim, data).map_err(|_| Error::format(path, "no frames"))
    }
}

/// Maps a snippet of frame records to one feature vector.
pub trait Backbone: Sync {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn embed(&self, snippet: &[&[f32]]) -> Vec<f32>;
}

/// Seeded random projection of the snippet mean followed by `tanh`.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticBackbone {
    input_dim: usize,
    output_dim: usize,
    weight: Vec<f32>,
    bias: Vec<f32>,
}

impl SyntheticBackbone {
    pub fn new(seed: u64, input_dim: usize, output_dim: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_bacb_0e00_0000);
        let bound = (3.0 / input_dim as f32).sqrt();
        let weight = (0..input_dim * output_dim)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        let bias = (0..output_dim).map(|_| rng.random_range(-0.1..0.1)).collect();
        Self {
            input_dim,
            output_dim,
            weight,
            bias,
        }
    }
}

pub fn synthetic_backbone(seed: u64, input_dim: usize, output_dim: usize) -> SyntheticBackbone {
    SyntheticBackbone::new(seed, input_dim, output_dim)
}

impl Backbone for SyntheticBackbone {
    fn input_dim(&self) -> usize {
        self.input_dim
    }

    fn output_dim(&self) -> usize {
        self.output_dim
    }

    fn embed(&self, snippet: &[&[f32]]) -> Vec<f32> {
        let mut mean = vec![0.0f32; self.input_dim];
        for frame in snippet {
            for (m, &v) in mean.iter_mut().zip(*frame) {
                *m += v;
            }
        }
        let n = snippet.len().max(1) as f32;
        mean.iter_mut().for_each(|m| *m /= n);
        self.weight
            .chunks_exact(self.input_dim)
            .zip(&self.bias)
            .map(|(row, b)| {
                let z: f32 = row.iter().zip(&mean).map(|(w, x)| w * x).sum();
                (z + b).tanh()
            })
            .collect()
    }
}

pub enum PyramidSource<'a> {
    Frames(&'a Frames),
    /// Precomputed features, passed through after a header check.
    Features(PyramidFeature),
}

pub fn extract_pyramid(
    source: PyramidSource<'_>,
    cfg: &SamplingConfig,
    backbone: &dyn Backbone,
) -> Result<PyramidFeature> {
    cfg.validate()?;
    let frames = match source {
        PyramidSource::Features(p) => {
            if !p.matches(cfg) {
                return Err(Error::Config(format!(
                    "feature header (S={}, K_1={}) does not match configuration (S={}, K_1={})",
                    p.scales(),
                    p.base_segments(),
                    cfg.scales,
                    cfg.base_segments
                )));
            }
            return Ok(p);
        }
        PyramidSource::Frames(f) => f,
    };
    if frames.frame_dim() != backbone.input_dim() {
        return Err(Error::Config(format!(
            "frames have dimension {}, backbone expects {}",
            frames.frame_dim(),
            backbone.input_dim()
        )));
    }
    let d = backbone.output_dim();
    let plans = plan_snippets(frames.num_frames(), cfg);
    let rows: Vec<Vec<f32>> = plans
        .par_iter()
        .map(|plan| {
            let snippet: Vec<&[f32]> = plan.frame_indices.iter().map(|&i| frames.frame(i)).collect();
            backbone.embed(&snippet)
        })
        .collect();
    let mut rows = rows.into_iter();
    let levels = (0..cfg.scales)
        .map(|s| rows.by_ref().take(cfg.segments_at(s)).flatten().collect())
        .collect();
    PyramidFeature::new(d, cfg.base_segments, levels)
}

/// Reverse every level in time and reflect the segments about 1/2.
pub fn temporal_flip(
    pyramid: &PyramidFeature,
    gts: &[GroundTruthSegment],
) -> (PyramidFeature, Vec<GroundTruthSegment>) {
    let d = pyramid.dim;
    let levels = pyramid
        .levels
        .iter()
        .map(|level| level.chunks_exact(d).rev().flatten().copied().collect())
        .collect();
    let flipped = gts
        .iter()
        .map(|g| GroundTruthSegment {
            label_index: g.label_index,
            start: 1.0 - g.end,
            end: 1.0 - g.start,
        })
        .collect();
    (
        PyramidFeature {
            dim: d,
            base_segments: pyramid.base_segments,
            levels,
        },
        flipped,
    )
}
