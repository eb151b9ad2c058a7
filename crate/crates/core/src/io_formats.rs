//! On-disk artifacts: annotation corpora, binary feature pyramids and
//! detection results.
//!
//! Times are normalized to `[0, 1]` of the video's duration everywhere inside
//! the crate; seconds appear only in the JSON documents handled here.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::postprocess::{Detection, Interval};
use crate::sampling::PyramidFeature;

pub const FEATURE_MAGIC: &[u8; 4] = b"DTPF";
pub const FEATURE_VERSION: u32 = 1;
pub const DETECTION_VERSION: &str = "dtpn-1";

#[derive(Clone, Debug, PartialEq)]
pub struct VideoMeta {
    pub id: String,
    pub duration_s: f64,
    pub fps: f64,
    pub num_frames: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroundTruthSegment {
    pub label_index: usize,
    pub start: f64,
    pub end: f64,
}

impl GroundTruthSegment {
    pub fn interval(&self) -> Interval {
        Interval::new(self.start, self.end)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoEntry {
    pub meta: VideoMeta,
    pub segments: Vec<GroundTruthSegment>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub labels: Vec<String>,
    pub videos: Vec<VideoEntry>,
}

impl Corpus {
    pub fn num_classes(&self) -> usize {
        self.labels.len()
    }

    pub fn video(&self, id: &str) -> Option<&VideoEntry> {
        self.videos.iter().find(|v| v.meta.id == id)
    }

    pub fn label_index(&self, name: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == name)
    }
}

#[derive(Debug, Deserialize, Serialize)]
struct RawCorpus {
    labels: Vec<String>,
    videos: Vec<RawVideo>,
}

#[derive(Debug, Deserialize, Serialize)]
struct RawVideo {
    id: String,
    duration: f64,
    fps: f64,
    num_frames: u64,
    #[serde(default)]
    annotations: Vec<RawAnnotation>,
}

#[derive(Debug, Deserialize, Serialize)]
struct RawAnnotation {
    label: String,
    segment: [f64; 2],
}

pub fn load_corpus(path: &Path) -> Result<Corpus> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let raw: RawCorpus = serde_json::from_str(&text).map_err(|e| Error::json(path, &e))?;
    validate_corpus(raw)
}

pub fn parse_corpus(text: &str) -> Result<Corpus> {
    let raw: RawCorpus =
        serde_json::from_str(text).map_err(|e| Error::json(Path::new("<memory>"), &e))?;
    validate_corpus(raw)
}

fn validate_corpus(raw: RawCorpus) -> Result<Corpus> {
    let mut label_ids = HashMap::new();
    for (i, l) in raw.labels.iter().enumerate() {
        if label_ids.insert(l.as_str(), i).is_some() {
            return Err(Error::Validation(format!("duplicate label {l:?}")));
        }
    }
    let mut seen = HashSet::new();
    let mut videos = Vec::with_capacity(raw.videos.len());
    for v in &raw.videos {
        let id = &v.id;
        if id.is_empty() {
            return Err(Error::Validation("video with empty id".into()));
        }
        if !seen.insert(id.as_str()) {
            return Err(Error::Validation(format!("duplicate video id {id:?}")));
        }
        if !(v.duration.is_finite() && v.duration > 0.0) {
            return Err(Error::Validation(format!(
                "video {id}: duration must be positive, got {}",
                v.duration
            )));
        }
        if !(v.fps.is_finite() && v.fps > 0.0) {
            return Err(Error::Validation(format!(
                "video {id}: fps must be positive, got {}",
                v.fps
            )));
        }
        if v.num_frames == 0 {
            return Err(Error::Validation(format!("video {id}: num_frames must be ≥ 1")));
        }
        if (v.num_frames as f64 - v.duration * v.fps).abs() > v.fps {
            return Err(Error::Validation(format!(
                "video {id}: {} frames inconsistent with {} s at {} fps",
                v.num_frames, v.duration, v.fps
            )));
        }
        let mut segments = Vec::with_capacity(v.annotations.len());
        for a in &v.annotations {
            let [s, e] = a.segment;
            if !(s.is_finite() && e.is_finite()) {
                return Err(Error::Validation(format!("video {id}: non-finite segment")));
            }
            if s >= e {
                return Err(Error::Validation(format!(
                    "video {id}: segment [{s}, {e}] has start ≥ end"
                )));
            }
            if s < 0.0 || e > v.duration {
                return Err(Error::Validation(format!(
                    "video {id}: segment [{s}, {e}] outside [0, {}]",
                    v.duration
                )));
            }
            let label_index = *label_ids.get(a.label.as_str()).ok_or_else(|| {
                Error::Validation(format!("video {id}: unknown label {:?}", a.label))
            })?;
            segments.push(GroundTruthSegment {
                label_index,
                start: s / v.duration,
                end: e / v.duration,
            });
        }
        videos.push(VideoEntry {
            meta: VideoMeta {
                id: id.clone(),
                duration_s: v.duration,
                fps: v.fps,
                num_frames: v.num_frames as usize,
            },
            segments,
        });
    }
    Ok(Corpus {
        labels: raw.labels,
        videos,
    })
}

/// Serialize with segments de-normalized back to seconds.
pub fn corpus_to_json(corpus: &Corpus) -> Result<String> {
    let raw = RawCorpus {
        labels: corpus.labels.clone(),
        videos: corpus
            .videos
            .iter()
            .map(|v| RawVideo {
                id: v.meta.id.clone(),
                duration: v.meta.duration_s,
                fps: v.meta.fps,
                num_frames: v.meta.num_frames as u64,
                annotations: v
                    .segments
                    .iter()
                    .map(|g| RawAnnotation {
                        label: corpus.labels[g.label_index].clone(),
                        segment: [g.start * v.meta.duration_s, g.end * v.meta.duration_s],
                    })
                    .collect(),
            })
            .collect(),
    };
    serde_json::to_string_pretty(&raw).map_err(|e| Error::Validation(e.to_string()))
}

pub fn write_corpus(path: &Path, corpus: &Corpus) -> Result<()> {
    std::fs::write(path, corpus_to_json(corpus)?).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// Feature pyramids

pub fn encode_features(pyramid: &PyramidFeature) -> Vec<u8> {
    let floats: usize = pyramid.levels().iter().map(Vec::len).sum();
    let mut buf = Vec::with_capacity(20 + 4 * floats);
    buf.extend_from_slice(FEATURE_MAGIC);
    for v in [
        FEATURE_VERSION,
        pyramid.dim() as u32,
        pyramid.scales() as u32,
        pyramid.base_segments() as u32,
    ] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for level in pyramid.levels() {
        for x in level {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    buf
}

pub fn decode_features(bytes: &[u8], path: &Path) -> Result<PyramidFeature> {
    if bytes.len() < 4 || &bytes[..4] != FEATURE_MAGIC {
        return Err(Error::format(path, "not a feature file (bad magic)"));
    }
    if bytes.len() < 20 {
        return Err(Error::format(path, "truncated header"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
    let (version, d, scales, base) = (word(0), word(1), word(2), word(3));
    if version != FEATURE_VERSION {
        return Err(Error::format(path, format!("unsupported version {version}")));
    }
    if d == 0 || scales == 0 || base == 0 || scales > 31 {
        return Err(Error::format(
            path,
            format!("invalid header d={d} S={scales} K_1={base}"),
        ));
    }
    let (d, scales, base) = (d as usize, scales as usize, base as usize);
    let floats = ((1usize << scales) - 1)
        .checked_mul(base)
        .and_then(|n| n.checked_mul(d))
        .ok_or_else(|| Error::format(path, "header sizes overflow"))?;
    let payload = &bytes[20..];
    let expected = floats * 4;
    if payload.len() < expected {
        return Err(Error::format(
            path,
            format!(
                "truncated payload: header declares {expected} bytes, found {}",
                payload.len()
            ),
        ));
    }
    if payload.len() > expected {
        return Err(Error::format(
            path,
            format!(
                "payload size mismatch: header declares {expected} bytes, found {}",
                payload.len()
            ),
        ));
    }
    let mut values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()));
    let levels = (0..scales)
        .map(|s| values.by_ref().take((base << s) * d).collect())
        .collect();
    PyramidFeature::new(d, base, levels)
}

pub fn write_features(path: &Path, pyramid: &PyramidFeature) -> Result<()> {
    std::fs::write(path, encode_features(pyramid)).map_err(|e| Error::io(path, e))
}

pub fn read_features(path: &Path) -> Result<PyramidFeature> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_features(&bytes, path)
}

// ---------------------------------------------------------------------------
// Detection results

/// The detection document exactly as it appears on disk (times in seconds).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionDocument {
    pub version: String,
    pub results: BTreeMap<String, Vec<DetectionRecord>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub label: String,
    pub score: f64,
    pub segment: [f64; 2],
}

pub fn detections_to_document(
    results: &BTreeMap<String, Vec<Detection>>,
    corpus: &Corpus,
) -> Result<DetectionDocument> {
    let mut doc = DetectionDocument {
        version: DETECTION_VERSION.to_string(),
        results: BTreeMap::new(),
    };
    for (id, dets) in results {
        let video = corpus
            .video(id)
            .ok_or_else(|| Error::Validation(format!("unknown video id {id:?}")))?;
        let dur = video.meta.duration_s;
        let mut records = Vec::with_capacity(dets.len());
        for d in dets {
            if !(0.0..=1.0).contains(&d.score) {
                return Err(Error::Validation(format!(
                    "video {id}: score {} outside [0, 1]",
                    d.score
                )));
            }
            let label = corpus.labels.get(d.label).ok_or_else(|| {
                Error::Validation(format!("video {id}: label index {} out of range", d.label))
            })?;
            records.push(DetectionRecord {
                label: label.clone(),
                score: d.score,
                segment: [d.start * dur, d.end * dur],
            });
        }
        records.sort_by(|a, b| b.score.total_cmp(&a.score));
        doc.results.insert(id.clone(), records);
    }
    Ok(doc)
}

pub fn write_detections(
    path: &Path,
    results: &BTreeMap<String, Vec<Detection>>,
    corpus: &Corpus,
) -> Result<()> {
    let doc = detections_to_document(results, corpus)?;
    let text = serde_json::to_string_pretty(&doc).map_err(|e| Error::Validation(e.to_string()))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_detection_document(path: &Path) -> Result<DetectionDocument> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, &e))
}

/// Resolve a detection document against a corpus: labels to indices and
/// seconds to normalized time.
pub fn document_to_detections(
    doc: &DetectionDocument,
    corpus: &Corpus,
) -> Result<BTreeMap<String, Vec<Detection>>> {
    let mut out = BTreeMap::new();
    for (id, records) in &doc.results {
        let video = corpus
            .video(id)
            .ok_or_else(|| Error::Validation(format!("unknown video id {id:?}")))?;
        let dur = video.meta.duration_s;
        let mut dets = Vec::with_capacity(records.len());
        for r in records {
            let label = corpus.label_index(&r.label).ok_or_else(|| {
                Error::Validation(format!("video {id}: unknown label {:?}", r.label))
            })?;
            let [s, e] = r.segment;
            if !(s.is_finite() && e.is_finite() && s < e) {
                return Err(Error::Validation(format!(
                    "video {id}: invalid segment [{s}, {e}]"
                )));
            }
            if !r.score.is_finite() {
                return Err(Error::Validation(format!("video {id}: non-finite score")));
            }
            dets.push(Detection {
                start: s / dur,
                end: e / dur,
                label,
                score: r.score,
            });
        }
        out.insert(id.clone(), dets);
    }
    Ok(out)
}

pub fn read_detections(path: &Path, corpus: &Corpus) -> Result<BTreeMap<String, Vec<Detection>>> {
    document_to_detections(&read_detection_document(path)?, corpus)
}
