//! Detection metrics in the ActivityNet convention: step-wise average
//! precision per class at a tIoU threshold, mAP over classes that have ground
//! truth, and the mean over the 0.50:0.05:0.95 sweep.

mod oracle;

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::io_formats::Corpus;
use crate::postprocess::{tiou, Detection, Interval};

pub use oracle::oracle_evaluate;

pub const ACTIVITYNET_THRESHOLDS: [f64; 10] = [0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95];

/// One detection of a single class, tagged with its video.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassDetection {
    pub video: String,
    pub interval: Interval,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassGroundTruth {
    pub video: String,
    pub interval: Interval,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ApResult {
    pub ap: f64,
    /// `(recall, precision)` after each ranked detection.
    pub curve: Vec<(f64, f64)>,
}

/// Score descending, then start, video id, end.
fn rank_order(a: &ClassDetection, b: &ClassDetection) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.interval.start.total_cmp(&b.interval.start))
        .then_with(|| a.video.cmp(&b.video))
        .then(a.interval.end.total_cmp(&b.interval.end))
}

/// Non-interpolated AP: the sum of precision at each true positive rank,
/// divided by the number of ground truths. Each detection takes the unmatched
/// ground truth in its video with the highest tIoU, provided that reaches
/// `tau`. No ground truth gives 0.
pub fn average_precision(dets: &[ClassDetection], gts: &[ClassGroundTruth], tau: f64) -> ApResult {
    let mut ranked: Vec<&ClassDetection> = dets.iter().collect();
    ranked.sort_by(|a, b| rank_order(a, b));
    let mut by_video: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (k, g) in gts.iter().enumerate() {
        by_video.entry(g.video.as_str()).or_default().push(k);
    }
    let mut matched = vec![false; gts.len()];
    let n_gt = gts.len() as f64;
    let mut tp = 0usize;
    let mut out = ApResult::default();
    for (rank, d) in ranked.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for &k in by_video.get(d.video.as_str()).map(Vec::as_slice).unwrap_or(&[]) {
            if matched[k] {
                continue;
            }
            let v = tiou(&d.interval, &gts[k].interval);
            if v >= tau && best.is_none_or(|(_, bv)| v > bv) {
                best = Some((k, v));
            }
        }
        let tp_before = tp;
        if let Some((k, _)) = best {
            matched[k] = true;
            tp += 1;
        }
        let precision = tp as f64 / (rank + 1) as f64;
        if tp > tp_before {
            out.ap += precision / n_gt;
        }
        let recall = if gts.is_empty() { 0.0 } else { tp as f64 / n_gt };
        out.curve.push((recall, precision));
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassReport {
    pub label: String,
    pub num_ground_truth: usize,
    pub num_detections: usize,
    /// One AP per threshold.
    pub ap: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub thresholds: Vec<f64>,
    pub map: Vec<f64>,
    pub average_map: f64,
    pub classes: Vec<ClassReport>,
    pub warnings: Vec<String>,
    #[serde(skip)]
    pub curves: Vec<PrCurve>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrCurve {
    pub label: String,
    pub threshold: f64,
    pub points: Vec<(f64, f64)>,
}

impl EvalReport {
    /// mAP at the threshold closest to `tau`.
    pub fn map_at(&self, tau: f64) -> Option<f64> {
        self.thresholds
            .iter()
            .position(|t| (t - tau).abs() < 1e-9)
            .map(|i| self.map[i])
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report is always serializable")
    }

    pub fn to_table(&self) -> String {
        let width = self.classes.iter().map(|c| c.label.len()).max().unwrap_or(0).max(7);
        let mut s = String::new();
        let _ = write!(s, "{:<width$} {:>5}", "class", "#gt");
        for t in &self.thresholds {
            let _ = write!(s, " {t:>6.2}");
        }
        s.push('\n');
        for c in &self.classes {
            let _ = write!(s, "{:<width$} {:>5}", c.label, c.num_ground_truth);
            for ap in &c.ap {
                let _ = write!(s, " {ap:>6.4}");
            }
            s.push('\n');
        }
        let _ = write!(s, "{:<width$} {:>5}", "mAP", "");
        for m in &self.map {
            let _ = write!(s, " {m:>6.4}");
        }
        let _ = write!(s, "\naverage mAP {:.4}\n", self.average_map);
        s
    }

    pub fn curves_csv(&self) -> String {
        let mut s = String::from("label,threshold,rank,recall,precision\n");
        for c in &self.curves {
            for (rank, (r, p)) in c.points.iter().enumerate() {
                let _ = writeln!(s, "{},{},{},{},{}", c.label, c.threshold, rank + 1, r, p);
            }
        }
        s
    }
}

/// Per-class detection and ground-truth lists, checked against the corpus.
pub(crate) fn split_by_class(
    results: &BTreeMap<String, Vec<Detection>>,
    corpus: &Corpus,
) -> Result<(Vec<Vec<ClassDetection>>, Vec<Vec<ClassGroundTruth>>)> {
    let m = corpus.num_classes();
    let mut dets = vec![Vec::new(); m];
    let mut gts = vec![Vec::new(); m];
    for (id, list) in results {
        if corpus.video(id).is_none() {
            return Err(Error::Validation(format!("detections reference unknown video id {id:?}")));
        }
        for d in list {
            if d.label >= m {
                return Err(Error::Validation(format!("video {id}: label index {} out of range", d.label)));
            }
            dets[d.label].push(ClassDetection {
                video: id.clone(),
                interval: d.interval(),
                score: d.score,
            });
        }
    }
    for v in &corpus.videos {
        for g in &v.segments {
            gts[g.label_index].push(ClassGroundTruth {
                video: v.meta.id.clone(),
                interval: g.interval(),
            });
        }
    }
    Ok((dets, gts))
}

pub fn evaluate(
    results: &BTreeMap<String, Vec<Detection>>,
    corpus: &Corpus,
    thresholds: &[f64],
) -> Result<EvalReport> {
    if thresholds.iter().any(|t| !(*t > 0.0 && *t <= 1.0)) {
        return Err(Error::Config("tIoU thresholds must lie in (0, 1]".into()));
    }
    let (dets, gts) = split_by_class(results, corpus)?;
    let per_class: Vec<Vec<ApResult>> = (0..corpus.num_classes())
        .into_par_iter()
        .map(|c| thresholds.iter().map(|&t| average_precision(&dets[c], &gts[c], t)).collect())
        .collect();

    let mut warnings = Vec::new();
    let mut classes = Vec::new();
    let mut curves = Vec::new();
    let mut map = vec![0.0; thresholds.len()];
    let mut counted = 0usize;
    for (c, results) in per_class.into_iter().enumerate() {
        let label = corpus.labels[c].clone();
        if gts[c].is_empty() {
            warnings.push(format!("class {label:?} has no ground truth; excluded from mAP"));
            continue;
        }
        counted += 1;
        for (i, r) in results.iter().enumerate() {
            map[i] += r.ap;
        }
        classes.push(ClassReport {
            label: label.clone(),
            num_ground_truth: gts[c].len(),
            num_detections: dets[c].len(),
            ap: results.iter().map(|r| r.ap).collect(),
        });
        for (r, &t) in results.into_iter().zip(thresholds) {
            curves.push(PrCurve {
                label: label.clone(),
                threshold: t,
                points: r.curve,
            });
        }
    }
    if counted > 0 {
        map.iter_mut().for_each(|x| *x /= counted as f64);
    }
    let average_map = if map.is_empty() { 0.0 } else { map.iter().sum::<f64>() / map.len() as f64 };
    Ok(EvalReport {
        thresholds: thresholds.to_vec(),
        map,
        average_map,
        classes,
        warnings,
        curves,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io_formats::{GroundTruthSegment, VideoEntry, VideoMeta};

    fn det(video: &str, s: f64, e: f64, score: f64) -> ClassDetection {
        ClassDetection { video: video.into(), interval: Interval::new(s, e), score }
    }

    fn gt(video: &str, s: f64, e: f64) -> ClassGroundTruth {
        ClassGroundTruth { video: video.into(), interval: Interval::new(s, e) }
    }

    #[test]
    fn tp_fp_tp_is_five_sixths() {
        let gts = [gt("v", 0.0, 0.2), gt("v", 0.5, 0.7)];
        let dets = [det("v", 0.0, 0.2, 0.9), det("v", 0.3, 0.4, 0.8), det("v", 0.5, 0.7, 0.7)];
        let r = average_precision(&dets, &gts, 0.5);
        assert!((r.ap - 5.0 / 6.0).abs() < 1e-15);
        assert_eq!(r.curve, vec![(0.5, 1.0), (0.5, 0.5), (1.0, 2.0 / 3.0)]);
    }

    #[test]
    fn perfect_and_empty() {
        let gts = [gt("a", 0.1, 0.4), gt("b", 0.2, 0.3)];
        let dets = [det("a", 0.1, 0.4, 1.0), det("b", 0.2, 0.3, 1.0)];
        assert_eq!(average_precision(&dets, &gts, 0.95).ap, 1.0);
        assert_eq!(average_precision(&[], &gts, 0.5).ap, 0.0);
        assert_eq!(average_precision(&dets, &[], 0.5).ap, 0.0);
    }

    #[test]
    fn detections_do_not_cross_videos() {
        let gts = [gt("a", 0.1, 0.4)];
        let dets = [det("b", 0.1, 0.4, 1.0)];
        assert_eq!(average_precision(&dets, &gts, 0.5).ap, 0.0);
    }

    #[test]
    fn duplicate_detection_is_a_false_positive() {
        let gts = [gt("a", 0.1, 0.4)];
        let dets = [det("a", 0.1, 0.4, 0.9), det("a", 0.1, 0.4, 0.8)];
        let r = average_precision(&dets, &gts, 0.5);
        assert_eq!(r.ap, 1.0);
        assert_eq!(r.curve[1], (1.0, 0.5));
    }

    fn corpus() -> Corpus {
        let video = |id: &str, segs: Vec<GroundTruthSegment>| VideoEntry {
            meta: VideoMeta { id: id.into(), duration_s: 10.0, fps: 10.0, num_frames: 100 },
            segments: segs,
        };
        let seg = |label_index, start, end| GroundTruthSegment { label_index, start, end };
        Corpus {
            labels: vec!["a".into(), "b".into(), "unused".into()],
            videos: vec![
                video("v1", vec![seg(0, 0.1, 0.3), seg(1, 0.5, 0.9)]),
                video("v2", vec![seg(0, 0.0, 1.0)]),
            ],
        }
    }

    fn replay(c: &Corpus) -> BTreeMap<String, Vec<Detection>> {
        c.videos
            .iter()
            .map(|v| {
                let d = v
                    .segments
                    .iter()
                    .map(|g| Detection { start: g.start, end: g.end, label: g.label_index, score: 1.0 })
                    .collect();
                (v.meta.id.clone(), d)
            })
            .collect()
    }

    #[test]
    fn ground_truth_replay_scores_one() {
        let c = corpus();
        let report = evaluate(&replay(&c), &c, &ACTIVITYNET_THRESHOLDS).unwrap();
        assert_eq!(report.average_map, 1.0);
        assert_eq!(report.thresholds.len(), 10);
        assert_eq!(report.classes.len(), 2);
        assert_eq!(report.warnings.len(), 1);
        assert_eq!(report.map_at(0.5), Some(1.0));
    }

    #[test]
    fn empty_and_unknown_video() {
        let c = corpus();
        let report = evaluate(&BTreeMap::new(), &c, &ACTIVITYNET_THRESHOLDS).unwrap();
        assert_eq!(report.average_map, 0.0);
        let mut bad = BTreeMap::new();
        bad.insert("nope".to_string(), vec![]);
        assert!(matches!(evaluate(&bad, &c, &ACTIVITYNET_THRESHOLDS), Err(Error::Validation(_))));
    }

    #[test]
    fn report_renderings() {
        let c = corpus();
        let report = evaluate(&replay(&c), &c, &ACTIVITYNET_THRESHOLDS).unwrap();
        let table = report.to_table();
        assert!(table.contains("average mAP 1.0000"));
        assert_eq!(table.lines().next().unwrap().split_whitespace().count(), 12);
        let json: serde_json::Value = serde_json::from_str(&report.to_json()).unwrap();
        assert_eq!(json["thresholds"].as_array().unwrap().len(), 10);
        let csv = report.curves_csv();
        assert_eq!(csv.lines().count(), 1 + 10 * 3);
    }
}
