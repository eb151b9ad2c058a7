//! Brute-force reference evaluator. Written separately from the main path on
//! purpose: selection-sort ranking, full scans for matching and AP as the
//! area under the step-wise precision/recall curve.

use std::collections::BTreeMap;

use super::{ClassReport, EvalReport};
use crate::error::{Error, Result};
use crate::io_formats::Corpus;
use crate::postprocess::Detection;

struct Item<'a> {
    video: &'a str,
    start: f64,
    end: f64,
    score: f64,
}

fn overlap(a: (f64, f64), b: (f64, f64)) -> f64 {
    let lo = if a.0 > b.0 { a.0 } else { b.0 };
    let hi = if a.1 < b.1 { a.1 } else { b.1 };
    let inter = if hi > lo { hi - lo } else { 0.0 };
    let union = (a.1 - a.0) + (b.1 - b.0) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

fn outranks(a: &Item, b: &Item) -> bool {
    if a.score != b.score {
        return a.score > b.score;
    }
    if a.start != b.start {
        return a.start < b.start;
    }
    if a.video != b.video {
        return a.video < b.video;
    }
    a.end < b.end
}

fn class_ap(items: &[Item], gts: &[(&str, f64, f64)], tau: f64) -> f64 {
    if gts.is_empty() {
        return 0.0;
    }
    let mut remaining: Vec<usize> = (0..items.len()).collect();
    let mut used = vec![false; gts.len()];
    let mut hits = Vec::with_capacity(items.len());
    while !remaining.is_empty() {
        let mut pick = 0;
        for r in 1..remaining.len() {
            if outranks(&items[remaining[r]], &items[remaining[pick]]) {
                pick = r;
            }
        }
        let d = &items[remaining.remove(pick)];
        let mut best = None;
        let mut best_iou = -1.0;
        for (k, g) in gts.iter().enumerate() {
            if used[k] || g.0 != d.video {
                continue;
            }
            let iou = overlap((d.start, d.end), (g.1, g.2));
            if iou >= tau && iou > best_iou {
                best_iou = iou;
                best = Some(k);
            }
        }
        if let Some(k) = best {
            used[k] = true;
        }
        hits.push(best.is_some());
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    let mut tp = 0.0;
    for (i, hit) in hits.iter().enumerate() {
        if *hit {
            tp += 1.0;
        }
        let recall = tp / gts.len() as f64;
        let precision = tp / (i + 1) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    ap
}

/// Reference mAP report for small instances; curves are left empty.
pub fn oracle_evaluate(
    results: &BTreeMap<String, Vec<Detection>>,
    corpus: &Corpus,
    thresholds: &[f64],
) -> Result<EvalReport> {
    let m = corpus.labels.len();
    let mut map = vec![0.0; thresholds.len()];
    let mut classes = Vec::new();
    let mut warnings = Vec::new();
    for id in results.keys() {
        if !corpus.videos.iter().any(|v| &v.meta.id == id) {
            return Err(Error::Validation(format!("detections reference unknown video id {id:?}")));
        }
    }
    for c in 0..m {
        let items: Vec<Item> = results
            .iter()
            .flat_map(|(id, list)| {
                list.iter().filter(|d| d.label == c).map(move |d| Item {
                    video: id.as_str(),
                    start: d.start,
                    end: d.end,
                    score: d.score,
                })
            })
            .collect();
        let gts: Vec<(&str, f64, f64)> = corpus
            .videos
            .iter()
            .flat_map(|v| {
                v.segments
                    .iter()
                    .filter(|g| g.label_index == c)
                    .map(move |g| (v.meta.id.as_str(), g.start, g.end))
            })
            .collect();
        if gts.is_empty() {
            warnings.push(format!("class {:?} has no ground truth; excluded from mAP", corpus.labels[c]));
            continue;
        }
        let aps: Vec<f64> = thresholds.iter().map(|&t| class_ap(&items, &gts, t)).collect();
        classes.push(ClassReport {
            label: corpus.labels[c].clone(),
            num_ground_truth: gts.len(),
            num_detections: items.len(),
            ap: aps,
        });
    }
    for cr in &classes {
        for (slot, ap) in map.iter_mut().zip(&cr.ap) {
            *slot += ap / classes.len() as f64;
        }
    }
    let average_map = if thresholds.is_empty() {
        0.0
    } else {
        map.iter().sum::<f64>() / thresholds.len() as f64
    };
    Ok(EvalReport {
        thresholds: thresholds.to_vec(),
        map,
        average_map,
        classes,
        warnings,
        curves: Vec::new(),
    })
}
