//! From raw anchor predictions to final detections: span decoding, scoring
//! and class-wise temporal non-maximum suppression.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Anchor, AnchorPrediction, Dtpn};
use crate::sampling::PyramidFeature;
use crate::tensor::{sigmoid, softmax};

/// A span of normalized time.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Interval {
    pub start: f64,
    pub end: f64,
}

impl Interval {
    pub fn new(start: f64, end: f64) -> Self {
        Self { start, end }
    }

    pub fn length(&self) -> f64 {
        self.end - self.start
    }

    pub fn center(&self) -> f64 {
        0.5 * (self.start + self.end)
    }
}

/// Temporal intersection over union; 0 for disjoint or touching spans.
pub fn tiou(x: &Interval, y: &Interval) -> f64 {
    let inter = (x.end.min(y.end) - x.start.max(y.start)).max(0.0);
    let union = x.length() + y.length() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub start: f64,
    pub end: f64,
    pub label: usize,
    pub score: f64,
}

impl Detection {
    pub fn interval(&self) -> Interval {
        Interval::new(self.start, self.end)
    }
}

/// Decoded span before clipping to `[0, 1]`.
pub fn decode_unclipped(anchor: &Anchor, center_offset: f64, length_offset: f64) -> Interval {
    let center = anchor.center + center_offset * anchor.length;
    let length = anchor.length * length_offset.exp();
    Interval::new(center - length / 2.0, center + length / 2.0)
}

/// Decoded span clipped to `[0, 1]`, or `None` if nothing is left.
pub fn decode_offsets(anchor: &Anchor, center_offset: f64, length_offset: f64) -> Option<Interval> {
    let raw = decode_unclipped(anchor, center_offset, length_offset);
    let clipped = Interval::new(raw.start.max(0.0), raw.end.min(1.0));
    (clipped.start < clipped.end).then_some(clipped)
}

/// Regression targets `(Δc, Δl)` that decode `anchor` onto `target`.
pub fn encode_offsets(anchor: &Anchor, target: &Interval) -> Result<(f64, f64)> {
    if !(target.length() > 0.0) {
        return Err(Error::Validation(format!(
            "cannot encode degenerate span [{}, {}]",
            target.start, target.end
        )));
    }
    Ok((
        (target.center() - anchor.center) / anchor.length,
        (target.length() / anchor.length).ln(),
    ))
}

/// Actionness times class probability.
pub fn score_detection(pred: &AnchorPrediction, class: usize) -> f64 {
    sigmoid(pred.act_logit) * softmax(&pred.class_logits)[class]
}

/// Ranking used by NMS: score descending, then earlier start, smaller label,
/// earlier end.
pub fn detection_order(a: &Detection, b: &Detection) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.start.total_cmp(&b.start))
        .then(a.label.cmp(&b.label))
        .then(a.end.total_cmp(&b.end))
}

/// Greedy class-wise suppression: a detection survives if its tIoU with every
/// higher-ranked survivor of the same class is below `threshold`. At most
/// `top_k` survivors are returned, best first.
pub fn temporal_nms(mut dets: Vec<Detection>, threshold: f64, top_k: usize) -> Vec<Detection> {
    dets.sort_by(detection_order);
    let num_classes = dets.iter().map(|d| d.label + 1).max().unwrap_or(0);
    let mut by_class: Vec<Vec<Detection>> = vec![Vec::new(); num_classes];
    for d in dets {
        let kept = &mut by_class[d.label];
        // Each class list is already in rank order, and only the first
        // `top_k` survivors of any class can make the final cut.
        if kept.len() < top_k && kept.iter().all(|k| tiou(&k.interval(), &d.interval()) < threshold) {
            kept.push(d);
        }
    }
    let mut out: Vec<Detection> = by_class.into_iter().flatten().collect();
    out.sort_by(detection_order);
    out.truncate(top_k);
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectParams {
    pub nms_threshold: f64,
    pub top_k: usize,
    pub score_floor: f64,
}

impl Default for DetectParams {
    fn default() -> Self {
        Self {
            nms_threshold: 0.5,
            top_k: 100,
            score_floor: 0.005,
        }
    }
}

impl DetectParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.nms_threshold) {
            return Err(Error::Config(format!("nms_threshold {} outside [0, 1]", self.nms_threshold)));
        }
        if !(0.0..=1.0).contains(&self.score_floor) {
            return Err(Error::Config(format!("score_floor {} outside [0, 1]", self.score_floor)));
        }
        if self.top_k == 0 {
            return Err(Error::Config("top_k must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// Decode and score every (anchor, class) pair, drop low scores and empty
/// spans, then suppress.
pub fn detections_from_predictions(
    preds: &[AnchorPrediction],
    anchors: &[Anchor],
    params: &DetectParams,
) -> Vec<Detection> {
    let mut candidates = Vec::new();
    for (pred, anchor) in preds.iter().zip(anchors) {
        let Some(span) = decode_offsets(anchor, pred.center_offset, pred.length_offset) else {
            continue;
        };
        let act = sigmoid(pred.act_logit);
        for (label, p) in softmax(&pred.class_logits).into_iter().enumerate() {
            let score = act * p;
            if score.is_finite() && score >= params.score_floor {
                candidates.push(Detection {
                    start: span.start,
                    end: span.end,
                    label,
                    score,
                });
            }
        }
    }
    temporal_nms(candidates, params.nms_threshold, params.top_k)
}

pub fn detect_video(
    pyramid: &PyramidFeature,
    model: &Dtpn<f32>,
    params: &DetectParams,
) -> Result<Vec<Detection>> {
    let pass = model.forward(pyramid)?;
    Ok(detections_from_predictions(
        &pass.predictions(),
        &model.config().anchors(),
        params,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::layout_anchors;
    use proptest::prelude::*;

    fn anchor(center: f64, length: f64) -> Anchor {
        Anchor {
            level: 0,
            cell: 0,
            center,
            length,
        }
    }

    fn det(start: f64, end: f64, label: usize, score: f64) -> Detection {
        Detection {
            start,
            end,
            label,
            score,
        }
    }

    #[test]
    fn identity_offsets_decode_to_anchor() {
        let a = layout_anchors(16)[3];
        assert_eq!(decode_offsets(&a, 0.0, 0.0), Some(a.interval()));
    }

    #[test]
    fn hand_decoded_span() {
        let iv = decode_offsets(&anchor(0.5, 0.25), 0.2, 2f64.ln()).unwrap();
        assert!((iv.start - 0.30).abs() < 1e-12 && (iv.end - 0.80).abs() < 1e-12);
    }

    #[test]
    fn decode_clips_and_flags_empty() {
        let iv = decode_offsets(&anchor(0.05, 0.1), 0.0, 1.0).unwrap();
        assert_eq!(iv.start, 0.0);
        assert_eq!(decode_offsets(&anchor(0.5, 0.1), 20.0, 0.0), None);
    }

    #[test]
    fn encode_examples() {
        let a = anchor(0.5, 1.0 / 16.0);
        assert_eq!(encode_offsets(&a, &a.interval()).unwrap(), (0.0, 0.0));
        let g = Interval::new(0.5 - 1.0 / 16.0, 0.5 + 1.0 / 16.0);
        let (c, l) = encode_offsets(&a, &g).unwrap();
        assert_eq!(c, 0.0);
        assert!((l - 2f64.ln()).abs() < 1e-12);
        assert!(encode_offsets(&a, &Interval::new(0.3, 0.3)).is_err());
    }

    #[test]
    fn uniform_logits_score() {
        let p = AnchorPrediction {
            act_logit: 0.0,
            class_logits: vec![0.0; 4],
            center_offset: 0.0,
            length_offset: 0.0,
        };
        assert!((score_detection(&p, 2) - 0.125).abs() < 1e-15);
    }

    #[test]
    fn saturated_score_approaches_one() {
        let p = AnchorPrediction {
            act_logit: 50.0,
            class_logits: vec![60.0, 0.0, 0.0],
            center_offset: 0.0,
            length_offset: 0.0,
        };
        assert!(score_detection(&p, 0) > 1.0 - 1e-12);
    }

    #[test]
    fn tiou_examples() {
        let a = Interval::new(0.2, 0.6);
        assert_eq!(tiou(&a, &a), 1.0);
        assert!((tiou(&a, &Interval::new(0.4, 0.8)) - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(tiou(&Interval::new(0.0, 0.5), &Interval::new(0.5, 1.0)), 0.0);
    }

    #[test]
    fn nms_suppresses_same_class_overlap() {
        let kept = temporal_nms(vec![det(0.0, 0.5, 0, 0.9), det(0.05, 0.55, 0, 0.8), det(0.6, 0.9, 0, 0.7)], 0.5, 100);
        assert_eq!(kept, vec![det(0.0, 0.5, 0, 0.9), det(0.6, 0.9, 0, 0.7)]);
    }

    #[test]
    fn nms_is_class_wise() {
        let kept = temporal_nms(vec![det(0.1, 0.5, 0, 0.9), det(0.1, 0.5, 1, 0.8)], 0.5, 100);
        assert_eq!(kept.len(), 2);
    }

    #[test]
    fn nms_caps_at_top_k() {
        let dets = (0..10).map(|i| det(i as f64 / 10.0, (i as f64 + 1.0) / 10.0, 0, 0.5)).collect();
        let kept = temporal_nms(dets, 0.5, 3);
        assert_eq!(kept.len(), 3);
        assert_eq!(kept[0].start, 0.0);
    }

    proptest! {
        #[test]
        fn encode_decode_roundtrip(level in 0usize..5, cell_frac in 0.0f64..1.0, c in 0.0f64..1.0, len in 0.001f64..1.0) {
            let anchors = layout_anchors(16);
            let a = anchors.iter().filter(|a| a.level == level).nth(((16 >> level) as f64 * cell_frac) as usize).unwrap();
            let g = Interval::new(c - len / 2.0, c + len / 2.0);
            let (dc, dl) = encode_offsets(a, &g).unwrap();
            let back = decode_unclipped(a, dc, dl);
            prop_assert!((back.start - g.start).abs() < 1e-6);
            prop_assert!((back.end - g.end).abs() < 1e-6);
        }

        #[test]
        fn tiou_symmetric_and_bounded(a in 0.0f64..1.0, la in 0.001f64..1.0, b in 0.0f64..1.0, lb in 0.001f64..1.0) {
            let x = Interval::new(a, a + la);
            let y = Interval::new(b, b + lb);
            let v = tiou(&x, &y);
            prop_assert!((0.0..=1.0).contains(&v));
            prop_assert_eq!(v, tiou(&y, &x));
            prop_assert!((tiou(&x, &x) - 1.0).abs() < 1e-12);
        }
    }
}
