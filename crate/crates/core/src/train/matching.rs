use crate::io_formats::GroundTruthSegment;
use crate::model::Anchor;
use crate::postprocess::{encode_offsets, tiou};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Assignment {
    Positive { gt: usize },
    Negative,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PositiveTarget {
    pub anchor: usize,
    pub gt: usize,
    pub label: usize,
    pub center_offset: f64,
    pub length_offset: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult {
    pub assignments: Vec<Assignment>,
    /// Ordered by anchor index.
    pub positives: Vec<PositiveTarget>,
}

impl MatchResult {
    pub fn num_positives(&self) -> usize {
        self.positives.len()
    }
}

/// Best index by value, ties to the lower index.
fn argmax<I: Iterator<Item = (usize, f64)>>(it: I) -> Option<(usize, f64)> {
    it.fold(None, |best, (i, v)| match best {
        Some((_, bv)) if v <= bv => best,
        _ => Some((i, v)),
    })
}

/// Single-shot matching of anchors to ground truth.
///
/// First every ground truth claims its best anchor (highest tIoU, ties to the
/// lower level and cell); ground truths are served in order of their best
/// tIoU so a contested anchor goes to the closer fit and the other one falls
/// back to its next best unclaimed anchor. Then any unclaimed anchor whose
/// best tIoU reaches `threshold` becomes positive for that ground truth.
/// Everything else is negative. Zero-length ground truths are ignored.
pub fn match_anchors(anchors: &[Anchor], gts: &[GroundTruthSegment], threshold: f64) -> MatchResult {
    let gts: Vec<(usize, &GroundTruthSegment)> =
        gts.iter().enumerate().filter(|(_, g)| g.end > g.start).collect();
    let overlap: Vec<Vec<f64>> = gts
        .iter()
        .map(|(_, g)| anchors.iter().map(|a| tiou(&a.interval(), &g.interval())).collect())
        .collect();

    let mut assignments = vec![Assignment::Negative; anchors.len()];
    let mut order: Vec<usize> = (0..gts.len()).collect();
    let best: Vec<f64> = overlap
        .iter()
        .map(|row| row.iter().copied().fold(0.0, f64::max))
        .collect();
    order.sort_by(|&a, &b| best[b].total_cmp(&best[a]).then(a.cmp(&b)));
    for k in order {
        let free = overlap[k]
            .iter()
            .copied()
            .enumerate()
            .filter(|&(j, v)| v > 0.0 && matches!(assignments[j], Assignment::Negative));
        if let Some((j, _)) = argmax(free) {
            assignments[j] = Assignment::Positive { gt: k };
        }
    }
    for j in 0..anchors.len() {
        if !matches!(assignments[j], Assignment::Negative) {
            continue;
        }
        if let Some((k, v)) = argmax(overlap.iter().map(|row| row[j]).enumerate()) {
            if v >= threshold {
                assignments[j] = Assignment::Positive { gt: k };
            }
        }
    }

    let mut positives = Vec::new();
    for (j, a) in assignments.iter_mut().enumerate() {
        if let Assignment::Positive { gt: k } = *a {
            let (orig, g) = gts[k];
            let (dc, dl) = encode_offsets(&anchors[j], &g.interval())
                .expect("zero-length ground truths are filtered out");
            *a = Assignment::Positive { gt: orig };
            positives.push(PositiveTarget {
                anchor: j,
                gt: orig,
                label: g.label_index,
                center_offset: dc,
                length_offset: dl,
            });
        }
    }
    MatchResult {
        assignments,
        positives,
    }
}
