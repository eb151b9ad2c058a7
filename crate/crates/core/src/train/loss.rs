use serde::{Deserialize, Serialize};

use super::matching::{Assignment, MatchResult};
use crate::tensor::{binary_cross_entropy, cross_entropy_row, smooth_l1, Grad2, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub cls: f64,
    pub loc: f64,
    pub act: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            cls: 1.0,
            loc: 1.0,
            act: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub classification: f64,
    pub localization: f64,
    pub actionness: f64,
    pub num_positives: usize,
    pub num_hard_negatives: usize,
}

/// Multi-task loss over per-level head maps, normalized by `max(1, N_pos)`:
/// softmax cross-entropy on the class logits of positives, Smooth-L1 on their
/// offsets, and binary cross-entropy on actionness for positives plus the
/// `neg_pos_ratio · max(1, N_pos)` negatives with the highest actionness.
///
/// Gradients are written (overwriting) into the `grad` buffers of `heads`.
pub fn multitask_loss<F: Scalar>(
    heads: &mut [Grad2<F>],
    matching: &MatchResult,
    weights: &LossWeights,
    neg_pos_ratio: usize,
) -> LossBreakdown {
    let mut cells = Vec::with_capacity(matching.assignments.len());
    for (level, h) in heads.iter().enumerate() {
        cells.extend((0..h.t()).map(|t| (level, t)));
    }
    assert_eq!(cells.len(), matching.assignments.len(), "predictions and anchors misaligned");
    heads.iter_mut().for_each(Grad2::zero_grad);

    let m = heads[0].c() - 3;
    let num_pos = matching.num_positives();
    let norm = F::one() / F::of(num_pos.max(1) as f64);
    let (w_cls, w_loc, w_act) = (F::of(weights.cls), F::of(weights.loc), F::of(weights.act));
    let mut out = LossBreakdown {
        num_positives: num_pos,
        ..Default::default()
    };
    let (mut cls, mut loc, mut act) = (F::zero(), F::zero(), F::zero());

    for p in &matching.positives {
        let (level, t) = cells[p.anchor];
        let row = heads[level].row(t).to_vec();
        let (ce, g_cls) = cross_entropy_row(&row[1..=m], p.label);
        let target = [F::of(p.center_offset), F::of(p.length_offset)];
        let (sl1, g_loc) = smooth_l1(&row[m + 1..m + 3], &target);
        let (bce, g_act) = binary_cross_entropy(row[0], F::one());
        cls = cls + ce;
        loc = loc + sl1;
        act = act + bce;
        let grad = heads[level].grad_row_mut(t);
        grad[0] = grad[0] + w_act * g_act * norm;
        for (g, d) in grad[1..=m].iter_mut().zip(g_cls) {
            *g = *g + w_cls * d * norm;
        }
        for (g, d) in grad[m + 1..m + 3].iter_mut().zip(g_loc) {
            *g = *g + w_loc * d * norm;
        }
    }

    let mut negatives: Vec<(usize, F)> = matching
        .assignments
        .iter()
        .enumerate()
        .filter(|(_, a)| matches!(a, Assignment::Negative))
        .map(|(j, _)| {
            let (level, t) = cells[j];
            (j, heads[level].row(t)[0])
        })
        .collect();
    negatives.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal).then(a.0.cmp(&b.0)));
    negatives.truncate(neg_pos_ratio * num_pos.max(1));
    for &(j, logit) in &negatives {
        let (level, t) = cells[j];
        let (bce, g) = binary_cross_entropy(logit, F::zero());
        act = act + bce;
        let slot = &mut heads[level].grad_row_mut(t)[0];
        *slot = *slot + w_act * g * norm;
    }

    out.num_hard_negatives = negatives.len();
    out.classification = (cls * norm).as_f64();
    out.localization = (loc * norm).as_f64();
    out.actionness = (act * norm).as_f64();
    out.total = ((w_cls * cls + w_loc * loc + w_act * act) * norm).as_f64();
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io_formats::GroundTruthSegment;
    use crate::model::layout_anchors;
    use crate::train::match_anchors;

    fn zero_heads(base: usize, m: usize) -> Vec<Grad2<f64>> {
        let depth = base.trailing_zeros() as usize + 1;
        (0..depth).map(|i| Grad2::zeros(base >> i, m + 3)).collect()
    }

    #[test]
    fn zero_network_closed_form() {
        let anchors = layout_anchors(16);
        // [0.2, 0.3] is matched to exactly one anchor at threshold 0.5.
        let g = GroundTruthSegment { label_index: 2, start: 0.2, end: 0.3 };
        let matching = match_anchors(&anchors, &[g], 0.5);
        assert_eq!(matching.num_positives(), 1);
        let p = matching.positives[0];
        let mut heads = zero_heads(16, 4);
        let loss = multitask_loss(&mut heads, &matching, &LossWeights::default(), 3);
        let sl1 = |u: f64| if u.abs() < 1.0 { 0.5 * u * u } else { u.abs() - 0.5 };
        let expected_loc = sl1(p.center_offset) + sl1(p.length_offset);
        let expected = 4f64.ln() + expected_loc + 4.0 * 2f64.ln();
        assert!((loss.total - expected).abs() < 1e-12, "{} vs {expected}", loss.total);
        assert_eq!(loss.num_hard_negatives, 3);
    }

    #[test]
    fn perfect_predictions_drive_loss_to_zero() {
        let anchors = layout_anchors(4);
        let g = GroundTruthSegment { label_index: 0, start: 0.0, end: 0.25 };
        let matching = match_anchors(&anchors, &[g], 0.5);
        let mut heads = zero_heads(4, 2);
        let big = 60.0;
        for (j, a) in matching.assignments.iter().enumerate() {
            let (level, t) = if j < 4 { (0, j) } else if j < 6 { (1, j - 4) } else { (2, 0) };
            let row = heads[level].row_mut(t);
            match a {
                Assignment::Positive { .. } => {
                    row[0] = big;
                    row[1] = big;
                }
                Assignment::Negative => row[0] = -big,
            }
        }
        for p in &matching.positives {
            let (level, t) = if p.anchor < 4 { (0, p.anchor) } else if p.anchor < 6 { (1, p.anchor - 4) } else { (2, 0) };
            let row = heads[level].row_mut(t);
            row[3] = p.center_offset;
            row[4] = p.length_offset;
        }
        let loss = multitask_loss(&mut heads, &matching, &LossWeights::default(), 3);
        assert!(loss.total < 1e-20, "{loss:?}");
    }

    #[test]
    fn no_ground_truth_keeps_only_hard_negatives() {
        let anchors = layout_anchors(4);
        let matching = match_anchors(&anchors, &[], 0.5);
        let mut heads = zero_heads(4, 2);
        let loss = multitask_loss(&mut heads, &matching, &LossWeights::default(), 3);
        assert_eq!(loss.num_positives, 0);
        assert_eq!(loss.num_hard_negatives, 3);
        assert!((loss.total - 3.0 * 2f64.ln()).abs() < 1e-12);
        assert_eq!((loss.classification, loss.localization), (0.0, 0.0));
    }
}
