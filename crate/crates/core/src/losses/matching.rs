use crate::blocks::InstancePrediction;
use crate::tensor::Tensor;

/// Minimum mask IoU for a prediction to be paired with a ground truth.
pub const MATCH_IOU: f64 = 0.25;

/// One ground-truth instance. Part instances have `damage == None`; damage
/// instances carry the part they lie on.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceTarget {
    /// Binary `[H, W]` mask.
    pub mask: Tensor,
    pub part: usize,
    pub damage: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MatchResult {
    /// `(prediction, truth)` in the order they were accepted.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_preds: Vec<usize>,
    pub unmatched_truths: Vec<usize>,
}

impl MatchResult {
    pub fn truth_for(&self, pred: usize) -> Option<usize> {
        self.pairs.iter().find(|p| p.0 == pred).map(|p| p.1)
    }
}

/// IoU of two binary masks; zero when both are empty.
pub fn mask_iou(a: &[bool], b: &[bool]) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// `Σ min / Σ max` for non-negative soft masks; zero when both are empty.
pub fn soft_iou(a: &[f64], b: &[f64]) -> f64 {
    let (mut lo, mut hi) = (0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        lo += x.min(y);
        hi += x.max(y);
    }
    if hi == 0.0 {
        0.0
    } else {
        lo / hi
    }
}

/// Greedy assignment on an IoU matrix (`iou[pred][truth]`): repeatedly take
/// the highest remaining pair at or above `threshold`. Ties go to the lower
/// prediction index, then the lower truth index.
pub fn greedy_match(iou: &[Vec<f64>], num_truths: usize, threshold: f64) -> MatchResult {
    let mut cand: Vec<(f64, usize, usize)> = Vec::new();
    for (i, row) in iou.iter().enumerate() {
        for (j, &v) in row.iter().enumerate().take(num_truths) {
            if v >= threshold {
                cand.push((v, i, j));
            }
        }
    }
    cand.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut pred_used = vec![false; iou.len()];
    let mut truth_used = vec![false; num_truths];
    let mut pairs = Vec::new();
    for (_, i, j) in cand {
        if !pred_used[i] && !truth_used[j] {
            pred_used[i] = true;
            truth_used[j] = true;
            pairs.push((i, j));
        }
    }
    MatchResult {
        pairs,
        unmatched_preds: (0..iou.len()).filter(|&i| !pred_used[i]).collect(),
        unmatched_truths: (0..num_truths).filter(|&j| !truth_used[j]).collect(),
    }
}

/// Greedy matching by binarized mask IoU at [`MATCH_IOU`].
pub fn match_instances(preds: &[InstancePrediction], truths: &[InstanceTarget]) -> MatchResult {
    let tb: Vec<Vec<bool>> = truths.iter().map(|t| t.mask.data().iter().map(|&v| v >= 0.5).collect()).collect();
    let iou: Vec<Vec<f64>> = preds
        .iter()
        .map(|p| {
            let pb = p.binary_mask();
            tb.iter().map(|t| mask_iou(&pb, t)).collect()
        })
        .collect();
    greedy_match(&iou, truths.len(), MATCH_IOU)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pred(mask: &[f64]) -> InstancePrediction {
        InstancePrediction {
            mask: Tensor::new(&[1, mask.len()], mask.to_vec()).unwrap(),
            part_probs: vec![1.0, 0.0],
            damage_probs: vec![1.0],
            score: 1.0,
            embedding: vec![],
        }
    }

    fn truth(mask: &[f64]) -> InstanceTarget {
        InstanceTarget {
            mask: Tensor::new(&[1, mask.len()], mask.to_vec()).unwrap(),
            part: 0,
            damage: None,
        }
    }

    #[test]
    fn empty_truths_leave_everything_unmatched() {
        let r = match_instances(&[pred(&[1.0, 0.0]), pred(&[0.0, 1.0])], &[]);
        assert!(r.pairs.is_empty());
        assert_eq!(r.unmatched_preds, vec![0, 1]);
    }

    #[test]
    fn equal_sets_pair_perfectly() {
        let masks = [[1.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0], [0.0, 0.0, 0.0, 1.0]];
        let preds: Vec<_> = masks.iter().map(|m| pred(m)).collect();
        let truths: Vec<_> = masks.iter().rev().map(|m| truth(m)).collect();
        let mut r = match_instances(&preds, &truths);
        r.pairs.sort();
        assert_eq!(r.pairs, vec![(0, 2), (1, 1), (2, 0)]);
        assert!(r.unmatched_preds.is_empty() && r.unmatched_truths.is_empty());
    }

    #[test]
    fn greedy_is_not_hungarian() {
        // Greedy takes (0,0)=0.9 first, leaving 0.3 for (1,1), while the
        // optimal assignment would pick (0,1)+(1,0).
        let iou = vec![vec![0.9, 0.8], vec![0.85, 0.3]];
        let r = greedy_match(&iou, 2, 0.25);
        assert_eq!(r.pairs, vec![(0, 0), (1, 1)]);
        let r = greedy_match(&iou, 2, 0.5);
        assert_eq!(r.pairs, vec![(0, 0)]);
        assert_eq!(r.unmatched_preds, vec![1]);
        assert_eq!(r.unmatched_truths, vec![1]);
    }

    #[test]
    fn iou_edge_cases() {
        assert_eq!(mask_iou(&[false, false], &[false, false]), 0.0);
        assert_eq!(mask_iou(&[true, true], &[true, false]), 0.5);
        assert_eq!(soft_iou(&[0.5, 0.5], &[0.5, 0.5]), 1.0);
    }
}
