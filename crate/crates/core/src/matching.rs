//! Bipartite matching between predictions and ground truth, the set
//! criterion, and fusion of old-class pseudo labels into annotations.

use crate::autograd::{Graph, Var};
use crate::data::{Annotation, ClassId, Segment};
use crate::panoptic::PanopticSegment;
use crate::tensor::{sigmoid, softmax, Tensor};

/// Query ↔ ground-truth pairs, sorted by query index. Unmatched queries are
/// "no object".
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Assignment {
    pub pairs: Vec<(usize, usize)>,
}

impl Assignment {
    pub fn gt_for_query(&self, q: usize) -> Option<usize> {
        self.pairs.iter().find(|p| p.0 == q).map(|p| p.1)
    }

    pub fn is_injective(&self) -> bool {
        let mut qs: Vec<usize> = self.pairs.iter().map(|p| p.0).collect();
        let mut ys: Vec<usize> = self.pairs.iter().map(|p| p.1).collect();
        qs.sort_unstable();
        ys.sort_unstable();
        qs.windows(2).all(|w| w[0] != w[1]) && ys.windows(2).all(|w| w[0] != w[1])
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CostWeights {
    pub class: f64,
    pub bce: f64,
    pub dice: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        Self { class: 2.0, bce: 5.0, dice: 5.0 }
    }
}

/// Minimum-cost assignment for a rectangular cost matrix (rows × cols).
/// Every row is matched when rows ≤ cols, every column otherwise.
/// Returns `(row, col)` pairs sorted by row.
pub fn hungarian(cost: &[Vec<f64>]) -> Vec<(usize, usize)> {
    let rows = cost.len();
    if rows == 0 {
        return Vec::new();
    }
    let cols = cost[0].len();
    if cols == 0 {
        return Vec::new();
    }
    if rows > cols {
        let t: Vec<Vec<f64>> = (0..cols).map(|c| (0..rows).map(|r| cost[r][c]).collect()).collect();
        let mut pairs: Vec<(usize, usize)> = hungarian(&t).into_iter().map(|(c, r)| (r, c)).collect();
        pairs.sort_unstable();
        return pairs;
    }
    // Shortest augmenting paths with row/column potentials, 1-based with a
    // virtual column 0.
    let (n, m) = (rows, cols);
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut pairs: Vec<(usize, usize)> = (1..=m).filter(|&j| owner[j] != 0).map(|j| (owner[j] - 1, j - 1)).collect();
    pairs.sort_unstable();
    pairs
}

pub fn assignment_cost(cost: &[Vec<f64>], pairs: &[(usize, usize)]) -> f64 {
    pairs.iter().map(|&(r, c)| cost[r][c]).sum()
}

/// Ground truth prepared for the criterion: logit column and float mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Target {
    /// Column in the class logits (position in the visible class list).
    pub label: usize,
    pub mask: Vec<f64>,
}

/// Converts an annotation into criterion targets over `visible`; segments
/// of classes not in `visible` are skipped.
pub fn targets_from(annotation: &Annotation, visible: &[ClassId]) -> Vec<Target> {
    annotation
        .segments
        .iter()
        .filter_map(|s| {
            let label = visible.iter().position(|&c| c == s.class_id)?;
            Some(Target { label, mask: s.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect() })
        })
        .collect()
}

/// `[N × G]` matching cost: weighted −p(class) + mask BCE + mask dice.
pub fn matching_cost(class_logits: &Tensor, mask_logits: &Tensor, targets: &[Target], w: CostWeights) -> Vec<Vec<f64>> {
    let n = class_logits.rows();
    let pixels = mask_logits.cols() as f64;
    let mut cost = vec![vec![0.0; targets.len()]; n];
    for (q, row) in cost.iter_mut().enumerate() {
        let probs = softmax(class_logits.row(q));
        let logits = mask_logits.row(q);
        let sig: Vec<f64> = logits.iter().map(|&x| sigmoid(x)).collect();
        let softplus_sum: f64 = logits.iter().map(|&x| x.max(0.0) + (-x.abs()).exp().ln_1p()).sum();
        let sig_sum: f64 = sig.iter().sum();
        for (t, tgt) in targets.iter().enumerate() {
            let mut xy = 0.0;
            let mut sy = 0.0;
            let mut ysum = 0.0;
            for p in 0..tgt.mask.len() {
                let y = tgt.mask[p];
                xy += logits[p] * y;
                sy += sig[p] * y;
                ysum += y;
            }
            let bce = (softplus_sum - xy) / pixels;
            let dice = 1.0 - (2.0 * sy + 1.0) / (sig_sum + ysum + 1.0);
            row[t] = -w.class * probs[tgt.label] + w.bce * bce + w.dice * dice;
        }
    }
    cost
}

/// Optimal assignment of queries to ground-truth segments.
pub fn hungarian_match(class_logits: &Tensor, mask_logits: &Tensor, targets: &[Target], w: CostWeights) -> Assignment {
    let cost = matching_cost(class_logits, mask_logits, targets, w);
    Assignment { pairs: hungarian(&cost) }
}

/// Unweighted criterion terms; each is a 1×1 node.
#[derive(Clone, Copy, Debug)]
pub struct CriterionTerms {
    pub class: Var,
    pub bce: Option<Var>,
    pub dice: Option<Var>,
}

/// Class cross-entropy over all real queries (unmatched → no-object with
/// weight `no_object_weight`) and BCE + dice over matched masks only.
pub fn set_criterion(
    g: &mut Graph,
    class_logits: Var,
    mask_logits: Var,
    targets: &[Target],
    assignment: &Assignment,
    no_object_weight: f64,
) -> CriterionTerms {
    let (n, k1) = g.value(class_logits).shape();
    let no_object = k1 - 1;
    let mut labels = vec![no_object; n];
    let mut weights = vec![no_object_weight; n];
    for &(q, t) in &assignment.pairs {
        labels[q] = targets[t].label;
        weights[q] = 1.0;
    }
    let class = g.cross_entropy(class_logits, &labels, &weights);
    if assignment.pairs.is_empty() {
        return CriterionTerms { class, bce: None, dice: None };
    }
    let qs: Vec<usize> = assignment.pairs.iter().map(|p| p.0).collect();
    let matched = g.gather_rows(mask_logits, &qs);
    let hw = g.value(mask_logits).cols();
    let mut tm = Tensor::zeros(qs.len(), hw);
    for (r, &(_, t)) in assignment.pairs.iter().enumerate() {
        tm.row_mut(r).copy_from_slice(&targets[t].mask);
    }
    let bce = g.sigmoid_bce(matched, &tm);
    let dice = g.dice(matched, &tm);
    CriterionTerms { class, bce: Some(bce), dice: Some(dice) }
}

/// Adds confident old-class predicted segments to `annotation`, clipped to
/// pixels not already covered by ground truth.
pub fn fuse_pseudo_labels(
    annotation: &Annotation,
    predicted: &[PanopticSegment],
    old_classes: &[ClassId],
    threshold: f64,
) -> Annotation {
    let mut fused = annotation.clone();
    let mut covered = annotation.covered();
    for seg in predicted {
        if seg.score <= threshold || !old_classes.contains(&seg.class_id) {
            continue;
        }
        let mask: Vec<bool> = seg.mask.iter().zip(&covered).map(|(&m, &c)| m && !c).collect();
        if !mask.iter().any(|&m| m) {
            continue;
        }
        for (c, &m) in covered.iter_mut().zip(&mask) {
            *c |= m;
        }
        fused.segments.push(Segment { class_id: seg.class_id, mask });
    }
    fused
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_input_gradient, pseudo_random_tensor};

    #[test]
    fn two_by_two_example() {
        let cost = vec![vec![1.0, 2.0], vec![3.0, 0.0]];
        let pairs = hungarian(&cost);
        assert_eq!(pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(assignment_cost(&cost, &pairs), 1.0);
    }

    #[test]
    fn single_zero_cost_query_is_matched() {
        let cost = vec![vec![3.0], vec![0.0], vec![1.0]];
        assert_eq!(hungarian(&cost), vec![(1, 0)]);
    }

    #[test]
    fn rectangular_and_empty() {
        assert!(hungarian(&[]).is_empty());
        assert!(hungarian(&[vec![], vec![]]).is_empty());
        let cost = vec![vec![5.0, 1.0, 3.0]];
        assert_eq!(hungarian(&cost), vec![(0, 1)]);
    }

    #[test]
    fn criterion_closed_forms() {
        // all unmatched with uniform logits over K+1 = 4 slots
        let mut g = Graph::new();
        let cl = g.input(Tensor::zeros(3, 4));
        let ml = g.input(Tensor::zeros(3, 4));
        let t = set_criterion(&mut g, cl, ml, &[], &Assignment::default(), 0.1);
        assert!((g.value(t.class).item() - 4f64.ln()).abs() < 1e-12);
        assert!(t.bce.is_none());

        // one query, 2×2 mask with logits (2, -1, 0, 1) and target (1, 0, 0, 1)
        let mut g = Graph::new();
        let cl = g.input(Tensor::from_vec(1, 2, vec![0.0, 0.0]));
        let logits = [2.0f64, -1.0, 0.0, 1.0];
        let y = [1.0f64, 0.0, 0.0, 1.0];
        let ml = g.input(Tensor::from_vec(1, 4, logits.to_vec()));
        let tgt = vec![Target { label: 0, mask: y.to_vec() }];
        let t = set_criterion(&mut g, cl, ml, &tgt, &Assignment { pairs: vec![(0, 0)] }, 0.1);
        let s: Vec<f64> = logits.iter().map(|&x| 1.0 / (1.0 + (-x).exp())).collect();
        let bce: f64 = (0..4).map(|i| -(y[i] * s[i].ln() + (1.0 - y[i]) * (1.0 - s[i]).ln())).sum::<f64>() / 4.0;
        let num = 2.0 * (s[0] + s[3]) + 1.0;
        let den = s.iter().sum::<f64>() + 2.0 + 1.0;
        assert!((g.value(t.bce.unwrap()).item() - bce).abs() < 1e-12);
        assert!((g.value(t.dice.unwrap()).item() - (1.0 - num / den)).abs() < 1e-12);
        assert!((g.value(t.class).item() - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn saturated_perfect_masks_have_vanishing_mask_loss() {
        let mut g = Graph::new();
        let y = vec![1.0, 0.0, 1.0, 0.0];
        let cl = g.input(Tensor::from_vec(1, 2, vec![50.0, -50.0]));
        let ml = g.input(Tensor::from_vec(1, 4, y.iter().map(|&v| if v > 0.5 { 60.0 } else { -60.0 }).collect()));
        let t = set_criterion(&mut g, cl, ml, &[Target { label: 0, mask: y }], &Assignment { pairs: vec![(0, 0)] }, 0.1);
        assert!(g.value(t.bce.unwrap()).item() < 1e-20);
        assert!(g.value(t.dice.unwrap()).item() < 1e-12);
        assert!(g.value(t.class).item() < 1e-20);
    }

    #[test]
    fn criterion_gradient_matches_finite_differences() {
        let tgt = vec![
            Target { label: 1, mask: vec![1., 0., 0., 1., 1., 0.] },
            Target { label: 0, mask: vec![0., 1., 1., 0., 0., 0.] },
        ];
        let assignment = Assignment { pairs: vec![(0, 1), (2, 0)] };
        let classes = pseudo_random_tensor(3, 3, 4);
        let r = check_input_gradient(
            &|g, ml| {
                let cl = g.constant(classes.clone());
                let t = set_criterion(g, cl, ml, &tgt, &assignment, 0.1);
                g.weighted_sum(&[(t.class, 2.0), (t.bce.unwrap(), 5.0), (t.dice.unwrap(), 5.0)])
            },
            &pseudo_random_tensor(3, 6, 7),
            1e-6,
        );
        assert!(r.max_rel_err < 1e-6, "{r:?}");
    }

    #[test]
    fn matching_prefers_correct_mask_and_class() {
        let tgt = vec![Target { label: 1, mask: vec![1., 1., 0., 0.] }, Target { label: 0, mask: vec![0., 0., 1., 1.] }];
        let cl = Tensor::from_rows(&[vec![5.0, -5.0, 0.0], vec![-5.0, 5.0, 0.0], vec![0.0, 0.0, 5.0]]);
        let ml = Tensor::from_rows(&[vec![-9., -9., 9., 9.], vec![9., 9., -9., -9.], vec![0.0; 4]]);
        let a = hungarian_match(&cl, &ml, &tgt, CostWeights::default());
        assert_eq!(a.pairs, vec![(0, 1), (1, 0)]);
        assert!(a.is_injective());
    }

    fn ann(segments: Vec<(ClassId, Vec<bool>)>) -> Annotation {
        Annotation {
            image_id: "a".into(),
            height: 2,
            width: 5,
            segments: segments.into_iter().map(|(class_id, mask)| Segment { class_id, mask }).collect(),
        }
    }

    #[test]
    fn pseudo_label_fusion() {
        let gt = ann(vec![(9, vec![true, true, true, false, false, true, true, true, false, false])]);
        assert_eq!(fuse_pseudo_labels(&gt, &[], &[1, 2], 0.5), gt);
        let disjoint = PanopticSegment { class_id: 1, score: 0.9, mask: vec![false, false, false, true, true, false, false, false, false, false] };
        let fused = fuse_pseudo_labels(&gt, std::slice::from_ref(&disjoint), &[1, 2], 0.5);
        assert_eq!(fused.segments.len(), 2);
        // not confident, or not an old class
        let weak = PanopticSegment { score: 0.4, ..disjoint.clone() };
        assert_eq!(fuse_pseudo_labels(&gt, &[weak], &[1, 2], 0.5).segments.len(), 1);
        let new_class = PanopticSegment { class_id: 9, ..disjoint };
        assert_eq!(fuse_pseudo_labels(&gt, &[new_class], &[1, 2], 0.5).segments.len(), 1);
    }

    #[test]
    fn overlapping_pseudo_segment_is_clipped_pixelwise() {
        // 10 predicted pixels, 6 of which lie on ground truth
        let gt_mask: Vec<bool> = (0..10).map(|i| i < 6).collect();
        let pred_mask = vec![true; 10];
        let gt = ann(vec![(7, gt_mask.clone())]);
        let seg = PanopticSegment { class_id: 2, score: 0.8, mask: pred_mask.clone() };
        let fused = fuse_pseudo_labels(&gt, &[seg], &[2], 0.5);
        // pixel-set oracle: pred \ gt
        let expected: Vec<bool> = pred_mask.iter().zip(&gt_mask).map(|(&p, &g)| p && !g).collect();
        assert_eq!(fused.segments[1].mask, expected);
        assert_eq!(fused.segments[0], gt.segments[0]);
    }
}
