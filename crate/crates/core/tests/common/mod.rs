//! Brute-force oracles shared by the property and acceptance tests.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use contiseg::data::{ClassId, Segment};
use contiseg::matching::assignment_cost;

/// Indices of the `n` largest scores; ties go to the lower index.
pub fn sort_oracle(scores: &[f64], n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    idx.truncate(n);
    idx
}

/// Minimum assignment cost over every injective map of the smaller side into
/// the larger, summed in row order like `assignment_cost`.
pub fn permutation_oracle(cost: &[Vec<f64>]) -> f64 {
    let rows = cost.len();
    let cols = cost[0].len();
    let mut best = f64::INFINITY;
    let mut pick = Vec::new();
    let mut used = vec![false; rows.max(cols)];
    fn go(k: usize, n: usize, pick: &mut Vec<usize>, used: &mut [bool], visit: &mut dyn FnMut(&[usize])) {
        if k == n {
            visit(pick);
            return;
        }
        for j in 0..used.len() {
            if !used[j] {
                used[j] = true;
                pick.push(j);
                go(k + 1, n, pick, used, visit);
                pick.pop();
                used[j] = false;
            }
        }
    }
    let mut visit = |p: &[usize]| {
        let mut pairs: Vec<(usize, usize)> =
            if rows <= cols { p.iter().enumerate().map(|(i, &j)| (i, j)).collect() } else { p.iter().enumerate().map(|(j, &i)| (i, j)).collect() };
        pairs.sort();
        best = best.min(assignment_cost(cost, &pairs));
    };
    if rows <= cols {
        go(0, rows, &mut pick, &mut used[..cols], &mut visit);
    } else {
        go(0, cols, &mut pick, &mut used[..rows], &mut visit);
    }
    best
}

/// Segments from a pixel → instance map (0 = void) and instance → class.
pub fn segments_from(map: &[usize], classes: &[ClassId]) -> Vec<Segment> {
    (1..classes.len())
        .map(|inst| Segment { class_id: classes[inst], mask: map.iter().map(|&m| m == inst).collect() })
        .filter(|s| s.area() > 0)
        .collect()
}

fn set(mask: &[bool]) -> BTreeSet<usize> {
    mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect()
}

/// PQ from pixel sets: every same-class pair with IoU > 0.5 is a match.
pub fn pq_oracle(pred: &[Segment], gt: &[Segment]) -> Option<f64> {
    let mut per: BTreeMap<ClassId, (f64, f64, f64)> = BTreeMap::new();
    let mut pred_hit = vec![false; pred.len()];
    let mut gt_hit = vec![false; gt.len()];
    for (i, p) in pred.iter().enumerate() {
        for (j, g) in gt.iter().enumerate() {
            if p.class_id != g.class_id {
                continue;
            }
            let (a, b) = (set(&p.mask), set(&g.mask));
            let iou = a.intersection(&b).count() as f64 / a.union(&b).count() as f64;
            if iou > 0.5 {
                assert!(!pred_hit[i] && !gt_hit[j], "IoU > 0.5 matching must be one-to-one");
                pred_hit[i] = true;
                gt_hit[j] = true;
                let e = per.entry(p.class_id).or_default();
                e.0 += iou;
                e.1 += 1.0;
            }
        }
    }
    for (p, _) in pred.iter().zip(&pred_hit).filter(|(_, &h)| !h) {
        per.entry(p.class_id).or_default().2 += 0.5;
    }
    for (g, _) in gt.iter().zip(&gt_hit).filter(|(_, &h)| !h) {
        per.entry(g.class_id).or_default().2 += 0.5;
    }
    let vals: Vec<f64> = per.values().map(|(s, tp, half)| s / (tp + half)).collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

pub fn label_map(segs: &[Segment], pixels: usize) -> Vec<Option<ClassId>> {
    let mut out = vec![None; pixels];
    for s in segs {
        for (o, &m) in out.iter_mut().zip(&s.mask) {
            if m {
                *o = Some(s.class_id);
            }
        }
    }
    out
}

pub fn miou_oracle(pred: &[Option<ClassId>], gt: &[Option<ClassId>]) -> Option<f64> {
    let classes: BTreeSet<ClassId> = pred.iter().chain(gt).flatten().copied().collect();
    let vals: Vec<f64> = classes
        .iter()
        .map(|&c| {
            let a: BTreeSet<usize> = (0..pred.len()).filter(|&i| pred[i] == Some(c)).collect();
            let b: BTreeSet<usize> = (0..gt.len()).filter(|&i| gt[i] == Some(c)).collect();
            a.intersection(&b).count() as f64 / a.union(&b).count() as f64
        })
        .collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}
