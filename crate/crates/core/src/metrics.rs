//! Panoptic quality, mean IoU, and base/new/all/avg reporting groups.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{ClassId, Segment};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PqStats {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub iou_sum: f64,
}

impl PqStats {
    /// `None` when the class never occurs on either side.
    pub fn pq(&self) -> Option<f64> {
        let den = self.tp as f64 + 0.5 * (self.fp + self.fn_) as f64;
        (den > 0.0).then(|| self.iou_sum / den)
    }

    pub fn merge(&mut self, other: &PqStats) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.iou_sum += other.iou_sum;
    }
}

pub fn iou(a: &[bool], b: &[bool]) -> f64 {
    let mut inter = 0usize;
    let mut union = 0usize;
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

/// Per-class PQ counts accumulated over images.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PqAccumulator {
    pub per_class: BTreeMap<ClassId, PqStats>,
}

impl PqAccumulator {
    /// Same-class pairs with IoU > 0.5 are true positives. With
    /// non-overlapping segments on each side such a pair is unique.
    pub fn add_image(&mut self, pred: &[Segment], gt: &[Segment]) {
        let mut pred_used = vec![false; pred.len()];
        let mut gt_used = vec![false; gt.len()];
        for (gi, g) in gt.iter().enumerate() {
            for (pi, p) in pred.iter().enumerate() {
                if pred_used[pi] || p.class_id != g.class_id {
                    continue;
                }
                let v = iou(&p.mask, &g.mask);
                if v > 0.5 {
                    pred_used[pi] = true;
                    gt_used[gi] = true;
                    let s = self.per_class.entry(g.class_id).or_default();
                    s.tp += 1;
                    s.iou_sum += v;
                    break;
                }
            }
        }
        for (g, _) in gt.iter().zip(&gt_used).filter(|(_, &u)| !u) {
            self.per_class.entry(g.class_id).or_default().fn_ += 1;
        }
        for (p, _) in pred.iter().zip(&pred_used).filter(|(_, &u)| !u) {
            self.per_class.entry(p.class_id).or_default().fp += 1;
        }
    }

    pub fn merge(&mut self, other: &PqAccumulator) {
        for (c, s) in &other.per_class {
            self.per_class.entry(*c).or_default().merge(s);
        }
    }

    pub fn per_class_pq(&self) -> BTreeMap<ClassId, f64> {
        self.per_class.iter().filter_map(|(&c, s)| s.pq().map(|v| (c, v))).collect()
    }

    /// Mean over classes present on either side.
    pub fn pq(&self) -> Option<f64> {
        mean(self.per_class_pq().values().copied())
    }
}

/// PQ of a single image.
pub fn panoptic_quality(pred: &[Segment], gt: &[Segment]) -> Option<f64> {
    let mut acc = PqAccumulator::default();
    acc.add_image(pred, gt);
    acc.pq()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IouStats {
    pub intersection: usize,
    pub union: usize,
}

/// Per-class intersection and union of label maps accumulated over images.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IouAccumulator {
    pub per_class: BTreeMap<ClassId, IouStats>,
}

impl IouAccumulator {
    pub fn add_image(&mut self, pred: &[Option<ClassId>], gt: &[Option<ClassId>]) {
        assert_eq!(pred.len(), gt.len(), "label maps differ in size");
        for (&p, &g) in pred.iter().zip(gt) {
            if p == g {
                if let Some(c) = p {
                    let s = self.per_class.entry(c).or_default();
                    s.intersection += 1;
                    s.union += 1;
                }
                continue;
            }
            for c in [p, g].into_iter().flatten() {
                self.per_class.entry(c).or_default().union += 1;
            }
        }
    }

    pub fn merge(&mut self, other: &IouAccumulator) {
        for (c, s) in &other.per_class {
            let e = self.per_class.entry(*c).or_default();
            e.intersection += s.intersection;
            e.union += s.union;
        }
    }

    pub fn per_class_iou(&self) -> BTreeMap<ClassId, f64> {
        self.per_class
            .iter()
            .filter(|(_, s)| s.union > 0)
            .map(|(&c, s)| (c, s.intersection as f64 / s.union as f64))
            .collect()
    }

    pub fn miou(&self) -> Option<f64> {
        mean(self.per_class_iou().values().copied())
    }
}

/// mIoU of one pair of label maps over the classes occurring in either.
pub fn mean_iou(pred: &[Option<ClassId>], gt: &[Option<ClassId>]) -> Option<f64> {
    let mut acc = IouAccumulator::default();
    acc.add_image(pred, gt);
    acc.miou()
}

pub fn mean(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.into_iter().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    pub base: Option<f64>,
    pub new: Option<f64>,
    pub all: Option<f64>,
    pub avg: Option<f64>,
}

impl GroupReport {
    pub fn groups(&self) -> [(&'static str, Option<f64>); 4] {
        [("base", self.base), ("new", self.new), ("all", self.all), ("avg", self.avg)]
    }
}

/// Groups a per-class metric after stage `t` (1-based) of a plan whose
/// stage class lists are `stages`. `previous_all` holds the "all" values of
/// stages 1..t-1, so `avg` is the mean of "all" over stages 1..=t.
pub fn group_report(per_class: &BTreeMap<ClassId, f64>, stages: &[Vec<ClassId>], t: usize, previous_all: &[f64]) -> GroupReport {
    let pick = |classes: &mut dyn Iterator<Item = &ClassId>| mean(classes.filter_map(|c| per_class.get(c).copied()));
    let base = pick(&mut stages[0].iter());
    let new = pick(&mut stages[1..t].iter().flatten());
    let all = pick(&mut stages[..t].iter().flatten());
    let avg = all.and_then(|a| mean(previous_all.iter().copied().chain([a])));
    GroupReport { base, new, all, avg }
}
