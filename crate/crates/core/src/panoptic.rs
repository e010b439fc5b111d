//! Turning query predictions into non-overlapping panoptic segments.

use serde::{Deserialize, Serialize};

use crate::data::{ClassId, Segment};
use crate::tensor::{sigmoid, softmax, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PanopticSegment {
    pub class_id: ClassId,
    pub score: f64,
    pub mask: Vec<bool>,
}

impl PanopticSegment {
    pub fn area(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn to_segment(&self) -> Segment {
        Segment { class_id: self.class_id, mask: self.mask.clone() }
    }
}

/// Per-pixel class from non-overlapping segments; `None` where no segment.
pub fn label_map(segments: &[Segment], pixels: usize) -> Vec<Option<ClassId>> {
    let mut map = vec![None; pixels];
    for s in segments {
        for (p, &m) in s.mask.iter().enumerate() {
            if m {
                map[p] = Some(s.class_id);
            }
        }
    }
    map
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InferenceParams {
    /// Queries whose best class probability is at or below this are dropped.
    pub score_threshold: f64,
    /// A segment survives when at least this fraction of its own mask wins
    /// the per-pixel argmax.
    pub overlap_threshold: f64,
}

impl Default for InferenceParams {
    fn default() -> Self {
        Self { score_threshold: 0.5, overlap_threshold: 0.8 }
    }
}

/// Non-overlapping segments from `[N × (|visible|+1)]` class logits and
/// `[N × P]` mask logits.
pub fn panoptic_inference(
    class_logits: &Tensor,
    mask_logits: &Tensor,
    visible: &[ClassId],
    params: InferenceParams,
) -> Vec<PanopticSegment> {
    let pixels = mask_logits.cols();
    let mut keep = Vec::new();
    for q in 0..class_logits.rows() {
        let probs = softmax(class_logits.row(q));
        let (best, &score) = probs[..visible.len()]
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
            .expect("at least one visible class");
        if score > params.score_threshold {
            keep.push((q, visible[best], score));
        }
    }
    if keep.is_empty() {
        return Vec::new();
    }
    let probs: Vec<Vec<f64>> = keep.iter().map(|&(q, _, _)| mask_logits.row(q).iter().map(|&x| sigmoid(x)).collect()).collect();
    let mut owner = vec![usize::MAX; pixels];
    for (p, o) in owner.iter_mut().enumerate() {
        let mut best = f64::NEG_INFINITY;
        for (k, &(_, _, score)) in keep.iter().enumerate() {
            let v = score * probs[k][p];
            if v > best {
                best = v;
                *o = k;
            }
        }
    }
    let mut segments = Vec::new();
    for (k, &(_, class_id, score)) in keep.iter().enumerate() {
        let original = probs[k].iter().filter(|&&m| m >= 0.5).count();
        let mask: Vec<bool> = (0..pixels).map(|p| owner[p] == k && probs[k][p] >= 0.5).collect();
        let area = mask.iter().filter(|&&m| m).count();
        if original == 0 || area == 0 || (area as f64) < params.overlap_threshold * original as f64 {
            continue;
        }
        segments.push(PanopticSegment { class_id, score, mask });
    }
    segments
}
