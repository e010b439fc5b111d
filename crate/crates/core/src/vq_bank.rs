//! Per-class FIFO store of final-layer query vectors, and class-balanced
//! replay of those vectors as virtual queries.

use std::collections::{BTreeMap, VecDeque};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::data::ClassId;
use crate::error::{Error, Result};
use crate::matching::Assignment;
use crate::panoptic::PanopticSegment;
use crate::tensor::Tensor;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassQueue {
    pub vectors: VecDeque<Vec<f64>>,
    /// Vectors ever pushed into this queue.
    pub inserted: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VirtualQueryBank {
    pub capacity: usize,
    pub dim: usize,
    pub queues: BTreeMap<ClassId, ClassQueue>,
}

impl VirtualQueryBank {
    pub fn new(capacity: usize, dim: usize) -> Self {
        Self { capacity, dim, queues: BTreeMap::new() }
    }

    pub fn push(&mut self, class: ClassId, vector: &[f64]) -> Result<()> {
        if vector.len() != self.dim {
            return Err(Error::Shape(format!("query of dim {} into bank of dim {}", vector.len(), self.dim)));
        }
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("query for class {class}")));
        }
        if self.capacity == 0 {
            return Ok(());
        }
        let q = self.queues.entry(class).or_default();
        if q.vectors.len() == self.capacity {
            q.vectors.pop_front();
        }
        q.vectors.push_back(vector.to_vec());
        q.inserted += 1;
        Ok(())
    }

    /// Stores the final-layer vector of every matched query in the queue of
    /// its ground-truth class.
    pub fn enqueue_matched(&mut self, final_queries: &Tensor, assignment: &Assignment, gt_classes: &[ClassId]) -> Result<()> {
        for &(q, t) in &assignment.pairs {
            let class = *gt_classes.get(t).ok_or_else(|| Error::InvalidArgument(format!("ground truth {t} out of range")))?;
            self.push(class, final_queries.row(q))?;
        }
        Ok(())
    }

    pub fn len(&self, class: ClassId) -> usize {
        self.queues.get(&class).map_or(0, |q| q.vectors.len())
    }

    pub fn total(&self) -> usize {
        self.queues.values().map(|q| q.vectors.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.total() == 0
    }

    pub fn classes(&self) -> Vec<ClassId> {
        self.queues.iter().filter(|(_, q)| !q.vectors.is_empty()).map(|(&c, _)| c).collect()
    }

    /// Bytes needed to hold a full bank at the given precision.
    pub fn capacity_bytes(&self, bytes_per_real: usize) -> usize {
        storage_bytes(self.capacity, self.queues.len(), self.dim, bytes_per_real)
    }
}

/// `h · |classes| · D · bytes_per_real`.
pub fn storage_bytes(h: usize, classes: usize, dim: usize, bytes_per_real: usize) -> usize {
    h * classes * dim * bytes_per_real
}

/// σ_i: confident predicted instances of each old class, summed over images.
pub fn pseudo_counts<'a>(
    old_classes: &[ClassId],
    predictions: impl IntoIterator<Item = &'a [PanopticSegment]>,
    threshold: f64,
) -> BTreeMap<ClassId, usize> {
    let mut counts: BTreeMap<ClassId, usize> = old_classes.iter().map(|&c| (c, 0)).collect();
    for segments in predictions {
        for s in segments {
            if s.score > threshold {
                if let Some(n) = counts.get_mut(&s.class_id) {
                    *n += 1;
                }
            }
        }
    }
    counts
}

/// ω_j = sqrt(Σσ / σ_j). Classes with σ_j = 0 get the largest finite
/// weight; all-zero counts give uniform weights of 1.
pub fn pseudo_weights(counts: &BTreeMap<ClassId, usize>) -> BTreeMap<ClassId, f64> {
    let total: usize = counts.values().sum();
    if total == 0 {
        return counts.keys().map(|&c| (c, 1.0)).collect();
    }
    let finite = |n: usize| (total as f64 / n as f64).sqrt();
    let max = counts.values().filter(|&&n| n > 0).map(|&n| finite(n)).fold(0.0, f64::max);
    counts.iter().map(|(&c, &n)| (c, if n > 0 { finite(n) } else { max })).collect()
}

/// Replayed vectors with the class of the queue each came from.
#[derive(Clone, Debug, PartialEq)]
pub struct VirtualSample {
    /// `[j × D]`
    pub queries: Tensor,
    pub classes: Vec<ClassId>,
}

impl VirtualSample {
    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }
}

/// Draws `j` vectors: class ∝ ω over non-empty queues, then uniform within
/// the class. Classes without a weight are not sampled.
pub fn sample_virtual(bank: &VirtualQueryBank, weights: &BTreeMap<ClassId, f64>, j: usize, rng: &mut impl Rng) -> VirtualSample {
    let support: Vec<(ClassId, f64)> = bank
        .classes()
        .into_iter()
        .filter_map(|c| weights.get(&c).filter(|&&w| w > 0.0).map(|&w| (c, w)))
        .collect();
    if j == 0 || support.is_empty() {
        if j > 0 {
            log::debug!("virtual query bank has no sampleable class");
        }
        return VirtualSample { queries: Tensor::zeros(0, bank.dim), classes: Vec::new() };
    }
    let dist = WeightedIndex::new(support.iter().map(|s| s.1)).expect("positive weights");
    let mut data = Vec::with_capacity(j * bank.dim);
    let mut classes = Vec::with_capacity(j);
    for _ in 0..j {
        let class = support[dist.sample(rng)].0;
        let queue = &bank.queues[&class].vectors;
        let k = rng.random_range(0..queue.len());
        data.extend_from_slice(&queue[k]);
        classes.push(class);
    }
    VirtualSample { queries: Tensor::from_vec(j, bank.dim, data), classes }
}

/// Cross-entropy of virtual-query class logits against their source classes.
/// `visible` maps class ids to logit columns.
pub fn virtual_class_loss(g: &mut Graph, logits: Var, classes: &[ClassId], visible: &[ClassId]) -> Result<Var> {
    let labels = classes
        .iter()
        .map(|c| visible.iter().position(|v| v == c).ok_or(Error::UnknownClass(*c)))
        .collect::<Result<Vec<usize>>>()?;
    Ok(g.cross_entropy(logits, &labels, &vec![1.0; labels.len()]))
}
