//! Query pre-alignment: class prototypes score every feature point and the
//! top-scoring points become the decoder's initial queries.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Graph, Var};
use crate::data::ClassId;
use crate::error::{Error, Result};
use crate::model::MultiScaleFeatureMap;
use crate::tensor::{self, Tensor};

/// Trainable per-class vectors, append-only across stages.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeSet {
    /// `[|classes| × D]`
    pub vectors: Tensor,
    pub class_ids: Vec<ClassId>,
    pub stage_of: Vec<usize>,
}

#[derive(Clone, Copy, Debug)]
pub enum PrototypeInit {
    Zeros,
    Normal { std: f64 },
}

impl PrototypeSet {
    pub fn empty(dim: usize) -> Self {
        Self { vectors: Tensor::zeros(0, dim), class_ids: Vec::new(), stage_of: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.class_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    pub fn position(&self, class: ClassId) -> Option<usize> {
        self.class_ids.iter().position(|&c| c == class)
    }
}

/// Appends one prototype per new class after the previous ones.
pub fn concat_prototypes(
    previous: &PrototypeSet,
    new_classes: &[ClassId],
    stage: usize,
    init: PrototypeInit,
    rng: &mut impl Rng,
) -> Result<PrototypeSet> {
    let mut class_ids = previous.class_ids.clone();
    for &c in new_classes {
        if class_ids.contains(&c) {
            return Err(Error::DuplicateClass(c));
        }
        class_ids.push(c);
    }
    let dim = previous.dim();
    let mut fresh = Tensor::zeros(new_classes.len(), dim);
    if let PrototypeInit::Normal { std } = init {
        let normal = Normal::new(0.0, std).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        for v in fresh.data_mut() {
            *v = normal.sample(rng);
        }
    }
    let vectors = Tensor::concat_rows(&[&previous.vectors, &fresh]);
    let mut stage_of = previous.stage_of.clone();
    stage_of.extend(std::iter::repeat_n(stage, new_classes.len()));
    Ok(PrototypeSet { vectors, class_ids, stage_of })
}

/// Position `(l, h, w)` in the multi-scale feature map. The derived ordering
/// is lexicographic, which is also the flat Ω order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Location {
    pub level: usize,
    pub h: usize,
    pub w: usize,
}

/// Per-location score over Ω, stored in flat Ω order.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreField {
    pub sizes: Vec<(usize, usize)>,
    pub scores: Vec<f64>,
}

impl ScoreField {
    pub fn location(&self, flat: usize) -> Location {
        let mut rem = flat;
        for (level, &(h, w)) in self.sizes.iter().enumerate() {
            if rem < h * w {
                return Location { level, h: rem / w, w: rem % w };
            }
            rem -= h * w;
        }
        panic!("flat index {flat} outside Ω")
    }

    pub fn flat_index(&self, loc: Location) -> usize {
        let offset: usize = self.sizes[..loc.level].iter().map(|(h, w)| h * w).sum();
        offset + loc.h * self.sizes[loc.level].1 + loc.w
    }
}

/// Selected positions, best first.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectionIndex {
    pub triples: Vec<Location>,
    /// Flat Ω index of each triple.
    pub flat: Vec<usize>,
    pub scores: Vec<f64>,
}

impl SelectionIndex {
    pub fn len(&self) -> usize {
        self.flat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flat.is_empty()
    }
}

/// Features gathered from one stage's map at another stage's selection.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectedFeatureSet {
    /// `[K × D]`
    pub features: Tensor,
    pub source_index: SelectionIndex,
    pub features_stage: usize,
    pub index_stage: usize,
}

/// Score of every location: the maximum dot product with any prototype.
pub fn score_features(features: &MultiScaleFeatureMap, prototypes: &PrototypeSet) -> Result<ScoreField> {
    if prototypes.is_empty() {
        return Err(Error::InvalidArgument("empty prototype set".into()));
    }
    if features.dim() != prototypes.dim() {
        return Err(Error::Shape(format!(
            "feature dim {} vs prototype dim {}",
            features.dim(),
            prototypes.dim()
        )));
    }
    let mut scores = Vec::with_capacity(features.omega_len());
    for level in &features.levels {
        let sims = tensor::matmul_t(level, &prototypes.vectors);
        for r in 0..sims.rows() {
            scores.push(sims.row(r).iter().cloned().fold(f64::NEG_INFINITY, f64::max));
        }
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("prototype scores".into()));
    }
    Ok(ScoreField { sizes: features.sizes.clone(), scores })
}

/// The `n` highest-scoring locations; ties go to the lexicographically
/// smallest `(l, h, w)`.
pub fn select_topk(scores: &ScoreField, n: usize) -> Result<SelectionIndex> {
    let total = scores.scores.len();
    if n > total {
        return Err(Error::InvalidArgument(format!("top-{n} requested from |Ω| = {total}")));
    }
    let mut order: Vec<usize> = (0..total).collect();
    let cmp = |a: &usize, b: &usize| scores.scores[*b].total_cmp(&scores.scores[*a]).then(a.cmp(b));
    if n < total {
        order.select_nth_unstable_by(n, cmp);
        order.truncate(n);
    }
    order.sort_unstable_by(cmp);
    Ok(SelectionIndex {
        triples: order.iter().map(|&i| scores.location(i)).collect(),
        scores: order.iter().map(|&i| scores.scores[i]).collect(),
        flat: order,
    })
}

/// Scores then selects; the full selection pipeline.
pub fn select(features: &MultiScaleFeatureMap, prototypes: &PrototypeSet, n: usize) -> Result<SelectionIndex> {
    select_topk(&score_features(features, prototypes)?, n)
}

/// Copies the selected rows of the flat Ω feature node into a query node.
/// With `barrier` the copy carries no gradient back into the features.
pub fn initialize_queries(g: &mut Graph, omega: Var, index: &SelectionIndex, barrier: bool) -> Result<Var> {
    let rows = g.value(omega).rows();
    if let Some(&bad) = index.flat.iter().find(|&&i| i >= rows) {
        return Err(Error::InvalidArgument(format!("selection index {bad} outside Ω of size {rows}")));
    }
    let q = g.gather_rows(omega, &index.flat);
    Ok(if barrier { g.stop_grad(q) } else { q })
}

pub fn gather_selected(
    features: &MultiScaleFeatureMap,
    index: &SelectionIndex,
    features_stage: usize,
    index_stage: usize,
) -> SelectedFeatureSet {
    let omega = features.omega();
    SelectedFeatureSet {
        features: omega.gather_rows(&index.flat),
        source_index: index.clone(),
        features_stage,
        index_stage,
    }
}

/// Cross-entropy of each selected feature against its matched class, over
/// prototype similarities plus a fixed zero logit for "no object".
/// `targets[k]` is a row of `prototypes`, or `None` for unmatched points.
pub fn prototype_selection_loss(
    g: &mut Graph,
    selected: Var,
    prototypes: Var,
    targets: &[Option<usize>],
) -> Result<Var> {
    let k = g.value(prototypes).rows();
    if g.value(selected).rows() != targets.len() {
        return Err(Error::Shape("one target per selected feature expected".into()));
    }
    if let Some(bad) = targets.iter().flatten().find(|&&t| t >= k) {
        return Err(Error::UnknownClass(*bad as ClassId));
    }
    let sims = g.matmul_t(selected, prototypes);
    let zero = g.constant(Tensor::zeros(targets.len(), 1));
    let logits = g.concat_cols(sims, zero);
    let t: Vec<usize> = targets.iter().map(|t| t.unwrap_or(k)).collect();
    Ok(g.cross_entropy(logits, &t, &vec![1.0; t.len()]))
}

/// Class under the centre pixel of every location of Ω, in Ω order.
pub fn point_labels(sizes: &[(usize, usize)], labels: &[Option<ClassId>], height: usize, width: usize) -> Vec<Option<ClassId>> {
    assert_eq!(labels.len(), height * width, "label map size");
    let mut out = Vec::new();
    for &(h, w) in sizes {
        for i in 0..h {
            for j in 0..w {
                let y = (2 * i + 1) * height / (2 * h);
                let x = (2 * j + 1) * width / (2 * w);
                out.push(labels[y * width + x]);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn point_labels_use_cell_centres() {
        // 4×4 labels, one 2×2 level: centres (1,1),(1,3),(3,1),(3,3)
        let mut labels = vec![None; 16];
        labels[4 + 1] = Some(7);
        labels[3 * 4 + 3] = Some(2);
        assert_eq!(point_labels(&[(2, 2)], &labels, 4, 4), vec![Some(7), None, None, Some(2)]);
        let mut labels = vec![None; 16];
        labels[2 * 4 + 2] = Some(7);
        assert_eq!(point_labels(&[(1, 1), (2, 2)], &labels, 4, 4), vec![Some(7), None, None, None, None]);
    }

    fn map(levels: Vec<(usize, usize, Vec<f64>)>, dim: usize) -> MultiScaleFeatureMap {
        MultiScaleFeatureMap {
            sizes: levels.iter().map(|(h, w, _)| (*h, *w)).collect(),
            levels: levels.into_iter().map(|(h, w, d)| Tensor::from_vec(h * w, dim, d)).collect(),
        }
    }

    #[test]
    fn concat_prototypes_appends() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let base = concat_prototypes(&PrototypeSet::empty(4), &[1, 2, 3, 4, 5], 1, PrototypeInit::Normal { std: 0.02 }, &mut rng).unwrap();
        assert_eq!(base.len(), 5);
        assert!(base.stage_of.iter().all(|&s| s == 1));
        let grown = concat_prototypes(&base, &[6, 7], 2, PrototypeInit::Zeros, &mut rng).unwrap();
        assert_eq!(grown.len(), 7);
        assert_eq!(&grown.vectors.data()[..20], base.vectors.data());
        assert!(grown.vectors.data()[20..].iter().all(|&v| v == 0.0));
        assert!(matches!(
            concat_prototypes(&grown, &[3], 3, PrototypeInit::Zeros, &mut rng),
            Err(Error::DuplicateClass(3))
        ));
    }

    #[test]
    fn large_append_keeps_old_rows_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ids: Vec<ClassId> = (0..100).collect();
        let old = concat_prototypes(&PrototypeSet::empty(8), &ids, 1, PrototypeInit::Normal { std: 0.02 }, &mut rng).unwrap();
        let new_ids: Vec<ClassId> = (100..105).collect();
        let grown = concat_prototypes(&old, &new_ids, 2, PrototypeInit::Normal { std: 0.02 }, &mut rng).unwrap();
        assert_eq!(grown.len(), 105);
        for (a, b) in old.vectors.data().iter().zip(grown.vectors.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn basis_prototype_scores_are_first_component() {
        let f = map(vec![(2, 2, vec![1., 9., -2., 0., 3., 3., 0.5, 7.])], 2);
        let p = PrototypeSet { vectors: Tensor::from_vec(1, 2, vec![1.0, 0.0]), class_ids: vec![0], stage_of: vec![1] };
        assert_eq!(score_features(&f, &p).unwrap().scores, vec![1., -2., 3., 0.5]);
    }

    #[test]
    fn score_is_max_over_prototypes() {
        let f = map(vec![(1, 3, vec![1., 1., -1., -1., 2., -3.])], 2);
        let p = Tensor::from_vec(1, 2, vec![0.5, 0.25]);
        let mut p2 = p.clone();
        p2.scale_assign(2.0);
        let both = PrototypeSet { vectors: Tensor::concat_rows(&[&p, &p2]), class_ids: vec![0, 1], stage_of: vec![1, 1] };
        let s = score_features(&f, &both).unwrap().scores;
        for (r, &got) in s.iter().enumerate() {
            let row = f.levels[0].row(r);
            let d1 = tensor::dot(row, p.data());
            let d2 = tensor::dot(row, p2.data());
            assert_eq!(got, d1.max(d2));
        }
        assert!(score_features(&f, &PrototypeSet::empty(2)).is_err());
    }

    #[test]
    fn zero_features_score_zero() {
        let f = map(vec![(2, 2, vec![0.0; 12]), (1, 1, vec![0.0; 3])], 3);
        let p = PrototypeSet { vectors: Tensor::from_vec(2, 3, vec![1., 2., 3., -1., 0.5, 0.]), class_ids: vec![0, 1], stage_of: vec![1, 1] };
        assert!(score_features(&f, &p).unwrap().scores.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn topk_examples() {
        let field = ScoreField { sizes: vec![(2, 2)], scores: vec![4., 1., 3., 2.] };
        let sel = select_topk(&field, 2).unwrap();
        assert_eq!(sel.triples, vec![Location { level: 0, h: 0, w: 0 }, Location { level: 0, h: 1, w: 0 }]);
        assert_eq!(select_topk(&field, 4).unwrap().len(), 4);
        assert!(select_topk(&field, 5).is_err());
        let flat = ScoreField { sizes: vec![(1, 2), (2, 2)], scores: vec![1.0; 6] };
        assert_eq!(select_topk(&flat, 3).unwrap().flat, vec![0, 1, 2]);
        assert_eq!(flat.location(3), Location { level: 1, h: 0, w: 1 });
        assert_eq!(flat.flat_index(Location { level: 1, h: 1, w: 0 }), 4);
    }

    #[test]
    fn selection_loss_closed_forms() {
        // uniform logits: zero features against 3 prototypes + the no-object slot
        let mut g = Graph::new();
        let sel = g.input(Tensor::zeros(2, 3));
        let p = g.input(Tensor::from_vec(3, 3, vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]));
        let l = prototype_selection_loss(&mut g, sel, p, &[Some(0), None]).unwrap();
        assert!((g.value(l).item() - 4f64.ln()).abs() < 1e-12);

        // logits (1, 0) with a single prototype and target 0
        let mut g = Graph::new();
        let sel = g.input(Tensor::from_vec(1, 1, vec![1.0]));
        let p = g.input(Tensor::from_vec(1, 1, vec![1.0]));
        let l = prototype_selection_loss(&mut g, sel, p, &[Some(0)]).unwrap();
        let expected = (1.0 + (-1f64).exp()).ln();
        assert!((g.value(l).item() - expected).abs() < 1e-12);

        // saturated aligned feature
        let mut g = Graph::new();
        let sel = g.input(Tensor::from_vec(1, 2, vec![1e3, 0.0]));
        let p = g.input(Tensor::from_vec(2, 2, vec![1., 0., 0., 1.]));
        let l = prototype_selection_loss(&mut g, sel, p, &[Some(0)]).unwrap();
        assert!(g.value(l).item() < 1e-12);
        assert!(prototype_selection_loss(&mut g, sel, p, &[Some(2)]).is_err());
    }

    #[test]
    fn initialize_queries_barrier_only_changes_gradients() {
        let f = map(vec![(2, 2, (0..8).map(f64::from).collect())], 2);
        let idx = SelectionIndex { triples: vec![], flat: vec![3, 0], scores: vec![0.0, 0.0] };
        let mut values = Vec::new();
        for barrier in [true, false] {
            let mut g = Graph::new();
            let omega = g.input(f.omega());
            let q = initialize_queries(&mut g, omega, &idx, barrier).unwrap();
            values.push(g.value(q).clone());
            let l = g.sigmoid_bce(q, &Tensor::zeros(2, 2));
            let grads = g.backward(l);
            assert_eq!(grads.of(omega).is_some(), !barrier);
        }
        assert_eq!(values[0], values[1]);
    }
}
