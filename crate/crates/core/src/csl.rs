//! Consistent selection: the feature points the previous stage selected
//! should score against the previous prototypes the same way under the
//! current model as they did under the previous one.

use crate::autograd::{kl_terms, Graph, Var};
use crate::error::{Error, Result};
use crate::model::MultiScaleFeatureMap;
use crate::qpa::{self, PrototypeSet, SelectionIndex};
use crate::tensor::{matmul_t, softmax, Tensor};

/// What the frozen previous model contributes per image.
#[derive(Clone, Debug, PartialEq)]
pub struct CslTeacher {
    pub index: SelectionIndex,
    /// `[K × D]` previous prototypes, held constant.
    pub prototypes: Tensor,
    /// `[K × |prototypes|]` previous features at `index` times `prototypesᵀ`.
    pub logits: Tensor,
}

/// Selection of the previous model on its own features.
pub fn previous_stage_selection(prev_features: &MultiScaleFeatureMap, prev_prototypes: &PrototypeSet, n: usize) -> Result<CslTeacher> {
    let index = qpa::select(prev_features, prev_prototypes, n)?;
    let selected = prev_features.omega().gather_rows(&index.flat);
    let logits = matmul_t(&selected, &prev_prototypes.vectors);
    Ok(CslTeacher { index, prototypes: prev_prototypes.vectors.clone(), logits })
}

/// `mean_k KL(softmax(teacher_k) ‖ softmax(F^t[I^{t-1}]_k · Pᵀ))` with
/// gradient into the current flat feature node `omega` only.
pub fn csl_loss(g: &mut Graph, omega: Var, teacher: &CslTeacher) -> Result<Var> {
    let rows = g.value(omega).rows();
    if teacher.index.flat.iter().any(|&i| i >= rows) {
        return Err(Error::InvalidArgument("teacher selection outside Ω".into()));
    }
    if g.value(omega).cols() != teacher.prototypes.cols() {
        return Err(Error::Shape("feature dim differs from teacher prototypes".into()));
    }
    let selected = g.gather_rows(omega, &teacher.index.flat);
    let protos = g.constant(teacher.prototypes.clone());
    let student = g.matmul_t(selected, protos);
    Ok(g.kl_softmax(&teacher.logits, student))
}

/// Plain-value mean KL between row-wise softmaxes of two logit matrices.
pub fn csl_value(teacher_logits: &Tensor, student_logits: &Tensor) -> f64 {
    let rows = teacher_logits.rows();
    if rows == 0 {
        return 0.0;
    }
    (0..rows)
        .map(|r| kl_terms(&softmax(teacher_logits.row(r)), &softmax(student_logits.row(r))))
        .sum::<f64>()
        / rows as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_input_gradient, pseudo_random_tensor};
    use crate::qpa::{concat_prototypes, PrototypeInit};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn feature_map(seed: u64, dim: usize) -> MultiScaleFeatureMap {
        MultiScaleFeatureMap {
            sizes: vec![(2, 2), (4, 4)],
            levels: vec![pseudo_random_tensor(4, dim, seed), pseudo_random_tensor(16, dim, seed + 1)],
        }
    }

    fn protos(dim: usize) -> PrototypeSet {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        concat_prototypes(&PrototypeSet::empty(dim), &[0, 1, 2], 1, PrototypeInit::Normal { std: 1.0 }, &mut rng).unwrap()
    }

    #[test]
    fn identical_features_give_zero_loss() {
        let f = feature_map(1, 6);
        let teacher = previous_stage_selection(&f, &protos(6), 5).unwrap();
        let mut g = Graph::new();
        let omega = g.input(f.omega());
        let l = csl_loss(&mut g, omega, &teacher).unwrap();
        assert!(g.value(l).item().abs() < 1e-12);
        let grad = g.backward(l);
        let n = grad.of(omega).unwrap().norm();
        // only the O(ε) residue of the smoothed log remains
        assert!(n < 1e-6, "{n}");
    }

    #[test]
    fn hand_computed_two_class_kl() {
        // p = (1/2, 1/2), q = (1/3, 2/3)
        let teacher = Tensor::from_vec(1, 2, vec![0.0, 0.0]);
        let student = Tensor::from_vec(1, 2, vec![0.0, 2f64.ln()]);
        let expected = 0.5 * 1.5f64.ln() + 0.5 * 0.75f64.ln();
        assert!((expected - 0.058_891).abs() < 1e-6);
        assert!((csl_value(&teacher, &student) - expected).abs() < 1e-7);
    }

    #[test]
    fn drifted_features_have_positive_loss_and_correct_gradient() {
        let f = feature_map(1, 6);
        let teacher = previous_stage_selection(&f, &protos(6), 5).unwrap();
        let drifted = feature_map(9, 6).omega();
        let r = check_input_gradient(&|g, x| csl_loss(g, x, &teacher).unwrap(), &drifted, 1e-6);
        assert!(r.max_rel_err < 1e-5, "{r:?}");
        let mut g = Graph::new();
        let omega = g.input(drifted);
        let l = csl_loss(&mut g, omega, &teacher).unwrap();
        assert!(g.value(l).item() > 0.0);
    }

    #[test]
    fn rejects_mismatched_dims() {
        let teacher = previous_stage_selection(&feature_map(1, 6), &protos(6), 5).unwrap();
        let mut g = Graph::new();
        let omega = g.input(feature_map(1, 4).omega());
        assert!(csl_loss(&mut g, omega, &teacher).is_err());
    }
}
