//! Central finite-difference checks for the tape.
//!
//! The numerical side only ever reads forward values, so it is independent
//! of every backward rule it is used to verify.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, ParamStore, Var};
use crate::tensor::Tensor;

/// Default perturbation for central differences in f64.
pub const DEFAULT_EPS: f64 = 1e-6;

/// Worst-case discrepancy between analytic and numerical gradients.
#[derive(Clone, Debug, Default)]
pub struct GradCheck {
    pub checked: usize,
    pub max_abs_err: f64,
    /// Largest elementwise `|a − n| / max(|a|, |n|, floor)`.
    pub max_rel_err: f64,
    /// Largest per-tensor `‖a − n‖ / max(‖a‖, ‖n‖)`.
    pub max_tensor_rel_err: f64,
    pub worst: Option<String>,
    /// Every probed `(analytic, numeric)` pair.
    pub pairs: Vec<(f64, f64)>,
}

/// Relative errors below this magnitude are measured against the floor.
pub const REL_FLOOR: f64 = 1e-7;

impl GradCheck {
    /// Largest `|a − n| / max(|a|, |n|, floor)`. A floor near the
    /// finite-difference roundoff (`|loss|·2⁻⁵²/eps`) keeps structurally zero
    /// gradients from reading as relative errors of order one.
    pub fn max_rel_err_above(&self, floor: f64) -> f64 {
        self.pairs.iter().map(|&(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor)).fold(0.0, f64::max)
    }

    fn record(&mut self, label: &str, analytic: &[f64], numeric: &[f64]) {
        let mut diff2 = 0.0;
        let mut a2 = 0.0;
        let mut n2 = 0.0;
        for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
            let abs = (a - n).abs();
            let rel = abs / a.abs().max(n.abs()).max(REL_FLOOR);
            self.checked += 1;
            self.max_abs_err = self.max_abs_err.max(abs);
            if rel > self.max_rel_err {
                self.max_rel_err = rel;
                self.worst = Some(format!("{label}[{i}]: analytic {a:e} numeric {n:e}"));
            }
            self.pairs.push((a, n));
            diff2 += abs * abs;
            a2 += a * a;
            n2 += n * n;
        }
        let denom = a2.sqrt().max(n2.sqrt());
        if denom > 0.0 {
            self.max_tensor_rel_err = self.max_tensor_rel_err.max(diff2.sqrt() / denom);
        }
    }
}

/// Compares `∂loss/∂x` from the tape with central differences.
pub fn check_input_gradient(build: &dyn Fn(&mut Graph, Var) -> Var, x: &Tensor, eps: f64) -> GradCheck {
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let loss = build(&mut g, xv);
    let grads = g.backward(loss);
    let analytic = grads.of(xv).cloned().unwrap_or_else(|| Tensor::zeros(x.rows(), x.cols()));
    let eval = |t: &Tensor| {
        let mut g = Graph::new();
        let v = g.input(t.clone());
        let l = build(&mut g, v);
        g.value(l).item()
    };
    let numeric = numeric_gradient(&eval, x, eps);
    let mut report = GradCheck::default();
    report.record("input", analytic.data(), numeric.data());
    report
}

/// Central-difference gradient of a scalar function of one tensor.
pub fn numeric_gradient(f: &dyn Fn(&Tensor) -> f64, x: &Tensor, eps: f64) -> Tensor {
    let mut out = Tensor::zeros(x.rows(), x.cols());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - eps;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = (plus - minus) / (2.0 * eps);
    }
    out
}

/// Checks the gradients of every parameter in `store`. `loss_fn` must rebuild
/// the full computation from the store it is given. At most `max_per_param`
/// coordinates per tensor are probed (evenly strided).
pub fn check_param_gradients(
    store: &ParamStore,
    loss_fn: &dyn Fn(&ParamStore) -> (Graph, Var),
    eps: f64,
    max_per_param: usize,
) -> GradCheck {
    let (g, loss) = loss_fn(store);
    let grads = g.backward(loss);
    let mut report = GradCheck::default();
    let mut probe = store.clone();
    let names: Vec<String> = store.names().cloned().collect();
    for name in names {
        let len = store.get(&name).map_or(0, Tensor::len);
        let zero = Tensor::zeros(1, len);
        let analytic_full = grads.param(&name).cloned().unwrap_or(zero);
        let stride = (len / max_per_param.max(1)).max(1);
        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        for i in (0..len).step_by(stride) {
            let orig = probe.get(&name).unwrap().data()[i];
            probe.get_mut(&name).unwrap().data_mut()[i] = orig + eps;
            let (gp, lp) = loss_fn(&probe);
            let plus = gp.value(lp).item();
            probe.get_mut(&name).unwrap().data_mut()[i] = orig - eps;
            let (gm, lm) = loss_fn(&probe);
            let minus = gm.value(lm).item();
            probe.get_mut(&name).unwrap().data_mut()[i] = orig;
            analytic.push(analytic_full.data()[i]);
            numeric.push((plus - minus) / (2.0 * eps));
        }
        report.record(&name, &analytic, &numeric);
    }
    report
}

/// Deterministic uniform(−1, 1) tensor for tests and benches.
pub fn pseudo_random_tensor(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
}
