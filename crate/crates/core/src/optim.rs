//! AdamW with decoupled weight decay and a single-milestone step schedule.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

/// Learning rate at `iter` of `total`: `base` until `milestone · total`,
/// then `base · decay`.
pub fn step_lr(base: f64, decay: f64, milestone: f64, iter: usize, total: usize) -> f64 {
    if (iter as f64) < milestone * total as f64 {
        base
    } else {
        base * decay
    }
}

fn decays(name: &str) -> bool {
    !(name.ends_with(".b") || name.ends_with(".g"))
}

/// Rescales `grads` so their global L2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_grad_norm(grads: &mut Gradients, max_norm: f64) -> f64 {
    let norm = grads.params.values().map(|t| t.data().iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, step: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    /// One update of every parameter that has a gradient. Rows `0..k` of a
    /// parameter listed in `frozen_rows` with value `k` stay bitwise fixed.
    pub fn update(&mut self, params: &mut ParamStore, grads: &Gradients, lr: f64, frozen_rows: &BTreeMap<String, usize>) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (name, g) in &grads.params {
            let Some(p) = params.get_mut(name) else { continue };
            let m = moment(&mut self.m, name, p.shape());
            for (mi, gi) in m.data_mut().iter_mut().zip(g.data()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
            }
            let v = moment(&mut self.v, name, p.shape());
            for (vi, gi) in v.data_mut().iter_mut().zip(g.data()) {
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
            }
            let skip = frozen_rows.get(name).map_or(0, |&k| k * p.cols());
            let wd = if decays(name) { self.weight_decay } else { 0.0 };
            let (m, v) = (&self.m[name], &self.v[name]);
            for (i, x) in p.data_mut().iter_mut().enumerate().skip(skip) {
                let mh = m.data()[i] / bc1;
                let vh = v.data()[i] / bc2;
                *x -= lr * (mh / (vh.sqrt() + self.eps) + wd * *x);
            }
        }
    }
}

/// Moment buffer for `name`, grown with zero rows if the parameter grew.
fn moment<'a>(store: &'a mut BTreeMap<String, Tensor>, name: &str, shape: (usize, usize)) -> &'a mut Tensor {
    let t = store.entry(name.to_string()).or_insert_with(|| Tensor::zeros(shape.0, shape.1));
    if t.shape() != shape {
        let mut grown = Tensor::zeros(shape.0, shape.1);
        if t.cols() == shape.1 {
            let n = t.len().min(grown.len());
            grown.data_mut()[..n].copy_from_slice(&t.data()[..n]);
        }
        *t = grown;
    }
    t
}
