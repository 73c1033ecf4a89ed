use std::collections::BTreeMap;

use crate::tensor::{Gradients, ParamId, ParamStore};

/// Adam with decoupled weight decay.
///
/// Parameters the loss did not reach are left untouched: no moment update
/// and no decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    moments: BTreeMap<ParamId, Moments>,
}

#[derive(Clone, Debug)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        AdamW { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, moments: BTreeMap::new() }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, lr: f64) {
        for (id, g) in grads.iter() {
            let p = store.get_mut(id);
            let n = g.len();
            let st = self.moments.entry(id).or_insert_with(|| Moments { m: vec![0.0; n], v: vec![0.0; n], t: 0 });
            st.t += 1;
            let bc1 = 1.0 - self.beta1.powi(st.t);
            let bc2 = 1.0 - self.beta2.powi(st.t);
            let data = p.data_mut();
            for k in 0..n {
                let gk = g.data()[k];
                st.m[k] = self.beta1 * st.m[k] + (1.0 - self.beta1) * gk;
                st.v[k] = self.beta2 * st.v[k] + (1.0 - self.beta2) * gk * gk;
                let mhat = st.m[k] / bc1;
                let vhat = st.v[k] / bc2;
                data[k] -= lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * data[k]);
            }
        }
    }
}

/// Step decay: `lr · factor^⌊epoch / period⌋`.
pub fn lr_at(lr: f64, factor: f64, period: usize, epoch: usize) -> f64 {
    lr * factor.powi((epoch / period.max(1)) as i32)
}
