//! Adam optimizer over named parameters.

use std::collections::BTreeMap;

use super::{Gradients, ParamSet};

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One update. Parameters without a gradient entry are treated as having
    /// zero gradient (their moments still decay).
    pub fn step(&mut self, params: &mut dyn ParamSet, grads: &Gradients) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        let (m_map, v_map) = (&mut self.m, &mut self.v);
        params.visit_mut("", &mut |name, data| {
            let m = m_map
                .entry(name.to_string())
                .or_insert_with(|| vec![0.0; data.len()]);
            let v = v_map
                .entry(name.to_string())
                .or_insert_with(|| vec![0.0; data.len()]);
            let g = grads.get(name);
            for i in 0..data.len() {
                let gi = g.map_or(0.0, |s| s[i]);
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                data[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        });
    }
}
