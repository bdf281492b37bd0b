//! Adam with decoupled weight decay.

use crate::params::ParamSet;
use crate::tensor::{Gradients, Scalar, Var};

pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(params: &ParamSet, lr: f32, weight_decay: f32) -> Self {
        let m = (0..params.len())
            .map(|i| vec![0.0; params.get(crate::params::PIdx(i)).numel()])
            .collect();
        let v = (0..params.len())
            .map(|i| vec![0.0; params.get(crate::params::PIdx(i)).numel()])
            .collect();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m,
            v,
        }
    }

    /// Apply one update. `bound[i]` is the tape leaf for parameter `i`;
    /// parameters with no gradient this step are left untouched (aside from
    /// weight decay being skipped too, so unused tables don't shrink).
    pub fn step<F: Scalar>(&mut self, params: &mut ParamSet, bound: &[Var], grads: &Gradients<F>) {
        self.step += 1;
        let b1c = 1.0 - self.beta1.powi(self.step as i32);
        let b2c = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let Some(g) = grads.get(bound[i]) else {
                continue;
            };
            let t = params.get_mut(crate::params::PIdx(i));
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for j in 0..t.data.len() {
                let gj = g[j].to_f32();
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let mh = m[j] / b1c;
                let vh = v[j] / b2c;
                t.data[j] -= self.lr * (mh / (vh.sqrt() + self.eps) + self.weight_decay * t.data[j]);
            }
        }
    }
}
