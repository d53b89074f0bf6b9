use std::collections::BTreeMap;

use crate::model::{Model, ParamId};
use crate::tensor::Tensor;

/// Linearly decaying learning rate: `lr0 · (1 − step / steps)`.
pub fn linear_lr(lr0: f64, step: usize, steps: usize) -> f64 {
    if steps == 0 {
        return lr0;
    }
    lr0 * (1.0 - step as f64 / steps as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamWParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWParams {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Adam with decoupled weight decay. Moment buffers exist only for the
/// parameters it was constructed with.
#[derive(Debug)]
pub struct AdamW {
    hp: AdamWParams,
    state: BTreeMap<ParamId, (Vec<f64>, Vec<f64>)>,
    t: u64,
}

impl AdamW {
    pub fn new(model: &Model, trainable: impl IntoIterator<Item = ParamId>, hp: AdamWParams) -> Self {
        let state = trainable
            .into_iter()
            .map(|id| {
                let n = model.param(id).len();
                (id, (vec![0.0; n], vec![0.0; n]))
            })
            .collect();
        Self { hp, state, t: 0 }
    }

    pub fn trainable(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.state.keys().copied()
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.state.contains_key(&id)
    }

    /// Applies one update. Gradients for parameters without state are ignored.
    pub fn step(&mut self, model: &mut Model, grads: &BTreeMap<ParamId, Tensor>, lr: f64) {
        self.t += 1;
        let AdamWParams {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.hp;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for (id, (m, v)) in self.state.iter_mut() {
            let Some(g) = grads.get(id) else { continue };
            let p = model.param_mut(*id).data_mut();
            for i in 0..p.len() {
                let gi = g.data()[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= lr * (mhat / (vhat.sqrt() + eps) + weight_decay * p[i]);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_is_linear() {
        for s in 0..=10 {
            let want = 0.3 * (1.0 - s as f64 / 10.0);
            assert!((linear_lr(0.3, s, 10) - want).abs() < 1e-12);
        }
    }
}
