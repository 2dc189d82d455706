//! First-order optimizers over a [`ParamStore`] group.

use std::collections::HashMap;
use std::f64::consts::PI;

use super::{Gradients, ParamGroup, ParamId, ParamStore};

/// Cosine annealing from `lr0` at epoch 0 down to 0 at `total_epochs`.
pub fn cosine_lr(epoch: usize, total_epochs: usize, lr0: f64) -> f64 {
    if total_epochs == 0 {
        return lr0;
    }
    let t = epoch.min(total_epochs) as f64 / total_epochs as f64;
    lr0 * 0.5 * (1.0 + (PI * t).cos())
}

/// Scale factor that brings the global L2 norm of the group's gradients down
/// to `max_norm`.
fn clip_factor(
    store: &ParamStore,
    grads: &Gradients,
    group: ParamGroup,
    max_norm: Option<f64>,
) -> f64 {
    let Some(max_norm) = max_norm else { return 1.0 };
    let sq: f64 = store
        .ids_in(group)
        .filter_map(|id| grads.param(id))
        .map(|g| g.data().iter().map(|v| v * v).sum::<f64>())
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm {
        max_norm / (norm + 1e-6)
    } else {
        1.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub momentum: f64,
    pub weight_decay: f64,
    pub grad_clip: Option<f64>,
}

/// SGD with classical momentum and L2 weight decay added to the gradient.
#[derive(Debug, Clone)]
pub struct Sgd {
    cfg: SgdConfig,
    group: ParamGroup,
    velocity: HashMap<ParamId, Vec<f64>>,
}

impl Sgd {
    pub fn new(cfg: SgdConfig, group: ParamGroup) -> Self {
        Sgd {
            cfg,
            group,
            velocity: HashMap::new(),
        }
    }

    /// Updates every parameter of the group that received a gradient.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, lr: f64) {
        let clip = clip_factor(store, grads, self.group, self.cfg.grad_clip);
        let ids: Vec<ParamId> = store.ids_in(self.group).collect();
        for id in ids {
            let Some(g) = grads.param(id) else { continue };
            let w = store.value_mut(id).data_mut();
            let v = self
                .velocity
                .entry(id)
                .or_insert_with(|| vec![0.0; w.len()]);
            for ((wi, vi), gi) in w.iter_mut().zip(v.iter_mut()).zip(g.data()) {
                let d = gi * clip + self.cfg.weight_decay * *wi;
                *vi = self.cfg.momentum * *vi + d;
                *wi -= lr * *vi;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
}

/// Adam with bias correction and L2 weight decay added to the gradient.
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    group: ParamGroup,
    steps: u64,
    moments: HashMap<ParamId, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, group: ParamGroup) -> Self {
        Adam {
            cfg,
            group,
            steps: 0,
            moments: HashMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) {
        self.steps += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            weight_decay,
            eps,
        } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.steps as i32);
        let bc2 = 1.0 - beta2.powi(self.steps as i32);
        let ids: Vec<ParamId> = store.ids_in(self.group).collect();
        for id in ids {
            let Some(g) = grads.param(id) else { continue };
            let w = store.value_mut(id).data_mut();
            let (m, v) = self
                .moments
                .entry(id)
                .or_insert_with(|| (vec![0.0; w.len()], vec![0.0; w.len()]));
            for i in 0..w.len() {
                let gi = g.data()[i] + weight_decay * w[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                w[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}
