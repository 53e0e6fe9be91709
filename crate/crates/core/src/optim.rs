//! SGD with momentum and decoupled-by-exclusion weight decay: decay applies
//! only to parameter ids registered for it (conv/linear weights; never
//! normalization affines or biases).

use std::collections::{HashMap, HashSet};

use crate::error::{Error, Result};
use crate::graph::{Grads, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LrSchedule {
    Constant,
    Cosine,
    /// Multiply by 0.1 every `milestone` epochs.
    Step { milestone: usize },
}

/// Learning rate for a given epoch (0-based) under the schedule.
pub fn lr_at(kind: LrSchedule, base: f64, epoch: usize, total_epochs: usize) -> Result<f64> {
    match kind {
        LrSchedule::Constant => Ok(base),
        LrSchedule::Cosine => {
            if total_epochs == 0 {
                return Err(Error::Config("cosine schedule over zero epochs".into()));
            }
            let phase = std::f64::consts::PI * epoch as f64 / total_epochs as f64;
            Ok(base * 0.5 * (1.0 + phase.cos()))
        }
        LrSchedule::Step { milestone } => {
            if milestone == 0 {
                return Err(Error::Config("step schedule with zero milestone".into()));
            }
            Ok(base * 0.1f64.powi((epoch / milestone) as i32))
        }
    }
}

#[derive(Debug)]
pub struct Sgd<F: Scalar> {
    pub momentum: F,
    pub weight_decay: F,
    velocity: HashMap<ParamId, Tensor<F>>,
    decay_ids: HashSet<ParamId>,
    steps: u64,
}

impl<F: Scalar> Sgd<F> {
    pub fn new(momentum: F, weight_decay: F) -> Self {
        Sgd {
            momentum,
            weight_decay,
            velocity: HashMap::new(),
            decay_ids: HashSet::new(),
            steps: 0,
        }
    }

    /// Mark parameters that receive weight decay.
    pub fn register_decay(&mut self, ids: &[ParamId]) {
        self.decay_ids.extend(ids.iter().copied());
    }

    pub fn decays(&self, id: ParamId) -> bool {
        self.decay_ids.contains(&id)
    }

    /// v <- momentum*v + (g + wd*w); w <- w - lr*v, for every trainable
    /// parameter with a gradient entry.
    pub fn step(&mut self, store: &mut ParamStore<F>, grads: &Grads<F>, lr: F) -> Result<()> {
        let mut ids: Vec<ParamId> = grads.by_param.keys().copied().collect();
        ids.sort_by_key(|id| id.0);
        for id in ids {
            if !store.is_trainable(id) {
                return Err(Error::Contract(format!(
                    "gradient supplied for frozen parameter {}",
                    store.name(id)
                )));
            }
            let g = &grads.by_param[&id];
            if g.shape() != store.value(id).shape() {
                return Err(Error::Contract(format!(
                    "gradient shape {:?} vs parameter {:?} for {}",
                    g.shape(),
                    store.value(id).shape(),
                    store.name(id)
                )));
            }
            let wd = if self.decay_ids.contains(&id) {
                self.weight_decay
            } else {
                F::ZERO
            };
            let v = self
                .velocity
                .entry(id)
                .or_insert_with(|| Tensor::zeros(g.shape()));
            {
                let vd = v.data_mut();
                let gd = g.data();
                let wdata = store.value(id).data();
                for i in 0..vd.len() {
                    vd[i] = self.momentum * vd[i] + (gd[i] + wd * wdata[i]);
                }
            }
            let w = store.value_mut(id);
            let wd_ = w.data_mut();
            let vd = self.velocity[&id].data();
            for i in 0..wd_.len() {
                wd_[i] = wd_[i] - lr * vd[i];
            }
        }
        self.steps += 1;
        Ok(())
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn set_steps(&mut self, steps: u64) {
        self.steps = steps;
    }

    pub fn velocity(&self, id: ParamId) -> Option<&Tensor<F>> {
        self.velocity.get(&id)
    }

    pub fn velocities(&self) -> &HashMap<ParamId, Tensor<F>> {
        &self.velocity
    }

    pub fn set_velocity(&mut self, id: ParamId, v: Tensor<F>) {
        self.velocity.insert(id, v);
    }
}
