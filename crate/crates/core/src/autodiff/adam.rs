use ndarray::{Array2, Zip};

use super::params::{Gradients, ParamId, ParamStore};
use crate::error::{Error, Result};

/// Adam moments and hyper-parameters. Steps *descend* the loss; callers that
/// maximize a utility feed it the negated utility.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    first: Vec<Option<Array2<f64>>>,
    second: Vec<Option<Array2<f64>>>,
}

impl AdamState {
    pub fn new(store: &ParamStore, learning_rate: f64) -> Self {
        let moments = || -> Vec<Option<Array2<f64>>> {
            store
                .ids()
                .map(|id| store.is_trainable(id).then(|| Array2::zeros(store.get(id).raw_dim())))
                .collect()
        };
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            first: moments(),
            second: moments(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update of every trainable tensor in `store`.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) -> Result<()> {
        if store.len() != self.first.len() || grads.len() != store.len() {
            return Err(Error::usage(format!(
                "adam: state tracks {} tensors, store has {}, gradients {}",
                self.first.len(),
                store.len(),
                grads.len()
            )));
        }
        for id in store.ids() {
            let trainable = store.is_trainable(id);
            if trainable != self.first[id.index()].is_some() {
                return Err(Error::usage(format!(
                    "adam: trainability of {} changed",
                    store.name(id)
                )));
            }
            if trainable {
                let m = self.first[id.index()].as_ref().unwrap();
                if m.dim() != store.get(id).dim() || grads.get(id).dim() != m.dim() {
                    return Err(Error::usage(format!("adam: shape mismatch for {}", store.name(id))));
                }
            }
        }

        self.step += 1;
        let t = self.step as i32;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.epsilon);
        let lr_t = self.learning_rate * (1.0 - b2.powi(t)).sqrt() / (1.0 - b1.powi(t));
        let ids: Vec<ParamId> = store.trainable_ids().collect();
        for id in ids {
            let m = self.first[id.index()].as_mut().unwrap();
            let v = self.second[id.index()].as_mut().unwrap();
            Zip::from(store.get_mut(id))
                .and(m)
                .and(v)
                .and(grads.get(id))
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *p -= lr_t * *m / (v.sqrt() + eps);
                });
        }
        Ok(())
    }
}
