use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Gradients, ParamId, ParamStore, Tensor};
use crate::error::{shape_err, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Moment estimates for one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step_count: u64,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub config: AdamConfig,
}

impl AdamState {
    pub fn new(len: usize, config: AdamConfig) -> Self {
        Self {
            step_count: 0,
            first_moment: vec![0.0; len],
            second_moment: vec![0.0; len],
            config,
        }
    }
}

/// One bias-corrected Adam update of `param` in place.
pub fn adam_step(param: &mut [f64], grad: &[f64], state: &mut AdamState) -> Result<()> {
    if param.len() != grad.len() || param.len() != state.first_moment.len() {
        return shape_err(
            "adam_step",
            format!(
                "param {} / grad {} / moments {}",
                param.len(),
                grad.len(),
                state.first_moment.len()
            ),
        );
    }
    let AdamConfig {
        learning_rate,
        beta1,
        beta2,
        epsilon,
    } = state.config;
    state.step_count += 1;
    let t = state.step_count as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    for i in 0..param.len() {
        let g = grad[i];
        let m = beta1 * state.first_moment[i] + (1.0 - beta1) * g;
        let v = beta2 * state.second_moment[i] + (1.0 - beta2) * g * g;
        state.first_moment[i] = m;
        state.second_moment[i] = v;
        let m_hat = m / bc1;
        let v_hat = v / bc2;
        param[i] -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
    }
    Ok(())
}

/// Adam over the trainable parameters of a [`ParamStore`].
///
/// Parameters only get state once they first receive a gradient, so a
/// parameter that never sees a gradient is never touched.
#[derive(Clone, Debug)]
pub struct Adam {
    config: AdamConfig,
    states: BTreeMap<ParamId, AdamState>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            states: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> AdamConfig {
        self.config
    }

    pub fn state(&self, id: ParamId) -> Option<&AdamState> {
        self.states.get(&id)
    }

    /// Applies `grads` to every parameter that is still marked trainable.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) -> Result<()> {
        for (id, g) in grads.params() {
            let t: &mut Tensor = store.get_mut(id);
            if !t.requires_grad() {
                continue;
            }
            let cfg = self.config;
            let st = self
                .states
                .entry(id)
                .or_insert_with(|| AdamState::new(t.len(), cfg));
            adam_step(t.data_mut(), g, st)?;
        }
        Ok(())
    }

    pub fn reset(&mut self) {
        self.states.clear();
    }
}
