//! Bias-corrected Adam.

use std::collections::BTreeMap;

use crate::{ParamId, ParamStore, Result, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment estimates for one parameter. `t` counts the updates this
/// parameter has received.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    /// One in-place Adam update of `param` with gradient `grad` at
    /// learning rate `lr`.
    pub fn step(&mut self, cfg: &AdamConfig, lr: f32, param: &mut [f32], grad: &[f32]) -> Result<()> {
        if param.len() != grad.len() || param.len() != self.m.len() {
            return Err(TensorError::Shape {
                op: "adam_step",
                lhs: vec![param.len()],
                rhs: vec![grad.len()],
            });
        }
        self.t += 1;
        let bc1 = 1.0 - (cfg.beta1 as f64).powi(self.t as i32);
        let bc2 = 1.0 - (cfg.beta2 as f64).powi(self.t as i32);
        let step_size = (lr as f64 / bc1) as f32;
        let bc2_sqrt = bc2.sqrt() as f32;
        for i in 0..param.len() {
            let g = grad[i];
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g;
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g * g;
            let denom = self.v[i].sqrt() / bc2_sqrt + cfg.eps;
            param[i] -= step_size * self.m[i] / denom;
        }
        Ok(())
    }
}

/// Adam over a [`ParamStore`], keeping one [`AdamState`] per parameter.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    states: BTreeMap<ParamId, AdamState>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            states: BTreeMap::new(),
        }
    }

    pub fn state(&self, id: ParamId) -> Option<&AdamState> {
        self.states.get(&id)
    }

    /// Updates exactly the listed parameters from their accumulated grads.
    /// Parameters with no gradient buffer are treated as having zero grad.
    pub fn step(&mut self, store: &mut ParamStore, ids: &[ParamId], lr: f32) -> Result<()> {
        for &id in ids {
            let p = store.get_mut(id);
            if !p.requires_grad {
                continue;
            }
            let len = p.value.numel();
            let zeros;
            let grad: &[f32] = match &p.grad {
                Some(g) => {
                    if g.shape() != p.value.shape() {
                        return Err(TensorError::Shape {
                            op: "adam_step",
                            lhs: p.value.shape().to_vec(),
                            rhs: g.shape().to_vec(),
                        });
                    }
                    g.data()
                }
                None => {
                    zeros = Tensor::<f32>::zeros(p.value.shape());
                    zeros.data()
                }
            };
            let state = self.states.entry(id).or_insert_with(|| AdamState::new(len));
            let cfg = self.config;
            let grad = grad.to_vec();
            state.step(&cfg, lr, p.value.data_mut(), &grad)?;
        }
        Ok(())
    }
}
