//! Adam with bias-corrected moment estimates.

use crate::autograd::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::{Shape4, Tensor4};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub epsilon: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    /// Completed steps.
    pub t: u64,
    m: Vec<Tensor4>,
    v: Vec<Tensor4>,
}

impl AdamState {
    pub fn new(config: AdamConfig, shapes: &[Shape4]) -> Self {
        Self {
            config,
            t: 0,
            m: shapes.iter().map(|&s| Tensor4::zeros(s)).collect(),
            v: shapes.iter().map(|&s| Tensor4::zeros(s)).collect(),
        }
    }

    pub fn for_store(config: AdamConfig, store: &ParamStore) -> Self {
        Self::new(config, &store.shapes())
    }

    pub fn first_moment(&self) -> &[Tensor4] {
        &self.m
    }

    pub fn second_moment(&self) -> &[Tensor4] {
        &self.v
    }

    /// One update of `params` from `grads`. Gradients are left untouched.
    pub fn step(&mut self, params: &mut [&mut Tensor4], grads: &[&Tensor4]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::dim("adam_step", (params.len(), grads.len()), self.m.len()));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            if p.shape() != m.shape() || g.shape() != m.shape() {
                return Err(Error::dim("adam_step", p.shape(), g.shape()));
            }
        }
        self.t += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let bc1 = 1.0 - (beta1 as f64).powf(self.t as f64);
        let bc2 = 1.0 - (beta2 as f64).powf(self.t as f64);
        let step_size = (lr as f64 / bc1) as f32;
        let bc2_sqrt = bc2.sqrt() as f32;
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let pd = p.data_mut();
            for (i, &gi) in g.data().iter().enumerate() {
                let mi = &mut m.data_mut()[i];
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                let vi = &mut v.data_mut()[i];
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                pd[i] -= step_size * *mi / (vi.sqrt() / bc2_sqrt + epsilon);
            }
        }
        Ok(())
    }

    /// Applies [`AdamState::step`] to every parameter of `store` using its
    /// accumulated gradients.
    pub fn step_store(&mut self, store: &mut ParamStore) -> Result<()> {
        let grads: Vec<Tensor4> = store.iter().map(|p| p.grad.clone()).collect();
        let grad_refs: Vec<&Tensor4> = grads.iter().collect();
        let mut values: Vec<&mut Tensor4> = store.iter_mut().map(|p| &mut p.value).collect();
        self.step(&mut values, &grad_refs)
    }
}
