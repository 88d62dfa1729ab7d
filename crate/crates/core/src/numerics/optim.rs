use serde::{Deserialize, Serialize};

use super::graph::{Gradients, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// A collection of tensors an optimizer can update.
pub trait Parameters {
    fn tensors(&self) -> Vec<&Tensor>;
    fn tensors_mut(&mut self) -> Vec<&mut Tensor>;

    fn zero_grad(&mut self) {
        for t in self.tensors_mut() {
            t.zero_grad();
        }
    }

    /// Copies gradients for `handles` (one per tensor, same order) out of a
    /// backward sweep. Tensors the loss never touched receive zeros.
    fn store_grads(&mut self, grads: &Gradients, handles: &[Var]) -> Result<()> {
        let tensors = self.tensors_mut();
        if tensors.len() != handles.len() {
            return Err(Error::Contract(format!(
                "{} handles for {} tensors",
                handles.len(),
                tensors.len()
            )));
        }
        for (t, h) in tensors.into_iter().zip(handles) {
            match grads.get(*h) {
                Some(g) => t.accumulate_grad(g)?,
                None => {
                    let zeros = vec![0.0; t.len()];
                    t.accumulate_grad(&zeros)?
                }
            }
        }
        Ok(())
    }

    /// FNV digest over all tensors, used to assert that inference leaves
    /// parameters untouched.
    fn checksum(&self) -> u64 {
        self.tensors()
            .iter()
            .fold(0u64, |acc, t| acc.rotate_left(7) ^ t.checksum())
    }
}

impl Parameters for Tensor {
    fn tensors(&self) -> Vec<&Tensor> {
        vec![self]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![self]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub epsilon: f32,
}

impl AdamConfig {
    pub fn with_lr(lr: f32) -> Self {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Moment estimates for every tensor of one [`Parameters`] collection.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    step_count: u64,
    first_moment: Vec<Vec<f32>>,
    second_moment: Vec<Vec<f32>>,
}

impl AdamState {
    pub fn new<P: Parameters + ?Sized>(params: &P, config: AdamConfig) -> Self {
        let sizes: Vec<usize> = params.tensors().iter().map(|t| t.len()).collect();
        AdamState {
            config,
            step_count: 0,
            first_moment: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            second_moment: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }
}

/// One bias-corrected Adam update. Consumes (clears) the gradients.
pub fn adam_step<P: Parameters + ?Sized>(params: &mut P, state: &mut AdamState) -> Result<()> {
    let mut tensors = params.tensors_mut();
    if tensors.len() != state.first_moment.len() {
        return Err(Error::Dimension(format!(
            "optimizer tracks {} tensors, parameters have {}",
            state.first_moment.len(),
            tensors.len()
        )));
    }
    for (i, t) in tensors.iter().enumerate() {
        if t.len() != state.first_moment[i].len() {
            return Err(Error::Dimension(format!(
                "tensor {i} has {} values, moment buffer {}",
                t.len(),
                state.first_moment[i].len()
            )));
        }
        if t.grad.is_none() {
            return Err(Error::Contract(format!("tensor {i} has no gradient")));
        }
    }

    state.step_count += 1;
    let AdamConfig {
        lr,
        beta1,
        beta2,
        epsilon,
    } = state.config;
    let t = state.step_count as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);

    for (i, tensor) in tensors.iter_mut().enumerate() {
        let grad = tensor.grad.take().expect("checked above");
        let m = &mut state.first_moment[i];
        let v = &mut state.second_moment[i];
        for (((p, g), m), v) in tensor.data_mut().iter_mut().zip(&grad).zip(m).zip(v) {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + epsilon);
        }
    }
    Ok(())
}
