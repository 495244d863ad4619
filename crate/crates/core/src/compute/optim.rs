//! First-order optimisers over a parameter store. Updates walk parameters in
//! name order and only touch trainable tensors that received a gradient.

use std::collections::BTreeMap;

use crate::compute::ParameterStore;
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

pub struct Optimizer {
    kind: OptimizerKind,
    learning_rate: f64,
    /// Global gradient norm ceiling; gradients are rescaled, not clamped
    /// per element.
    clip_norm: Option<f64>,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step_count: u64,
    first_moment: BTreeMap<String, Vec<f64>>,
    second_moment: BTreeMap<String, Vec<f64>>,
}

impl Optimizer {
    pub fn sgd(learning_rate: f64, clip_norm: Option<f64>) -> Self {
        Optimizer {
            kind: OptimizerKind::Sgd,
            learning_rate,
            clip_norm,
            beta1: 0.0,
            beta2: 0.0,
            eps: 0.0,
            step_count: 0,
            first_moment: BTreeMap::new(),
            second_moment: BTreeMap::new(),
        }
    }

    pub fn adam(learning_rate: f64, clip_norm: Option<f64>) -> Self {
        Optimizer {
            kind: OptimizerKind::Adam,
            learning_rate,
            clip_norm,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step_count: 0,
            first_moment: BTreeMap::new(),
            second_moment: BTreeMap::new(),
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    /// Apply one update using the gradients currently stored on the
    /// parameters. Gradients are left in place; the training loop zeroes
    /// them before the next forward pass.
    pub fn step(&mut self, store: &ParameterStore) -> Result<()> {
        let mut updates: Vec<(String, Vec<f64>, Vec<f64>)> = Vec::new();
        let mut squared_norm = 0.0;
        for (name, tensor) in store.iter() {
            if !tensor.requires_grad() {
                continue;
            }
            if let Some(grad) = tensor.grad() {
                squared_norm += grad.iter().map(|g| g * g).sum::<f64>();
                updates.push((name.clone(), tensor.values(), grad));
            }
        }
        let total_norm = squared_norm.sqrt();
        let scale = match self.clip_norm {
            Some(c) if total_norm > c && total_norm > 0.0 => c / total_norm,
            _ => 1.0,
        };
        self.step_count += 1;
        for (name, mut values, grad) in updates {
            match self.kind {
                OptimizerKind::Sgd => {
                    for (v, g) in values.iter_mut().zip(&grad) {
                        *v -= self.learning_rate * g * scale;
                    }
                }
                OptimizerKind::Adam => {
                    let m = self
                        .first_moment
                        .entry(name.clone())
                        .or_insert_with(|| vec![0.0; grad.len()]);
                    let v2 = self
                        .second_moment
                        .entry(name.clone())
                        .or_insert_with(|| vec![0.0; grad.len()]);
                    let bc1 = 1.0 - self.beta1.powi(self.step_count as i32);
                    let bc2 = 1.0 - self.beta2.powi(self.step_count as i32);
                    for i in 0..grad.len() {
                        let g = grad[i] * scale;
                        m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                        v2[i] = self.beta2 * v2[i] + (1.0 - self.beta2) * g * g;
                        let m_hat = m[i] / bc1;
                        let v_hat = v2[i] / bc2;
                        values[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.eps);
                    }
                }
            }
            store.get(&name)?.set_values(&values)?;
        }
        Ok(())
    }
}
