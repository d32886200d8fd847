//! AdamW with decoupled weight decay and linear warmup.

use crate::error::{NumericsError, Result};

/// A named trainable array with its gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Vec<f64>) -> Self {
        let grad = vec![0.0; value.len()];
        Self { name: name.into(), value, grad }
    }
}

/// Ordered collection of trainable parameters.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    params: Vec<Parameter>,
}

impl ParamSet {
    pub fn new(params: Vec<Parameter>) -> Self {
        Self { params }
    }

    pub fn push(&mut self, p: Parameter) {
        self.params.push(p);
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn total_len(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn get(&self, i: usize) -> &Parameter {
        &self.params[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Parameter {
        &mut self.params[i]
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn into_inner(self) -> Vec<Parameter> {
        self.params
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub warmup_fraction: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-4,
            weight_decay: 0.1,
            warmup_fraction: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamWConfig {
    /// Learning rate at 1-based step `step` of a `total_steps` schedule.
    pub fn lr_at(&self, step: u64, total_steps: u64) -> f64 {
        let warmup = self.warmup_fraction * total_steps as f64;
        if warmup <= 0.0 {
            return self.learning_rate;
        }
        self.learning_rate * (step as f64 / warmup).min(1.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step_count: u64,
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub state: OptimizerState,
}

impl AdamW {
    /// Fresh optimizer with zeroed moments shaped like `params`.
    pub fn new(config: AdamWConfig, params: &ParamSet) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.value.len()]).collect();
        Self {
            config,
            state: OptimizerState {
                step_count: 0,
                first_moment: zeros.clone(),
                second_moment: zeros,
            },
        }
    }

    /// Applies one update and zeroes the gradients.
    ///
    /// Gradients are validated before anything is touched; a non-finite entry
    /// aborts the step with the parameter's name and leaves the state as it was.
    pub fn step(&mut self, params: &mut ParamSet, total_steps: u64) -> Result<()> {
        if params.len() != self.state.first_moment.len()
            || params
                .iter()
                .zip(&self.state.first_moment)
                .any(|(p, m)| p.value.len() != m.len() || p.grad.len() != m.len())
        {
            return Err(NumericsError::StateMismatch(format!(
                "{} parameters vs {} moment buffers",
                params.len(),
                self.state.first_moment.len()
            )));
        }
        if let Some(bad) = params.iter().find(|p| p.grad.iter().any(|g| !g.is_finite())) {
            return Err(NumericsError::NonFiniteGradient(bad.name.clone()));
        }
        self.state.step_count += 1;
        let t = self.state.step_count;
        let c = self.config;
        let lr = c.lr_at(t, total_steps);
        let bc1 = 1.0 - c.beta1.powi(t as i32);
        let bc2 = 1.0 - c.beta2.powi(t as i32);
        for ((p, m), v) in params
            .iter_mut()
            .zip(&mut self.state.first_moment)
            .zip(&mut self.state.second_moment)
        {
            for j in 0..p.value.len() {
                let g = p.grad[j];
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                p.value[j] -= lr * c.weight_decay * p.value[j];
                p.value[j] -= lr * m_hat / (v_hat.sqrt() + c.epsilon);
            }
        }
        params.zero_grads();
        Ok(())
    }
}
