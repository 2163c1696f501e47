//! AdamW: Adam moments with decoupled weight decay.

use thiserror::Error;

use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("missing gradient for parameter {0}")]
    MissingGrad(String),
    #[error("gradient for parameter {name} has {got} values, expected {want}")]
    GradShape {
        name: String,
        got: usize,
        want: usize,
    },
}

/// Per-parameter first/second moment buffers plus the shared step counter.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub step_count: u64,
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(store: &ParamStore, config: AdamWConfig) -> Self {
        let first_moment = store
            .entries()
            .iter()
            .map(|p| vec![0.0; p.data.len()])
            .collect();
        let second_moment = store
            .entries()
            .iter()
            .map(|p| vec![0.0; p.data.len()])
            .collect();
        AdamW {
            config,
            step_count: 0,
            first_moment,
            second_moment,
        }
    }

    /// One decoupled-weight-decay Adam update over every parameter.
    /// `grads` is parallel to the store's entries.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &[Option<Vec<f64>>],
    ) -> Result<(), OptimError> {
        self.step_count += 1;
        let t = self.step_count as i32;
        let c = self.config;
        let bias1 = 1.0 - c.beta1.powi(t);
        let bias2 = 1.0 - c.beta2.powi(t);

        for i in 0..store.len() {
            let param = store.entry_mut(i);
            let grad = grads[i]
                .as_ref()
                .ok_or_else(|| OptimError::MissingGrad(param.name.clone()))?;
            if grad.len() != param.data.len() {
                return Err(OptimError::GradShape {
                    name: param.name.clone(),
                    got: grad.len(),
                    want: param.data.len(),
                });
            }
            let m = &mut self.first_moment[i];
            let v = &mut self.second_moment[i];
            for j in 0..param.data.len() {
                let g = grad[j];
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g * g;
                let m_hat = m[j] / bias1;
                let v_hat = v[j] / bias2;
                param.data[j] -= c.learning_rate
                    * (m_hat / (v_hat.sqrt() + c.epsilon) + c.weight_decay * param.data[j]);
            }
        }
        Ok(())
    }
}
