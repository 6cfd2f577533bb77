//! Adam and the two learning-rate schedules.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    /// Settings of the original Transformer recipe.
    pub const TRANSFORMER: AdamConfig = AdamConfig {
        beta1: 0.9,
        beta2: 0.98,
        eps: 1e-9,
    };
    /// Settings commonly used when finetuning BERT-style encoders.
    pub const ENCODER: AdamConfig = AdamConfig {
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-6,
    };
}

/// Adam with bias correction. Moments are laid out like the parameter store.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &ParamStore, config: AdamConfig) -> Self {
        let zeros: Vec<Vec<f64>> = params
            .iter()
            .map(|(_, p)| vec![0.0; p.value.numel()])
            .collect();
        Adam {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Applies one update from the accumulated gradients.
    pub fn update(&mut self, params: &mut ParamStore, lr: f64) {
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let data = p.value.data_mut();
            for i in 0..data.len() {
                let g = p.grad[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                data[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

/// `eta * d_model^-0.5 * min(step^-0.5, step * warmup^-1.5)`.
pub fn noam_lr(step: u64, eta: f64, d_model: usize, warmup_steps: u64) -> Result<f64> {
    if step == 0 {
        return Err(Error::Contract(
            "inverse square-root schedule is undefined at step 0".into(),
        ));
    }
    let s = step as f64;
    let w = warmup_steps as f64;
    Ok(eta * (d_model as f64).powf(-0.5) * s.powf(-0.5).min(s * w.powf(-1.5)))
}

/// Linear warmup from 0 to `eta` over `warmup_steps`, then linear decay to 0 at `total_steps`.
pub fn triangular_lr(step: u64, eta: f64, warmup_steps: u64, total_steps: u64) -> f64 {
    if step <= warmup_steps {
        eta * step as f64 / warmup_steps.max(1) as f64
    } else if step >= total_steps {
        0.0
    } else {
        eta * (total_steps - step) as f64 / (total_steps - warmup_steps) as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    Noam {
        eta: f64,
        d_model: usize,
        warmup_steps: u64,
    },
    Triangular {
        eta: f64,
        warmup_steps: u64,
        total_steps: u64,
    },
}

impl LrSchedule {
    pub fn lr(&self, step: u64) -> Result<f64> {
        match *self {
            LrSchedule::Noam {
                eta,
                d_model,
                warmup_steps,
            } => noam_lr(step, eta, d_model, warmup_steps),
            LrSchedule::Triangular {
                eta,
                warmup_steps,
                total_steps,
            } => Ok(triangular_lr(step, eta, warmup_steps, total_steps)),
        }
    }
}
