//! AdamW with decoupled weight decay.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Optimization and training hyperparameters.
#[derive(Clone, Debug)]
pub struct AdamWConfig {
    pub lr: f32,
    pub weight_decay: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub epsilon: f32,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-3,
            weight_decay: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 {
            return Err(Error::Config("lr must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("betas must be in [0,1)".into()));
        }
        if self.weight_decay < 0.0 || self.epsilon <= 0.0 {
            return Err(Error::Config("weight_decay must be >= 0 and epsilon > 0".into()));
        }
        Ok(())
    }
}

/// AdamW state: per-parameter first/second moments and the step counter.
pub struct AdamW {
    pub config: AdamWConfig,
    params: Vec<Tensor>,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
    pub step: u64,
}

impl AdamW {
    pub fn new(params: Vec<Tensor>, config: AdamWConfig) -> Result<AdamW> {
        config.validate()?;
        let m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        let v = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        Ok(AdamW { config, params, m, v, step: 0 })
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    /// Rebuild an optimizer from persisted moments (checkpoint resume).
    pub fn restore(
        params: Vec<Tensor>,
        config: AdamWConfig,
        m: Vec<Vec<f32>>,
        v: Vec<Vec<f32>>,
        step: u64,
    ) -> Result<AdamW> {
        config.validate()?;
        if m.len() != params.len() || v.len() != params.len() {
            return Err(Error::Contract("moment count does not match parameters".into()));
        }
        for ((p, m), v) in params.iter().zip(&m).zip(&v) {
            if m.len() != p.numel() || v.len() != p.numel() {
                return Err(Error::Contract("moment length does not match parameter".into()));
            }
        }
        Ok(AdamW { config, params, m, v, step })
    }

    /// One decoupled-weight-decay update:
    /// m ← β1·m+(1−β1)·g; v ← β2·v+(1−β2)·g²;
    /// θ ← θ − lr·(m̂/(√v̂+ε) + wd·θ).
    pub fn step(&mut self) -> Result<()> {
        self.step += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (i, p) in self.params.iter().enumerate() {
            let g = p.grad().ok_or_else(|| {
                Error::Contract(format!("parameter {i} has no gradient at optimizer step"))
            })?;
            let mut data = p.to_vec();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..data.len() {
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g[j];
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                data[j] -= c.lr * (m_hat / (v_hat.sqrt() + c.epsilon) + c.weight_decay * data[j]);
            }
            p.set_data(&data);
        }
        Ok(())
    }

    pub fn zero_grad(&self) {
        for p in &self.params {
            p.zero_grad();
        }
    }
}
