//! AdamW with decoupled weight decay and bias-corrected moments.

use crate::error::{Result, StaError};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Per-parameter first/second moments plus the shared step counter.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(config: AdamWConfig) -> Self {
        OptimizerState {
            config,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// One AdamW step over named parameters. Gradients are read from each
    /// tensor's `grad` field; missing grads are treated as zero. A NaN
    /// gradient rejects the whole step, naming the parameter.
    pub fn step(&mut self, params: &mut [(&str, &mut Tensor)]) -> Result<()> {
        if self.m.is_empty() {
            for (_, p) in params.iter() {
                self.m.push(vec![0.0; p.numel()]);
                self.v.push(vec![0.0; p.numel()]);
            }
        }
        if self.m.len() != params.len() {
            return Err(StaError::invalid(
                "adamw_step",
                format!(
                    "optimizer tracks {} parameters, got {}",
                    self.m.len(),
                    params.len()
                ),
            ));
        }
        for (name, p) in params.iter() {
            if let Some(g) = &p.grad {
                if g.len() != p.numel() {
                    return Err(StaError::shape(
                        "adamw_step",
                        format!("grad/param length mismatch for `{}`", name),
                    ));
                }
                if g.iter().any(|v| v.is_nan()) {
                    return Err(StaError::NanGradient {
                        param: name.to_string(),
                    });
                }
            }
        }

        self.t += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);

        for (k, (_, p)) in params.iter_mut().enumerate() {
            if c.weight_decay != 0.0 {
                let decay = 1.0 - c.lr * c.weight_decay;
                for v in p.values.iter_mut() {
                    *v *= decay;
                }
            }
            let zero;
            let g: &[f64] = match &p.grad {
                Some(g) => g,
                None => {
                    zero = vec![0.0; p.numel()];
                    &zero
                }
            };
            let m = &mut self.m[k];
            let v = &mut self.v[k];
            for i in 0..p.numel() {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p.values[i] -= c.lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}
