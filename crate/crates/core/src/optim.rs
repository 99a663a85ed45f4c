//! AdamW with decoupled weight decay, and the cosine learning-rate schedule.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// Per-parameter moments plus the shared step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    pub t: u64,
    pub moments: BTreeMap<String, Moments>,
}

impl OptimizerState {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            t: 0,
            moments: BTreeMap::new(),
        }
    }

    /// One AdamW step over every parameter that has a gradient.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &BTreeMap<String, Tensor>,
        lr: f64,
    ) -> Result<()> {
        if lr.is_nan() || lr < 0.0 {
            return Err(Error::InvalidArgument(format!("learning rate {lr}")));
        }
        for (name, g) in grads {
            let p = store
                .get(name)
                .ok_or_else(|| Error::UnknownParameter(name.clone()))?;
            if p.value.shape() != g.shape() {
                return Err(Error::ShapeMismatch {
                    op: "adamw_step",
                    lhs: p.value.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
        }
        self.t += 1;
        for (name, g) in grads {
            let param = store.get_mut(name).expect("checked above");
            let mom = self.moments.entry(name.clone()).or_insert_with(|| Moments {
                m: vec![0.0; g.numel()],
                v: vec![0.0; g.numel()],
            });
            adamw_update(
                param.value.data_mut(),
                g.data(),
                mom,
                self.t,
                lr,
                &self.config,
            );
        }
        Ok(())
    }
}

/// Decay `theta` by `(1 - lr·λ)`, then apply the bias-corrected Adam update.
pub fn adamw_update(
    theta: &mut [f64],
    grad: &[f64],
    mom: &mut Moments,
    t: u64,
    lr: f64,
    cfg: &AdamWConfig,
) {
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    let decay = 1.0 - lr * cfg.weight_decay;
    for i in 0..theta.len() {
        let g = grad[i];
        mom.m[i] = cfg.beta1 * mom.m[i] + (1.0 - cfg.beta1) * g;
        mom.v[i] = cfg.beta2 * mom.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = mom.m[i] / bc1;
        let v_hat = mom.v[i] / bc2;
        theta[i] = theta[i] * decay - lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
}

/// `0.5·lr0·(1 + cos(π·step/total))`, floored at zero.
pub fn cosine_lr(step: usize, total_steps: usize, lr0: f64) -> Result<f64> {
    if step > total_steps {
        return Err(Error::StepOutOfRange {
            step,
            total: total_steps,
        });
    }
    if total_steps == 0 {
        return Ok(lr0);
    }
    let frac = step as f64 / total_steps as f64;
    Ok((0.5 * lr0 * (1.0 + (PI * frac).cos())).max(0.0))
}
