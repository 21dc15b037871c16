use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ParamSet, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moments exist only for trainable parameters.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Option<Tensor>>,
    v: Vec<Option<Tensor>>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamSet) -> Self {
        let moments = || {
            params
                .iter()
                .map(|p| p.trainable.then(|| Tensor::zeros(p.value.shape())))
                .collect::<Vec<_>>()
        };
        Self {
            config,
            step: 0,
            m: moments(),
            v: moments(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update from the accumulated gradients and clears them.
    /// A non-finite gradient rejects the whole update and leaves state untouched.
    pub fn step(&mut self, params: &mut ParamSet) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::State(format!(
                "optimizer built for {} parameters, given {}",
                self.m.len(),
                params.len()
            )));
        }
        for p in params.iter().filter(|p| p.trainable) {
            if !p.grad.is_finite() {
                return Err(Error::NonFinite(format!("gradient of {} is not finite", p.name)));
            }
        }
        self.step += 1;
        let t = self.step as f64;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let c1 = 1.0 - beta1.powf(t);
        let c2 = 1.0 - beta2.powf(t);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let (Some(m), Some(v)) = (m.as_mut(), v.as_mut()) else {
                continue;
            };
            let g = p.grad.data();
            let val = p.value.data_mut();
            for k in 0..g.len() {
                let mk = &mut m.data_mut()[k];
                *mk = beta1 * *mk + (1.0 - beta1) * g[k];
                let vk = &mut v.data_mut()[k];
                *vk = beta2 * *vk + (1.0 - beta2) * g[k] * g[k];
                let mhat = *mk / c1;
                let vhat = *vk / c2;
                val[k] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        params.zero_grad();
        Ok(())
    }
}

/// `target ← τ · online + (1 − τ) · target` for every stored value.
pub fn polyak_update(target: &mut ParamSet, online: &ParamSet, tau: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::Config(format!("tau {tau} outside [0, 1]")));
    }
    target.check_congruent(online)?;
    for (t, o) in target.iter_mut().zip(online.iter()) {
        for (tv, ov) in t.value.data_mut().iter_mut().zip(o.value.data()) {
            *tv = tau * ov + (1.0 - tau) * *tv;
        }
    }
    Ok(())
}
