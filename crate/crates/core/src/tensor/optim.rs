//! Rectified Adam.
//!
//! While the variance of the adaptive step is intractable (the SMA length
//! `rho_t <= 5`), the update falls back to bias-corrected momentum SGD.

use serde::{Deserialize, Serialize};

use super::params::{ParamGrads, ParamId, ParamStore};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RAdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for RAdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl RAdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

/// Step coefficients shared by every element at step `t`.
#[derive(Clone, Copy, Debug)]
struct StepCoeffs {
    /// Learning rate divided by the first-moment bias correction.
    momentum_lr: f64,
    /// `Some(sqrt(1 - beta2^t))` when the adaptive branch applies.
    adaptive: Option<(f64, f64)>,
}

#[derive(Clone, Debug)]
pub struct RAdam {
    pub config: RAdamConfig,
    managed: Vec<ParamId>,
    step: u64,
    first: Vec<Vec<f32>>,
    second: Vec<Vec<f32>>,
}

impl RAdam {
    /// An optimizer over `managed` parameters of `store`.
    pub fn new(config: RAdamConfig, store: &ParamStore, managed: &[ParamId]) -> Self {
        let first: Vec<Vec<f32>> = managed.iter().map(|&id| vec![0.0; store.value(id).len()]).collect();
        Self { config, managed: managed.to_vec(), step: 0, second: first.clone(), first }
    }

    /// An optimizer over free-standing slices of the given lengths.
    pub fn for_slices(config: RAdamConfig, lens: &[usize]) -> Self {
        let first: Vec<Vec<f32>> = lens.iter().map(|&n| vec![0.0; n]).collect();
        Self { config, managed: Vec::new(), step: 0, second: first.clone(), first }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn managed(&self) -> &[ParamId] {
        &self.managed
    }

    fn coeffs(&self) -> StepCoeffs {
        let RAdamConfig { lr, beta1, beta2, .. } = self.config;
        let t = self.step as f64;
        let bc1 = 1.0 - beta1.powf(t);
        let b2t = beta2.powf(t);
        let rho_inf = 2.0 / (1.0 - beta2) - 1.0;
        let rho_t = rho_inf - 2.0 * t * b2t / (1.0 - b2t);
        let adaptive = (rho_t > 5.0).then(|| {
            let r = ((rho_t - 4.0) * (rho_t - 2.0) * rho_inf / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t)).sqrt();
            (r, (1.0 - b2t).sqrt())
        });
        StepCoeffs { momentum_lr: lr / bc1, adaptive }
    }

    fn update(&mut self, slot: usize, coeffs: StepCoeffs, param: &mut [f32], grad: &[f32]) {
        let RAdamConfig { beta1, beta2, eps, .. } = self.config;
        let (m, v) = (&mut self.first[slot], &mut self.second[slot]);
        for i in 0..param.len() {
            let g = grad[i] as f64;
            let mi = beta1 * m[i] as f64 + (1.0 - beta1) * g;
            let vi = beta2 * v[i] as f64 + (1.0 - beta2) * g * g;
            m[i] = mi as f32;
            v[i] = vi as f32;
            let delta = match coeffs.adaptive {
                Some((r, bc2_sqrt)) => coeffs.momentum_lr * r * mi / (vi.sqrt() / bc2_sqrt + eps),
                None => coeffs.momentum_lr * mi,
            };
            param[i] = (param[i] as f64 - delta) as f32;
        }
    }

    /// One step over every managed parameter; `grads` is cleared afterwards.
    pub fn step(&mut self, store: &mut ParamStore, grads: &mut ParamGrads) -> Result<()> {
        for &id in &self.managed {
            let g = grads.get(id).ok_or_else(|| Error::MissingGrad(store.param(id).name.clone()))?;
            if g.shape() != store.value(id).shape() {
                return Err(Error::shape("radam_step", format!("{:?} vs {:?}", g.shape(), store.value(id).shape())));
            }
        }
        self.step += 1;
        let coeffs = self.coeffs();
        for slot in 0..self.managed.len() {
            let id = self.managed[slot];
            let g = grads.get(id).expect("checked above").clone();
            let mut value = store.value(id).clone();
            self.update(slot, coeffs, value.data_mut(), g.data());
            store.set(id, value)?;
        }
        grads.clear();
        Ok(())
    }

    /// One step over free-standing slices, in the order given to
    /// [`RAdam::for_slices`].
    pub fn step_slices(&mut self, params: &mut [&mut [f32]], grads: &[&[f32]]) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != params.len() {
            return Err(Error::shape("radam_step", format!("{} params / {} grads for {} slots", params.len(), grads.len(), self.first.len())));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != self.first[i].len() || g.len() != p.len() {
                return Err(Error::shape("radam_step", format!("slot {i}: {} params / {} grads", p.len(), g.len())));
            }
        }
        self.step += 1;
        let coeffs = self.coeffs();
        for (slot, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            self.update(slot, coeffs, p, g);
        }
        Ok(())
    }
}
