//! SGD step for the online branch and alternating EMA updates for the targets.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::networks::TARGET_ROLES;
use crate::nn::Gradients;
use crate::weights::{Kind, WeightError, WeightSet};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum UpdateError {
    #[error(transparent)]
    Weights(#[from] WeightError),
    #[error("invalid hyperparameter: {0}")]
    Hyper(String),
}

/// SGD with momentum and coupled weight decay.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerHyper {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Whether decay also applies to normalization scale/shift parameters.
    pub decay_norm_params: bool,
}

impl Default for OptimizerHyper {
    fn default() -> Self {
        Self { lr: 0.03, momentum: 0.9, weight_decay: 0.0004, decay_norm_params: true }
    }
}

impl OptimizerHyper {
    pub fn validate(&self) -> Result<(), UpdateError> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(UpdateError::Hyper(format!("optimizer.lr must be >= 0, got {}", self.lr)));
        }
        if !(self.momentum >= 0.0 && self.momentum.is_finite()) {
            return Err(UpdateError::Hyper(format!("optimizer.momentum must be >= 0, got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(UpdateError::Hyper(format!(
                "optimizer.weight_decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

/// Momentum buffers keyed like the online learnables.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SgdState {
    pub buffers: BTreeMap<String, Vec<f64>>,
}

fn is_norm_param(name: &str) -> bool {
    name.ends_with(".gamma") || name.ends_with(".beta")
}

/// `buf ← momentum·buf + grad + wd·w`, `w ← w − lr·buf` for every learnable.
/// Running statistics are left untouched.
pub fn optimizer_step(
    weights: &mut WeightSet,
    grads: &Gradients,
    state: &mut SgdState,
    hyper: &OptimizerHyper,
) -> Result<(), UpdateError> {
    weights.check_gradient_keys(grads)?;
    for (name, entry) in weights.iter_mut() {
        if entry.kind != Kind::Learnable {
            continue;
        }
        let grad = grads.get(name).expect("keys checked above");
        let wd = if !hyper.decay_norm_params && is_norm_param(name) { 0.0 } else { hyper.weight_decay };
        let buf = state.buffers.entry(name.clone()).or_insert_with(|| vec![0.0; entry.data.len()]);
        for ((w, b), &g) in entry.data.iter_mut().zip(buf.iter_mut()).zip(grad) {
            *b = hyper.momentum * *b + g as f64 + wd * *w;
            *w -= hyper.lr * *b;
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TauSchedule {
    Constant,
    /// `τ_k = 1 − (1 − τ)·(cos(πk/K) + 1)/2`, rising from `τ` to 1 over the run.
    Cosine,
}

/// Which target even iterations update; odd iterations update the other one.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Parity {
    EvenTarget2,
    EvenTarget3,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmaSchedule {
    pub tau: f64,
    pub schedule: TauSchedule,
    pub parity: Parity,
}

impl Default for EmaSchedule {
    fn default() -> Self {
        Self { tau: 0.99, schedule: TauSchedule::Constant, parity: Parity::EvenTarget2 }
    }
}

impl EmaSchedule {
    pub fn validate(&self) -> Result<(), UpdateError> {
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(UpdateError::Hyper(format!("ema.tau must be in [0, 1], got {}", self.tau)));
        }
        Ok(())
    }

    /// Momentum coefficient at `iteration` of a run lasting `total` iterations.
    pub fn tau_at(&self, iteration: u64, total: u64) -> f64 {
        match self.schedule {
            TauSchedule::Constant => self.tau,
            TauSchedule::Cosine => {
                let progress = if total == 0 { 1.0 } else { (iteration as f64 / total as f64).min(1.0) };
                1.0 - (1.0 - self.tau) * ((std::f64::consts::PI * progress).cos() + 1.0) / 2.0
            }
        }
    }
}

/// Target branch (2 or 3) that receives the EMA update at `iteration`.
pub fn select_target(iteration: u64, schedule: &EmaSchedule) -> u8 {
    let even = iteration % 2 == 0;
    match (schedule.parity, even) {
        (Parity::EvenTarget2, true) | (Parity::EvenTarget3, false) => 2,
        _ => 3,
    }
}

/// `target ← τ·target + (1 − τ)·online` over every target entry, running
/// statistics included.
pub fn ema_update(target: &mut WeightSet, online: &WeightSet, tau: f64) -> Result<(), UpdateError> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(UpdateError::Hyper(format!("tau must be in [0, 1], got {tau}")));
    }
    online.check_congruent(target, &TARGET_ROLES)?;
    for (name, entry) in target.iter_mut() {
        let src = &online.get(name).expect("congruence checked above").data;
        for (t, &o) in entry.data.iter_mut().zip(src) {
            *t = tau * *t + (1.0 - tau) * o;
        }
    }
    Ok(())
}
