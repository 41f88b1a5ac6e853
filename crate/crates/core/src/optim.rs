//! Adam with global-norm clipping, plus the warmup / Newbob learning-rate
//! schedule.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::params::Params;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Gradients are rescaled to this global L2 norm when they exceed it.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(5.0),
        }
    }
}

/// First and second moments, one pair per parameter tensor in traversal
/// order, keyed by name so the state can follow a growing model.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub names: Vec<String>,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new<P: Params>(params: &P, config: AdamConfig) -> Self {
        let named = params.named_tensors();
        AdamState {
            config,
            step: 0,
            names: named.iter().map(|(n, _)| n.clone()).collect(),
            m: named.iter().map(|(_, t)| t.zeros_like()).collect(),
            v: named.iter().map(|(_, t)| t.zeros_like()).collect(),
        }
    }

    /// Re-keys the moments to a (possibly grown) parameter set. Tensors
    /// that kept their name and shape keep their moments; new ones start
    /// at zero.
    pub fn realign<P: Params>(&mut self, params: &P) {
        let mut fresh = AdamState::new(params, self.config);
        fresh.step = self.step;
        for (i, name) in fresh.names.iter().enumerate() {
            if let Some(j) = self.names.iter().position(|n| n == name) {
                if self.m[j].shape() == fresh.m[i].shape() {
                    fresh.m[i] = self.m[j].clone();
                    fresh.v[i] = self.v[j].clone();
                }
            }
        }
        *self = fresh;
    }

    fn check<P: Params>(&self, params: &P) -> Result<()> {
        let named = params.named_tensors();
        if named.len() != self.names.len()
            || named
                .iter()
                .zip(&self.m)
                .any(|((_, t), m)| t.shape() != m.shape())
        {
            return Err(Error::dim(
                "adam_step",
                format!(
                    "optimizer state has {} tensors, parameters have {}",
                    self.names.len(),
                    named.len()
                ),
            ));
        }
        Ok(())
    }
}

/// Rescales `grads` in place to at most `max_norm`; returns the norm
/// before clipping.
pub fn clip_global_norm<P: Params>(grads: &mut P, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm && norm > 0.0 {
        grads.scale(max_norm / norm);
    }
    norm
}

/// One bias-corrected Adam update. Clips `grads` first when configured.
/// Returns the gradient norm before clipping.
pub fn adam_step<P: Params>(
    params: &mut P,
    grads: &mut P,
    state: &mut AdamState,
    lr: f64,
) -> Result<f64> {
    state.check(params)?;
    let norm = match state.config.clip_norm {
        Some(c) => clip_global_norm(grads, c),
        None => grads.global_norm(),
    };
    state.step += 1;
    let AdamConfig {
        beta1, beta2, eps, ..
    } = state.config;
    let t = state.step as f64;
    let bc1 = 1.0 - libm::pow(beta1, t);
    let bc2 = 1.0 - libm::pow(beta2, t);
    let g_all = grads.tensors();
    let (ms, vs) = (&mut state.m, &mut state.v);
    let mut i = 0;
    params.visit_mut(&mut |p| {
        let g = g_all[i].data();
        let m = ms[i].data_mut();
        let v = vs[i].data_mut();
        for (((w, &gj), mj), vj) in p.data_mut().iter_mut().zip(g).zip(m).zip(v) {
            *mj = beta1 * *mj + (1.0 - beta1) * gj;
            *vj = beta2 * *vj + (1.0 - beta2) * gj * gj;
            let m_hat = *mj / bc1;
            let v_hat = *vj / bc2;
            *w -= lr * m_hat / (libm::sqrt(v_hat) + eps);
        }
        i += 1;
    });
    Ok(norm)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrConfig {
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub newbob_factor: f64,
    pub newbob_patience: usize,
}

impl LrConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.newbob_factor > 0.0 && self.newbob_factor < 1.0) {
            return Err(Error::Config(format!(
                "newbob factor {} outside (0, 1)",
                self.newbob_factor
            )));
        }
        if self.newbob_patience == 0 {
            return Err(Error::Config(String::from("newbob patience must be ≥ 1")));
        }
        if !(self.base_lr > 0.0) {
            return Err(Error::Config(String::from("learning rate must be positive")));
        }
        Ok(())
    }
}

/// Number of Newbob decays triggered by a history of dev perplexities: a
/// decay fires whenever `patience` consecutive checkpoints fail to beat the
/// best value so far, and the count restarts after each decay.
pub fn newbob_decays(dev_ppls: &[f64], patience: usize) -> usize {
    let mut best = f64::INFINITY;
    let mut stale = 0;
    let mut decays = 0;
    for &p in dev_ppls {
        if p < best {
            best = p;
            stale = 0;
        } else {
            stale += 1;
            if stale >= patience {
                decays += 1;
                stale = 0;
            }
        }
    }
    decays
}

/// Linear warmup from 0 to `base_lr`, then `base_lr · factor^decays`.
pub fn lr_schedule(step: u64, dev_ppls: &[f64], cfg: &LrConfig) -> f64 {
    let warm = if cfg.warmup_steps == 0 || step >= cfg.warmup_steps {
        1.0
    } else {
        step as f64 / cfg.warmup_steps as f64
    };
    let decays = newbob_decays(dev_ppls, cfg.newbob_patience);
    cfg.base_lr * warm * libm::pow(cfg.newbob_factor, decays as f64)
}
