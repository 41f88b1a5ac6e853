//! Finite-difference verification of the analytic gradients of the whole
//! model, tensor by tensor.

use alloc::string::String;
use alloc::vec::Vec;

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::model::{backward, forward_teacher_forced, loss_and_grad, ModelConfig, ModelParams, EOS};
use crate::params::Params;
use crate::tensor::{SeededRng, Tensor};

/// Denominator floor for [`relative_error`]. Central differences with
/// `h = 1e-5` carry roughly `1e-11` of rounding noise, so a pure ratio is
/// meaningless for entries much smaller than this.
pub const REL_ERR_FLOOR: f64 = 1e-5;

/// `|a − b| / max(|a|, |b|, REL_ERR_FLOOR)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERR_FLOOR)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckConfig {
    pub model: ModelConfig,
    pub frames: usize,
    pub labels: usize,
    pub step: f64,
    pub tolerance: f64,
    pub label_smoothing: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            model: ModelConfig {
                encoder: EncoderConfig {
                    input_dim: 8,
                    hidden_per_direction: 8,
                    pool_factors: alloc::vec![2, 2],
                },
                grid_hidden: 8,
                embed_dim: 8,
                vocab_size: 5,
            },
            frames: 12,
            labels: 3,
            step: 1e-5,
            tolerance: 1e-5,
            label_smoothing: 0.1,
            seed: 1234,
        }
    }
}

pub const MAX_PARAMS: usize = 20_000;

#[derive(Debug, Clone, PartialEq)]
pub struct TensorReport {
    pub name: String,
    pub values: usize,
    pub max_rel_err: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub loss: f64,
    pub tensors: Vec<TensorReport>,
}

impl GradCheckReport {
    pub fn all_passed(&self) -> bool {
        self.tensors.iter().all(|t| t.passed)
    }

    pub fn worst(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel_err).fold(0.0, f64::max)
    }
}

pub fn grad_check(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    grad_check_with(cfg, |_| {})
}

/// Like [`grad_check`], but lets the caller tamper with the analytic
/// gradients before comparison (used to prove the harness notices).
pub fn grad_check_with(
    cfg: &GradCheckConfig,
    tamper: impl FnOnce(&mut ModelParams),
) -> Result<GradCheckReport> {
    let mut rng = SeededRng::new(cfg.seed);
    let mut params = ModelParams::init(&cfg.model, &mut rng)?;
    if params.num_values() > MAX_PARAMS {
        return Err(Error::Config(alloc::format!(
            "gradient check needs fewer than {MAX_PARAMS} parameters, config has {}",
            params.num_values()
        )));
    }
    // non-zero biases so their paths are exercised away from the origin
    params.visit_mut(&mut |t| {
        if t.shape().len() == 1 {
            for v in t.data_mut() {
                *v = 0.1 * rng.normal();
            }
        }
    });
    let f = cfg.model.encoder.input_dim;
    let x = Tensor::new(
        &[cfg.frames, f],
        (0..cfg.frames * f).map(|_| rng.normal()).collect(),
    )?;
    let v = cfg.model.vocab_size;
    let labels: Vec<usize> = (0..cfg.labels).map(|_| rng.int_inclusive(EOS + 1, v - 1)).collect();
    let mut refs = labels.clone();
    refs.push(EOS);

    let loss_at = |p: &ModelParams| -> Result<f64> {
        let out = forward_teacher_forced(&x, &labels, &cfg.model, p)?;
        Ok(loss_and_grad(&out.logits, &refs, cfg.label_smoothing)?.0)
    };

    let out = forward_teacher_forced(&x, &labels, &cfg.model, &params)?;
    let (loss, dlogits) = loss_and_grad(&out.logits, &refs, cfg.label_smoothing)?;
    let mut grads = params.zeros_like();
    backward(&out, &dlogits, &params, &mut grads)?;
    tamper(&mut grads);

    let named: Vec<(String, usize)> = params
        .named_tensors()
        .into_iter()
        .map(|(n, t)| (n, t.len()))
        .collect();
    let analytic: Vec<Tensor> = grads.tensors().into_iter().cloned().collect();
    let mut probe = params.clone();
    let mut tensors = Vec::with_capacity(named.len());
    for (ti, (name, len)) in named.into_iter().enumerate() {
        let mut worst: f64 = 0.0;
        for e in 0..len {
            let orig = probe.set_value(ti, e, 0.0);
            probe.set_value(ti, e, orig + cfg.step);
            let lp = loss_at(&probe)?;
            probe.set_value(ti, e, orig - cfg.step);
            let lm = loss_at(&probe)?;
            probe.set_value(ti, e, orig);
            let numeric = (lp - lm) / (2.0 * cfg.step);
            let err = relative_error(analytic[ti].data()[e], numeric);
            worst = worst.max(err);
        }
        tensors.push(TensorReport {
            name,
            values: len,
            max_rel_err: worst,
            passed: worst < cfg.tolerance,
        });
    }
    Ok(GradCheckReport {
        tolerance: cfg.tolerance,
        loss,
        tensors,
    })
}
