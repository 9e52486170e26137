//! Adam with decoupled weight decay, global-norm clipping and a
//! warmup-then-cosine learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    pub clip_norm: f32,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.1,
            clip_norm: 1.0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let in_unit = |b: f32| (0.0..1.0).contains(&b);
        if !in_unit(self.beta1) || !in_unit(self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) || !(self.clip_norm > 0.0) {
            return Err(Error::Config(
                "eps and clip_norm must be > 0, weight_decay >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// Global L2 norm of a gradient set, accumulated in double precision.
pub fn global_norm(grads: &[Tensor]) -> f32 {
    grads
        .iter()
        .flat_map(|g| g.data())
        .map(|&x| f64::from(x) * f64::from(x))
        .sum::<f64>()
        .sqrt() as f32
}

/// Rescales `grads` in place so their global norm is at most `max_norm`.
/// Returns the pre-clip norm. Non-finite gradients are left untouched and
/// reported as [`Error::NonFinite`].
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f32) -> Result<f32> {
    if !(max_norm > 0.0) {
        return Err(Error::Config(format!(
            "max_norm must be > 0, got {max_norm}"
        )));
    }
    let norm = global_norm(grads);
    if !norm.is_finite() {
        return Err(Error::NonFinite(format!("gradient global norm is {norm}")));
    }
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    Ok(norm)
}

/// Per-parameter Adam moments and the shared step counter.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub cfg: OptimizerConfig,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    step: u64,
}

impl AdamW {
    pub fn new(cfg: OptimizerConfig, params: &ParamSet) -> Result<Self> {
        cfg.validate()?;
        let zeros = || params.iter().map(|p| vec![0.0; p.value.len()]).collect();
        Ok(Self {
            cfg,
            m: zeros(),
            v: zeros(),
            step: 0,
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, i: usize) -> &[f32] {
        &self.m[i]
    }

    pub fn second_moment(&self, i: usize) -> &[f32] {
        &self.v[i]
    }

    /// One bias-corrected Adam update at learning rate `lr`. Parameters
    /// flagged for decay first shrink by `lr · weight_decay`.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Tensor], lr: f32) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(dim_err!(
                "{} gradients and {} moment slots for {} parameters",
                grads.len(),
                self.m.len(),
                params.len()
            ));
        }
        if !(lr >= 0.0) {
            return Err(Error::Config(format!(
                "learning rate must be >= 0, got {lr}"
            )));
        }
        self.step += 1;
        let OptimizerConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
            ..
        } = self.cfg;
        let t = self.step as i32;
        let bc1 = 1.0 - f64::from(beta1).powi(t);
        let bc2 = 1.0 - f64::from(beta2).powi(t);
        for (i, (param, grad)) in params.iter_mut().zip(grads).enumerate() {
            if param.value.shape() != grad.shape() {
                return Err(dim_err!(
                    "gradient {:?} for parameter '{}' of shape {:?}",
                    grad.shape(),
                    param.name,
                    param.value.shape()
                ));
            }
            let decay = if param.decay { lr * weight_decay } else { 0.0 };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((p, &g), mi), vi) in param
                .value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *p -= decay * *p;
                *mi = beta1 * *mi + (1.0 - beta1) * g;
                *vi = beta2 * *vi + (1.0 - beta2) * g * g;
                let m_hat = f64::from(*mi) / bc1;
                let v_hat = f64::from(*vi) / bc2;
                *p -= (f64::from(lr) * m_hat / (v_hat.sqrt() + f64::from(eps))) as f32;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub peak_lr: f32,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub min_lr: f32,
}

impl LrSchedule {
    pub fn new(peak_lr: f32, warmup_steps: u64, total_steps: u64, min_lr: f32) -> Result<Self> {
        if warmup_steps >= total_steps {
            return Err(Error::Config(format!(
                "warmup ({warmup_steps}) must be shorter than the run ({total_steps})"
            )));
        }
        if !(min_lr >= 0.0 && min_lr <= peak_lr) {
            return Err(Error::Config(format!(
                "need 0 <= min_lr <= peak_lr, got {min_lr} / {peak_lr}"
            )));
        }
        Ok(Self {
            peak_lr,
            warmup_steps,
            total_steps,
            min_lr,
        })
    }

    /// Warmup over 1% of the run and a floor at a tenth of the peak.
    pub fn with_defaults(peak_lr: f32, total_steps: u64) -> Result<Self> {
        let warmup = (total_steps / 100).max(1);
        Self::new(peak_lr, warmup, total_steps.max(warmup + 1), peak_lr / 10.0)
    }

    pub fn lr_at(&self, step: u64) -> f32 {
        let (peak, min) = (f64::from(self.peak_lr), f64::from(self.min_lr));
        let lr = if step < self.warmup_steps {
            peak * step as f64 / self.warmup_steps as f64
        } else if step >= self.total_steps {
            min
        } else {
            let progress =
                (step - self.warmup_steps) as f64 / (self.total_steps - self.warmup_steps) as f64;
            min + 0.5 * (peak - min) * (1.0 + (std::f64::consts::PI * progress).cos())
        };
        lr as f32
    }
}
