//! AdamW with decoupled weight decay, bias correction and global-norm
//! clipping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.1,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |b: f64| (0.0..1.0).contains(&b);
        if !unit(self.beta1) || !unit(self.beta2) || self.eps <= 0.0 || self.weight_decay < 0.0 {
            return Err(Error::Config(format!(
                "adam: need 0 <= beta < 1, eps > 0, weight_decay >= 0, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Moment estimates, one pair per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    /// Number of completed updates.
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &[&Tensor<T>]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
        AdamState {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// Per-update settings.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub adam: AdamConfig,
    /// Global L2 norm bound; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UpdateStats {
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub clip_coef: f64,
}

/// One AdamW update of `params` in place.
///
/// `decay[i]` selects which tensors receive weight decay. Gradients are scaled
/// by `min(1, clip / (norm + 1e-6))` before the moments are updated.
pub fn adamw_step<T: Scalar>(
    params: &mut [&mut Tensor<T>],
    grads: &[Tensor<T>],
    decay: &[bool],
    state: &mut AdamState<T>,
    hyper: &AdamHyper,
) -> Result<UpdateStats> {
    let n = params.len();
    if grads.len() != n || decay.len() != n || state.m.len() != n {
        return Err(Error::shape("adamw_step", &[n], &[grads.len(), decay.len(), state.m.len()]));
    }
    let next = state.step + 1;
    let mut sq = 0.0f64;
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::shape("adamw_step", p.shape(), g.shape()));
        }
        sq += g.data().iter().map(|v| v.as_f64().powi(2)).sum::<f64>();
    }
    let grad_norm = sq.sqrt();
    if !grad_norm.is_finite() {
        return Err(Error::Diverged {
            step: next,
            reason: "non-finite gradient".into(),
        });
    }
    let clip_coef = match hyper.clip_norm {
        Some(c) => (c / (grad_norm + 1e-6)).min(1.0),
        None => 1.0,
    };

    let a = &hyper.adam;
    let (b1, b2) = (T::of(a.beta1), T::of(a.beta2));
    let (one_b1, one_b2) = (T::of(1.0 - a.beta1), T::of(1.0 - a.beta2));
    let bc1 = 1.0 - a.beta1.powi(next as i32);
    let bc2 = 1.0 - a.beta2.powi(next as i32);
    let step_size = T::of(hyper.lr / bc1);
    let inv_sqrt_bc2 = T::of(1.0 / bc2.sqrt());
    let eps = T::of(a.eps);
    let coef = T::of(clip_coef);
    for i in 0..n {
        let shrink = if decay[i] {
            T::of(1.0 - hyper.lr * a.weight_decay)
        } else {
            T::one()
        };
        let p = params[i].data_mut();
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        for (j, &g) in grads[i].data().iter().enumerate() {
            let g = g * coef;
            m[j] = b1 * m[j] + one_b1 * g;
            v[j] = b2 * v[j] + one_b2 * g * g;
            let denom = v[j].sqrt() * inv_sqrt_bc2 + eps;
            p[j] = p[j] * shrink - step_size * m[j] / denom;
        }
    }
    state.step = next;
    Ok(UpdateStats {
        grad_norm,
        clip_coef,
    })
}

/// Cosine decay from `peak` to `floor` over `total` updates after a linear
/// warmup of `warmup` updates. `step` counts completed updates.
pub fn cosine_lr(step: u64, total: u64, warmup: u64, peak: f64, floor: f64) -> f64 {
    if step < warmup {
        return peak * (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1);
    let progress = ((step - warmup) as f64 / span as f64).min(1.0);
    floor + 0.5 * (peak - floor) * (1.0 + (std::f64::consts::PI * progress).cos())
}
