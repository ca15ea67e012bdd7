use serde::{Deserialize, Serialize};

use super::params::{Layout, ModelParams};
use super::real::Real;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.99, eps: 1e-8, weight_decay: 0.1, clip_norm: 0.1 }
    }
}

/// First and second moments mirroring the parameter buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T = f32> {
    pub first: Vec<T>,
    pub second: Vec<T>,
    pub step: u64,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(params: &ModelParams<T>) -> Self {
        let n = params.data.len();
        Self { first: vec![T::zero(); n], second: vec![T::zero(); n], step: 0 }
    }
}

/// Which likelihood the step minimizes: the whole sequence, or only its first `M` tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossKind {
    Full,
    Prefix(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub grad_norm: f64,
    pub clipped_norm: f64,
}

/// Global L2 norm accumulated in 64-bit.
pub fn global_norm<T: Real>(grad: &[T]) -> f64 {
    grad.iter().map(|g| g.to_f64().unwrap().powi(2)).sum::<f64>().sqrt()
}

/// Rescales `grad` so its global norm is at most `max_norm`; returns the norm after clipping.
pub fn clip_grad<T: Real>(grad: &mut [T], max_norm: f64) -> f64 {
    let norm = global_norm(grad);
    if norm > max_norm {
        // Shrink by a few ulps so per-element rounding cannot push the norm back over.
        let margin = 1.0 - 4.0 * T::epsilon().to_f64().unwrap();
        let s = T::lit(max_norm / norm * margin);
        grad.iter_mut().for_each(|g| *g *= s);
        global_norm(grad)
    } else {
        norm
    }
}

/// Applies one AdamW update in place. Weight decay is decoupled and only
/// touches matrix parameters.
pub fn adamw_update<T: Real>(
    params: &mut ModelParams<T>,
    opt: &mut OptimizerState<T>,
    grad: &[T],
    rate: f64,
    cfg: &AdamWConfig,
) {
    opt.step += 1;
    let t = opt.step as i32;
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let c1 = T::lit(1.0 - cfg.beta1.powi(t));
    let c2 = T::lit(1.0 - cfg.beta2.powi(t));
    let lr = T::lit(rate);
    let eps = T::lit(cfg.eps);
    let decay = T::lit(rate * cfg.weight_decay);
    let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
    for entry in &Layout::new(&params.config).entries {
        let range = entry.offset..entry.offset + entry.len();
        let decays = entry.is_matrix() && cfg.weight_decay != 0.0;
        let p = &mut params.data[range.clone()];
        let m = &mut opt.first[range.clone()];
        let v = &mut opt.second[range.clone()];
        for (((p, m), v), &g) in p.iter_mut().zip(m).zip(v).zip(&grad[range.clone()]) {
            *m = b1 * *m + one_b1 * g;
            *v = b2 * *v + one_b2 * g * g;
            let update = (*m / c1) / ((*v / c2).sqrt() + eps);
            if decays {
                *p -= decay * *p;
            }
            *p -= lr * update;
        }
    }
}

/// One optimizer step on the mean per-sequence loss of `batch`.
pub fn train_step<T: Real>(
    params: &mut ModelParams<T>,
    opt: &mut OptimizerState<T>,
    batch: &[&[u32]],
    rate: f64,
    loss: LossKind,
    cfg: &AdamWConfig,
) -> Result<StepStats> {
    if !(rate >= 0.0) {
        return Err(Error::invalid(format!("learning rate must be non-negative, got {rate}")));
    }
    let truncated: Vec<&[u32]>;
    let batch = match loss {
        LossKind::Full => batch,
        LossKind::Prefix(m) => {
            if batch.iter().any(|s| m < 2 || m > s.len()) {
                return Err(Error::invalid(format!("prefix length {m} does not fit the batch")));
            }
            truncated = batch.iter().map(|s| &s[..m]).collect();
            &truncated
        }
    };
    let (value, mut grad) = params.loss_and_grad(batch)?;
    if !value.is_finite() {
        return Err(Error::Diverged { step: opt.step, loss: value });
    }
    let grad_norm = global_norm(&grad);
    if !grad_norm.is_finite() {
        return Err(Error::Diverged { step: opt.step, loss: value });
    }
    let clipped_norm = clip_grad(&mut grad, cfg.clip_norm);
    adamw_update(params, opt, &grad, rate, cfg);
    Ok(StepStats { loss: value, grad_norm, clipped_norm })
}
