//! AdamW with decoupled weight decay.

use crate::error::{Error, Result};
use crate::grid::{Grid, Real};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if self.weight_decay < 0.0 || !(self.eps > 0.0) {
            return Err(Error::Config("weight decay must be >= 0 and eps > 0".into()));
        }
        Ok(())
    }
}

/// First and second moment buffers for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments<T> {
    pub m: Grid<T>,
    pub v: Grid<T>,
}

impl<T: Real> Moments<T> {
    pub fn zeros_like(p: &Grid<T>) -> Self {
        Moments {
            m: Grid::zeros(p.shape()),
            v: Grid::zeros(p.shape()),
        }
    }
}

/// One AdamW update of `param` in place; `step` is the 1-based step index.
pub fn adam_step<T: Real>(
    param: &mut Grid<T>,
    grad: &Grid<T>,
    state: &mut Moments<T>,
    cfg: &AdamConfig,
    step: u64,
) -> Result<()> {
    cfg.validate()?;
    if step == 0 {
        return Err(Error::contract("adam_step", "step index starts at 1"));
    }
    if param.shape() != grad.shape() || param.shape() != state.m.shape() || param.shape() != state.v.shape() {
        return Err(Error::contract(
            "adam_step",
            format!(
                "param {:?}, grad {:?}, moments {:?} disagree",
                param.shape(),
                grad.shape(),
                state.m.shape()
            ),
        ));
    }
    let lr = T::of(cfg.lr);
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let decay = T::one() - T::of(cfg.lr * cfg.weight_decay);
    let bc1 = T::of(1.0 - cfg.beta1.powi(step as i32));
    let bc2 = T::of(1.0 - cfg.beta2.powi(step as i32));
    let eps = T::of(cfg.eps);
    let (m, v) = (state.m.data_mut(), state.v.data_mut());
    for (((p, &g), m), v) in param.data_mut().iter_mut().zip(grad.data()).zip(m).zip(v) {
        *p *= decay;
        *m = b1 * *m + (T::one() - b1) * g;
        *v = b2 * *v + (T::one() - b2) * g * g;
        let mhat = *m / bc1;
        let vhat = *v / bc2;
        *p -= lr * mhat / (vhat.sqrt() + eps);
    }
    Ok(())
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<T: Real>(grads: &mut [Grid<T>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|&v| {
            let v = v.as_f64();
            v * v
        })
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = T::of(max_norm / norm);
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}
