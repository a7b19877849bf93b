//! SGD with momentum and coupled weight decay, plus the step-halving
//! learning-rate schedule.
//!
//! Update rule, per parameter `w` with gradient `g` and velocity `v`:
//!
//! ```text
//! v <- momentum * v + g + weight_decay * w
//! w <- w - lr * v
//! ```

use crate::error::{Error, Result};
use crate::graph::ParamGrads;
use crate::nn::ParamStore;
use crate::shuffle::ShuffleFactors;
use crate::tensor::Tensor4;

#[derive(Debug, Clone)]
pub struct SgdState {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<(String, Tensor4)>,
    iteration: u64,
}

impl SgdState {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        SgdState { momentum, weight_decay, velocity: Vec::new(), iteration: 0 }
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn velocity(&self, name: &str) -> Option<&Tensor4> {
        self.velocity.iter().find(|(n, _)| n == name).map(|(_, v)| v)
    }

    /// One update with learning rate `lr`. Nothing is modified when any
    /// gradient is non-finite or mis-shaped.
    pub fn step(&mut self, params: &mut ParamStore, grads: &ParamGrads, lr: f64) -> Result<()> {
        if !(lr.is_finite() && lr > 0.0) {
            return Err(Error::InvalidArgument(format!("learning rate must be positive, got {lr}")));
        }
        for (name, g) in &grads.entries {
            let p = params.get(name)?;
            if p.shape() != g.shape() {
                return Err(Error::ShapeMismatch { expected: p.shape(), actual: g.shape() });
            }
            if !g.all_finite() {
                return Err(Error::NonFinite(format!("gradient of '{name}' (step skipped)")));
            }
        }
        for (name, g) in &grads.entries {
            let w = params.get_mut(name)?;
            let v = match self.velocity.iter().position(|(n, _)| n == name) {
                Some(i) => &mut self.velocity[i].1,
                None => {
                    self.velocity.push((name.clone(), Tensor4::zeros(w.shape())?));
                    &mut self.velocity.last_mut().expect("just pushed").1
                }
            };
            for ((vi, &gi), wi) in v.data_mut().iter_mut().zip(g.data()).zip(w.data_mut()) {
                *vi = self.momentum * *vi + gi + self.weight_decay * *wi;
                *wi -= lr * *vi;
            }
        }
        self.iteration += 1;
        Ok(())
    }
}

/// `initial * 0.5^floor(iteration / period)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub initial: f64,
    pub period: u64,
}

impl LrSchedule {
    pub fn new(initial: f64, period: u64) -> Result<Self> {
        if period == 0 {
            return Err(Error::Config("learning-rate halving period must be at least 1".into()));
        }
        if !(initial.is_finite() && initial > 0.0) {
            return Err(Error::Config(format!("initial learning rate must be positive, got {initial}")));
        }
        Ok(LrSchedule { initial, period })
    }

    pub fn lr_at(&self, iteration: u64) -> f64 {
        let halvings = (iteration / self.period).min(2000) as i32;
        self.initial * 0.5f64.powi(halvings)
    }
}

/// Initial learning rate per shuffle-factor setting; `(1,1,1)` is the plain
/// U-net baseline. Other factors have no entry and need an explicit rate.
pub const INITIAL_LR_TABLE: [((usize, usize, usize), f64); 6] = [
    ((1, 1, 1), 1.0e-3),
    ((2, 2, 2), 1.0e-3),
    ((4, 4, 2), 2.0e-3),
    ((8, 8, 2), 3.0e-3),
    ((16, 16, 2), 5.0e-3),
    ((25, 25, 2), 2.0e-2),
];

pub fn initial_lr_for(f: ShuffleFactors) -> Option<f64> {
    INITIAL_LR_TABLE
        .iter()
        .find(|((x, y, z), _)| (*x, *y, *z) == (f.nx, f.ny, f.nz))
        .map(|(_, lr)| *lr)
}
