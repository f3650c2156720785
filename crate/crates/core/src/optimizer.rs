//! SGD with Nesterov momentum, reduce-on-plateau learning-rate halving and the
//! early-stopping rule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{GradientSet, MlpModel, ParamSet};

/// Relative margin a validation loss must beat the best loss by to count as
/// an improvement.
pub const IMPROVEMENT_RTOL: f64 = 1e-8;

fn improves(value: f64, best: f64) -> bool {
    if best.is_infinite() {
        return value < best;
    }
    value < best - IMPROVEMENT_RTOL * best.abs()
}

#[derive(Clone, Debug)]
pub struct SgdState {
    pub velocity: ParamSet,
    pub momentum: f64,
    pub nesterov: bool,
}

impl SgdState {
    pub fn new(model: &MlpModel, momentum: f64, nesterov: bool) -> Self {
        Self {
            velocity: ParamSet::zeros_like(model.params()),
            momentum,
            nesterov,
        }
    }

    pub fn nesterov(model: &MlpModel) -> Self {
        Self::new(model, 0.9, true)
    }
}

/// One update: `v ← μv + g`, then `θ ← θ − lr·(g + μv)` (Nesterov) or
/// `θ ← θ − lr·v`.
pub fn sgd_step(
    model: &mut MlpModel,
    grads: &GradientSet,
    state: &mut SgdState,
    lr: f64,
) -> Result<()> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "learning rate must be positive, got {lr}"
        )));
    }
    if !grads.congruent(model.params()) || !state.velocity.congruent(model.params()) {
        return Err(Error::Shape(
            "gradient or velocity shapes differ from the model".into(),
        ));
    }
    if !grads.all_finite() {
        return Err(Error::NonFinite("gradient".into()));
    }
    let mu = state.momentum;
    let nesterov = state.nesterov;
    let params = model.params_mut();
    for ((p, v), g) in params
        .iter_mut()
        .zip(state.velocity.iter_mut())
        .zip(grads.iter())
    {
        *v = mu * *v + g;
        let step = if nesterov { g + mu * *v } else { *v };
        *p -= lr * step;
    }
    Ok(())
}

/// Halves the learning rate after more than `patience` epochs without
/// improvement.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlateauScheduler {
    pub lr: f64,
    pub factor: f64,
    pub patience: usize,
    pub best: f64,
    pub bad_epochs: usize,
}

impl PlateauScheduler {
    pub fn new(lr: f64, factor: f64, patience: usize) -> Self {
        Self {
            lr,
            factor,
            patience,
            best: f64::INFINITY,
            bad_epochs: 0,
        }
    }

    /// Records one epoch's validation loss and returns the learning rate to
    /// use next.
    pub fn update(&mut self, val_loss: f64) -> f64 {
        if improves(val_loss, self.best) {
            self.best = val_loss;
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
        }
        if self.bad_epochs > self.patience {
            self.lr *= self.factor;
            self.bad_epochs = 0;
        }
        self.lr
    }
}

impl Default for PlateauScheduler {
    fn default() -> Self {
        Self::new(0.1, 0.5, 5)
    }
}

pub fn scheduler_update(sched: &mut PlateauScheduler, val_loss: f64) -> f64 {
    sched.update(val_loss)
}

/// Stops once the learning rate is below `lr_threshold` and the validation
/// loss has not improved for `patience` consecutive epochs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EarlyStop {
    pub lr_threshold: f64,
    pub patience: usize,
    pub best: f64,
    pub streak: usize,
}

impl EarlyStop {
    pub fn new(lr_threshold: f64, patience: usize) -> Self {
        Self {
            lr_threshold,
            patience,
            best: f64::INFINITY,
            streak: 0,
        }
    }

    pub fn observe(&mut self, lr: f64, val_loss: f64) -> bool {
        if improves(val_loss, self.best) {
            self.best = val_loss;
            self.streak = 0;
        } else {
            self.streak += 1;
        }
        lr < self.lr_threshold && self.streak >= self.patience
    }
}

impl Default for EarlyStop {
    fn default() -> Self {
        Self::new(1e-4, 5)
    }
}

pub fn should_stop(stop: &mut EarlyStop, lr: f64, val_loss: f64) -> bool {
    stop.observe(lr, val_loss)
}
