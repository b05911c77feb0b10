//! Cosine-decay learning-rate schedule with linear warmup.

use crate::error::TrainError;

/// Learning rate at `step` of a `total_steps`-step run: linear warmup from
/// 0 to `lr0` over `ceil(warmup_frac * total_steps)` steps, then cosine
/// decay `lr0 * (1 + cos(pi * u)) / 2` where `u` spans the remaining steps.
/// Continuous at the junction: the first decay step yields exactly `lr0`.
pub fn cosine_lr(
    step: usize,
    total_steps: usize,
    warmup_frac: f64,
    lr0: f64,
) -> Result<f64, TrainError> {
    if step >= total_steps {
        return Err(TrainError::StepOutOfRange { step, total: total_steps });
    }
    let warmup = (warmup_frac * total_steps as f64).ceil() as usize;
    if step < warmup {
        return Ok(lr0 * step as f64 / warmup as f64);
    }
    let span = total_steps - warmup;
    if span == 0 {
        return Ok(lr0);
    }
    let u = (step - warmup) as f64 / span as f64;
    Ok(lr0 * (1.0 + (std::f64::consts::PI * u).cos()) / 2.0)
}
