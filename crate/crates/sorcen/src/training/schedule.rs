//! Learning-rate and EMA-momentum schedules.

use std::f64::consts::PI;

/// Linear warmup from 0 to `peak` over `warmup_steps`, then half-cosine
/// decay to exactly 0 at `total_steps`.
pub fn lr_at(step: u64, peak: f64, warmup_steps: u64, total_steps: u64) -> f64 {
    if step >= total_steps {
        return 0.0;
    }
    if step < warmup_steps {
        return peak * step as f64 / warmup_steps as f64;
    }
    let span = (total_steps - warmup_steps).max(1) as f64;
    let progress = (step - warmup_steps) as f64 / span;
    peak * 0.5 * (1.0 + (PI * progress).cos())
}

/// Teacher EMA momentum: half-cosine from `base` at step 0 to 1.0 at the
/// final step.
pub fn ema_momentum_at(step: u64, total_steps: u64, base: f64) -> f64 {
    if total_steps == 0 || step >= total_steps {
        return 1.0;
    }
    let progress = step as f64 / total_steps as f64;
    1.0 - (1.0 - base) * 0.5 * (1.0 + (PI * progress).cos())
}
