use crate::error::{Error, Result};

/// Linear warmup from 0 to `peak` over `[0, warmup]`, then cosine decay to
/// `final_lr` at `total`.
pub fn lr_at_step(step: u64, total: u64, warmup: u64, peak: f64, final_lr: f64) -> f64 {
    let step = step.min(total);
    if step < warmup {
        return peak * step as f64 / warmup as f64;
    }
    if total <= warmup {
        return peak;
    }
    let t = (step - warmup) as f64 / (total - warmup) as f64;
    final_lr + 0.5 * (peak - final_lr) * (1.0 + (std::f64::consts::PI * t).cos())
}

/// `lr_base / sqrt(n / n_base)`.
pub fn scale_lr(n: usize, n_base: usize, lr_base: f64) -> Result<f64> {
    if n == 0 || n_base == 0 {
        return Err(Error::protocol("scale_lr needs positive parameter counts"));
    }
    Ok(lr_base / (n as f64 / n_base as f64).sqrt())
}
