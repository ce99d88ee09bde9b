use crate::error::{Error, Result};

/// Number of warmup steps, `⌈warmup_frac · total_steps⌉`. Products within
/// rounding error of an integer count as that integer, so 0.7 · 10 is 7.
pub fn warmup_steps(total_steps: usize, warmup_frac: f64) -> usize {
    let x = warmup_frac * total_steps as f64;
    let r = x.round();
    if (x - r).abs() <= 1e-9 * r.max(1.0) {
        r as usize
    } else {
        x.ceil() as usize
    }
}

/// Linear warmup from 0 to `peak_lr` over the warmup steps, then linear
/// decay to 0 at `total_steps`.
pub fn lr_at_step(step: usize, total_steps: usize, peak_lr: f64, warmup_frac: f64) -> Result<f64> {
    if step > total_steps {
        return Err(Error::contract(format!(
            "step {step} beyond the schedule's {total_steps} steps"
        )));
    }
    if !(0.0..1.0).contains(&warmup_frac) {
        return Err(Error::contract(format!("warmup fraction {warmup_frac} outside [0,1)")));
    }
    let w = warmup_steps(total_steps, warmup_frac);
    if step < w {
        return Ok(peak_lr * (step as f64 / w as f64));
    }
    if step == total_steps {
        return Ok(0.0);
    }
    Ok(peak_lr * ((total_steps - step) as f64 / (total_steps - w) as f64))
}
