//! Small helpers shared by the training loops.

use aftermath_nn::Scalar;
use rand::Rng;

use crate::error::{Error, Result};

/// Linear warm-up followed by cosine decay to a tenth of the base rate.
pub fn scheduled_lr(base: f64, step: usize, total: usize) -> f64 {
    let warmup = (total / 20).clamp(1, 100);
    if step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    let t = (step - warmup) as f64 / (total.saturating_sub(warmup)).max(1) as f64;
    base * (0.1 + 0.9 * 0.5 * (1.0 + (std::f64::consts::PI * t.min(1.0)).cos()))
}

pub fn sample_indices<R: Rng + ?Sized>(n: usize, batch: usize, rng: &mut R) -> Vec<usize> {
    (0..batch).map(|_| rng.random_range(0..n)).collect()
}

pub fn finite_loss<T: Scalar>(loss: T, stage: &str, step: usize) -> Result<f64> {
    let v = loss.to_f64().unwrap_or(f64::NAN);
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numeric(format!("{stage}: loss became {v} at step {step}")))
    }
}

/// Mean of each consecutive window, used to summarize loss curves.
pub fn smoothed(curve: &[f64], window: usize) -> Vec<f64> {
    curve.chunks(window.max(1)).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_shape() {
        assert!(scheduled_lr(1.0, 0, 1000) < 0.1);
        assert!((scheduled_lr(1.0, 50, 1000) - 1.0).abs() < 1e-3);
        assert!((scheduled_lr(1.0, 999, 1000) - 0.1).abs() < 1e-3);
    }
}
