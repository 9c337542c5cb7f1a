use crate::error::{Error, Result};

use super::TrainConfig;

/// Linear warmup from 0 to the peak rate over `warmup_steps`, then linear
/// decay to 0 at `total_steps`.
pub fn lr_at(step: usize, total_steps: usize, cfg: &TrainConfig) -> Result<f64> {
    let warmup = cfg.warmup_steps;
    if total_steps < warmup {
        return Err(Error::Config(format!(
            "total steps {total_steps} shorter than warmup {warmup}"
        )));
    }
    if step > total_steps {
        return Err(Error::InvalidArgument(format!(
            "step {step} beyond total {total_steps}"
        )));
    }
    if step <= warmup && warmup > 0 {
        return Ok(cfg.lr * (step as f64 / warmup as f64));
    }
    let remaining = (total_steps - step) as f64 / (total_steps - warmup) as f64;
    Ok(cfg.lr * remaining)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints_and_peak() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at(0, 5000, &cfg).unwrap(), 0.0);
        assert_eq!(lr_at(1000, 5000, &cfg).unwrap(), 1e-4);
        assert_eq!(lr_at(5000, 5000, &cfg).unwrap(), 0.0);
        assert!((lr_at(500, 5000, &cfg).unwrap() - 5e-5).abs() < 1e-20);
        assert!((lr_at(3000, 5000, &cfg).unwrap() - 5e-5).abs() < 1e-18);
        assert!(lr_at(10, 999, &cfg).is_err());
    }

    #[test]
    fn no_warmup_starts_at_peak() {
        let cfg = TrainConfig {
            warmup_steps: 0,
            ..TrainConfig::default()
        };
        assert_eq!(lr_at(0, 10, &cfg).unwrap(), cfg.lr);
        assert_eq!(lr_at(10, 10, &cfg).unwrap(), 0.0);
    }
}
