use crate::domain::Schedule;
use crate::error::{Error, Result};

/// Share of steps spent warming up.
pub const WARMUP_SHARE: f64 = 0.3;
/// Starting rate is `lr_max / START_DIVISOR`.
pub const START_DIVISOR: f64 = 25.0;
/// Final rate is `lr_max / END_DIVISOR`.
pub const END_DIVISOR: f64 = 1e4;

/// One-cycle rate: cosine warm-up from `lr_max/25` to `lr_max` over the first
/// 30% of steps, then cosine annealing to `lr_max/1e4` at the last step.
pub fn one_cycle_lr(step: usize, total_steps: usize, lr_max: f64) -> Result<f64> {
    if step >= total_steps {
        return Err(Error::Argument(format!("step {step} outside 0..{total_steps}")));
    }
    let start = lr_max / START_DIVISOR;
    let end = lr_max / END_DIVISOR;
    let peak = WARMUP_SHARE * total_steps as f64;
    let s = step as f64;
    if s < peak {
        let progress = s / peak;
        return Ok(start + (lr_max - start) * 0.5 * (1.0 - (std::f64::consts::PI * progress).cos()));
    }
    let span = (total_steps - 1) as f64 - peak;
    if span <= 0.0 {
        return Ok(lr_max);
    }
    let progress = (s - peak) / span;
    Ok(end + (lr_max - end) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

pub fn learning_rate(schedule: Schedule, step: usize, total_steps: usize, lr_max: f64) -> Result<f64> {
    match schedule {
        Schedule::OneCycle => one_cycle_lr(step, total_steps, lr_max),
        Schedule::Constant => {
            if step >= total_steps {
                return Err(Error::Argument(format!("step {step} outside 0..{total_steps}")));
            }
            Ok(lr_max)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_of_the_cycle() {
        let lr = 3e-4;
        assert!((one_cycle_lr(30, 100, lr).unwrap() - lr).abs() < 1e-18);
        assert!((one_cycle_lr(0, 100, lr).unwrap() - lr / 25.0).abs() < 1e-18);
        let last = one_cycle_lr(99, 100, lr).unwrap();
        assert!(last <= lr / 1e3);
        assert!((last - lr / 1e4).abs() < 1e-18);
        assert!(one_cycle_lr(100, 100, lr).is_err());
    }

    #[test]
    fn warmup_rises_and_decay_falls() {
        let lrs: Vec<f64> = (0..1000).map(|s| one_cycle_lr(s, 1000, 1.0).unwrap()).collect();
        assert!(lrs[..300].windows(2).all(|w| w[1] >= w[0]));
        assert!(lrs[300..].windows(2).all(|w| w[1] <= w[0]));
        assert!(lrs.iter().all(|&v| v > 0.0 && v <= 1.0));
    }

    #[test]
    fn tiny_schedules_stay_finite() {
        for total in 1..5 {
            for s in 0..total {
                let v = one_cycle_lr(s, total, 1.0).unwrap();
                assert!(v.is_finite() && v > 0.0);
            }
        }
        assert_eq!(learning_rate(Schedule::Constant, 3, 5, 0.1).unwrap(), 0.1);
    }
}
