//! Learning-rate schedule: linear warm-up followed by polynomial decay.
//!
//! During warm-up, `lr = base * (step + 1) / warmup`. Afterwards the decay
//! phase starts at `base` and follows `base * (1 - u)^0.9` where `u` is the
//! progress through the remaining steps, which makes the schedule continuous
//! at the warm-up boundary and zero at `total_steps`.

pub const DECAY_POWER: f64 = 0.9;

pub fn warmup_lr(step: usize, base_lr: f64, warmup_steps: usize, total_steps: usize) -> f64 {
    if warmup_steps > 0 && step < warmup_steps {
        return base_lr * (step + 1) as f64 / warmup_steps as f64;
    }
    if total_steps <= warmup_steps {
        return base_lr;
    }
    let remaining = (total_steps - warmup_steps) as f64;
    let progress = ((step - warmup_steps) as f64 / remaining).min(1.0);
    base_lr * (1.0 - progress).powf(DECAY_POWER)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_end_reaches_base_lr() {
        let lr = warmup_lr(249, 5e-4, 250, 10_000);
        assert_eq!(lr, 5e-4);
    }

    #[test]
    fn continuous_at_warmup_boundary() {
        let before = warmup_lr(249, 5e-4, 250, 10_000);
        let after = warmup_lr(250, 5e-4, 250, 10_000);
        assert!((before - after).abs() < 1e-12);
    }

    #[test]
    fn decay_reaches_zero_at_total_steps() {
        assert_eq!(warmup_lr(10_000, 5e-4, 250, 10_000), 0.0);
        assert_eq!(warmup_lr(12_000, 5e-4, 250, 10_000), 0.0);
    }

    #[test]
    fn ramps_linearly_during_warmup() {
        let base = 1e-3;
        assert_eq!(warmup_lr(0, base, 100, 1000), base * 0.01);
        assert_eq!(warmup_lr(49, base, 100, 1000), base * 0.5);
    }

    #[test]
    fn no_warmup_decays_from_start() {
        let lr0 = warmup_lr(0, 1e-3, 0, 100);
        assert_eq!(lr0, 1e-3);
        assert!(warmup_lr(50, 1e-3, 0, 100) < lr0);
    }

    #[test]
    fn monotone_decay_after_warmup() {
        let mut prev = f64::INFINITY;
        for step in 250..1000 {
            let lr = warmup_lr(step, 5e-4, 250, 1000);
            assert!(lr <= prev);
            prev = lr;
        }
    }
}
