use serde::{Deserialize, Serialize};

/// Poly decay with linear warmup:
/// `base·(i+1)/warmup` while `i < warmup`, then `base·(1 − i/max)^power`.
pub fn poly_lr(iter: usize, base_lr: f64, max_iter: usize, warmup_iters: usize, power: f64) -> f64 {
    if iter < warmup_iters {
        return base_lr * (iter + 1) as f64 / warmup_iters as f64;
    }
    if max_iter == 0 {
        return 0.0;
    }
    let progress = (iter.min(max_iter)) as f64 / max_iter as f64;
    base_lr * (1.0 - progress).powf(power)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolySchedule {
    pub base_lr: f64,
    pub warmup_iters: usize,
    pub power: f64,
}

impl Default for PolySchedule {
    fn default() -> Self {
        Self {
            base_lr: 6e-5,
            warmup_iters: 150,
            power: 1.0,
        }
    }
}

impl PolySchedule {
    pub fn lr(&self, iter: usize, max_iter: usize) -> f64 {
        poly_lr(iter, self.base_lr, max_iter, self.warmup_iters, self.power)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoint_is_zero() {
        assert_eq!(poly_lr(1000, 0.01, 1000, 150, 1.0), 0.0);
        assert_eq!(poly_lr(1000, 0.01, 1000, 150, 0.9), 0.0);
    }

    #[test]
    fn warmup_reaches_base() {
        let base = 6e-5;
        let lr = poly_lr(149, base, 4000, 150, 1.0);
        assert!(((lr - base) / base).abs() <= 1.0 / 150.0);
        assert!((poly_lr(0, base, 4000, 150, 1.0) - base / 150.0).abs() < 1e-18);
    }

    #[test]
    fn mid_schedule_closed_form() {
        // iter = (4000 + 150) / 2 = 2075; lr = base * (1 - 2075/4000) = base * 1925/4000
        let lr = poly_lr(2075, 0.01, 4000, 150, 1.0);
        assert!((lr - 0.01 * 1925.0 / 4000.0).abs() < 1e-12);
    }

    #[test]
    fn monotone_after_warmup() {
        let mut prev = f64::INFINITY;
        for i in 150..=4000 {
            let lr = poly_lr(i, 0.01, 4000, 150, 1.0);
            assert!(lr <= prev && lr >= 0.0);
            prev = lr;
        }
    }
}
