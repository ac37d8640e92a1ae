use crate::tensor::Tensor4;

/// Scalar loss with its gradient with respect to the logits.
#[derive(Clone, Debug)]
pub struct LossGrad {
    pub value: f64,
    pub grad: Tensor4,
}

/// Writes `log softmax` of the `C` strided logits at one pixel into `out`.
fn log_softmax_at(logits: &Tensor4, n: usize, pixel: usize, out: &mut [f64]) {
    let hw = logits.plane_len();
    let base = n * logits.sample_len() + pixel;
    let max = (0..logits.c)
        .map(|c| logits.data[base + c * hw])
        .fold(f64::NEG_INFINITY, f64::max);
    let lse = (0..logits.c)
        .map(|c| (logits.data[base + c * hw] - max).exp())
        .sum::<f64>()
        .ln()
        + max;
    for (c, o) in out.iter_mut().enumerate() {
        *o = logits.data[base + c * hw] - lse;
    }
}

/// Mean pixelwise cross-entropy over pixels whose mask value is not
/// `ignore_index`. An all-ignored mask has loss 0.
pub fn ce_loss(logits: &Tensor4, mask: &[u8], ignore_index: u8) -> LossGrad {
    ce_loss_weighted(logits, mask, ignore_index, &vec![1.0; logits.n])
}

/// Cross-entropy where every kept pixel of sample `b` is weighted by
/// `sample_weights[b]`; the sum is divided by the number of kept pixels.
pub fn ce_loss_weighted(logits: &Tensor4, mask: &[u8], ignore_index: u8, sample_weights: &[f64]) -> LossGrad {
    let hw = logits.plane_len();
    assert_eq!(mask.len(), logits.n * hw, "mask does not match logits");
    assert_eq!(sample_weights.len(), logits.n);
    let kept = mask.iter().filter(|&&m| m != ignore_index).count();
    let mut grad = Tensor4::zeros(logits.n, logits.c, logits.h, logits.w);
    if kept == 0 {
        return LossGrad { value: 0.0, grad };
    }
    let inv = 1.0 / kept as f64;
    let mut logp = vec![0.0; logits.c];
    let mut total = 0.0;
    for n in 0..logits.n {
        let weight = sample_weights[n];
        for px in 0..hw {
            let label = mask[n * hw + px];
            if label == ignore_index {
                continue;
            }
            let label = label as usize;
            assert!(label < logits.c, "label {label} out of range for {} classes", logits.c);
            log_softmax_at(logits, n, px, &mut logp);
            total += -weight * logp[label];
            let base = n * logits.sample_len() + px;
            for (c, lp) in logp.iter().enumerate() {
                let target = if c == label { 1.0 } else { 0.0 };
                grad.data[base + c * hw] = weight * inv * (lp.exp() - target);
            }
        }
    }
    LossGrad {
        value: total * inv,
        grad,
    }
}

/// Mean of `-Σ_c y_c log softmax(z)_c` over pixels with nonzero label mass.
pub fn soft_ce_loss(logits: &Tensor4, soft_labels: &Tensor4) -> LossGrad {
    assert!(logits.same_shape(soft_labels), "soft labels do not match logits");
    let hw = logits.plane_len();
    let mut grad = Tensor4::zeros(logits.n, logits.c, logits.h, logits.w);
    let mass_at = |n: usize, px: usize| -> f64 {
        (0..logits.c).map(|c| soft_labels.data[n * logits.sample_len() + c * hw + px]).sum()
    };
    let kept = (0..logits.n)
        .flat_map(|n| (0..hw).map(move |px| (n, px)))
        .filter(|&(n, px)| mass_at(n, px) > 0.0)
        .count();
    if kept == 0 {
        return LossGrad { value: 0.0, grad };
    }
    let inv = 1.0 / kept as f64;
    let mut logp = vec![0.0; logits.c];
    let mut total = 0.0;
    for n in 0..logits.n {
        for px in 0..hw {
            let mass = mass_at(n, px);
            if mass <= 0.0 {
                continue;
            }
            log_softmax_at(logits, n, px, &mut logp);
            let base = n * logits.sample_len() + px;
            for (c, lp) in logp.iter().enumerate() {
                let y = soft_labels.data[base + c * hw];
                total -= y * lp;
                grad.data[base + c * hw] = inv * (mass * lp.exp() - y);
            }
        }
    }
    LossGrad {
        value: total * inv,
        grad,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const IGNORE: u8 = 255;

    fn random_logits(rng: &mut ChaCha8Rng, n: usize, c: usize, h: usize, w: usize) -> Tensor4 {
        let data = (0..n * c * h * w).map(|_| rng.random_range(-3.0..3.0)).collect();
        Tensor4::from_vec(n, c, h, w, data)
    }

    fn one_hot(mask: &[u8], n: usize, c: usize, h: usize, w: usize) -> Tensor4 {
        let mut t = Tensor4::zeros(n, c, h, w);
        for b in 0..n {
            for px in 0..h * w {
                let m = mask[b * h * w + px];
                if m != IGNORE {
                    t.data[(b * c + m as usize) * h * w + px] = 1.0;
                }
            }
        }
        t
    }

    #[test]
    fn all_ignored_is_zero() {
        let logits = Tensor4::zeros(1, 3, 2, 2);
        let l = ce_loss(&logits, &[IGNORE; 4], IGNORE);
        assert_eq!(l.value, 0.0);
        assert!(l.grad.data.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn saturated_margin_has_tiny_loss() {
        let mask = [0u8, 1, 2, 1];
        let mut logits = Tensor4::zeros(1, 3, 2, 2);
        for (px, &m) in mask.iter().enumerate() {
            logits.data[m as usize * 4 + px] = 20.0;
        }
        assert!(ce_loss(&logits, &mask, IGNORE).value < 1e-6);
    }

    #[test]
    fn matches_scalar_oracle_on_random_4x4() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let logits = random_logits(&mut rng, 1, 3, 4, 4);
        let mask: Vec<u8> = (0..16)
            .map(|i| if i % 5 == 0 { IGNORE } else { rng.random_range(0..3) })
            .collect();
        let mut sum = 0.0;
        let mut count = 0;
        for px in 0..16 {
            if mask[px] == IGNORE {
                continue;
            }
            let z: Vec<f64> = (0..3).map(|c| logits.data[c * 16 + px]).collect();
            let denom: f64 = z.iter().map(|v| v.exp()).sum();
            sum += -(z[mask[px] as usize].exp() / denom).ln();
            count += 1;
        }
        let oracle = sum / count as f64;
        assert!((ce_loss(&logits, &mask, IGNORE).value - oracle).abs() < 1e-6);
    }

    #[test]
    fn soft_ce_reduces_to_hard_ce_on_one_hot() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let logits = random_logits(&mut rng, 2, 4, 3, 3);
        let mask: Vec<u8> = (0..18).map(|i| if i == 4 { IGNORE } else { rng.random_range(0..4) }).collect();
        let hard = ce_loss(&logits, &mask, IGNORE);
        let soft = soft_ce_loss(&logits, &one_hot(&mask, 2, 4, 3, 3));
        assert!((hard.value - soft.value).abs() < 1e-7);
        for (a, b) in hard.grad.data.iter().zip(&soft.grad.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_labels_bound_below_by_log_c() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = 4;
        let uniform = Tensor4::from_vec(1, c, 2, 2, vec![0.25; 16]);
        let l = soft_ce_loss(&random_logits(&mut rng, 1, c, 2, 2), &uniform);
        assert!(l.value >= (c as f64).ln());
        let flat = soft_ce_loss(&Tensor4::zeros(1, c, 2, 2), &uniform);
        assert!((flat.value - (c as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn soft_ce_is_linear_in_mixed_labels() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let logits = random_logits(&mut rng, 1, 3, 4, 4);
        let a: Vec<u8> = (0..16).map(|_| rng.random_range(0..3)).collect();
        let b: Vec<u8> = (0..16).map(|_| rng.random_range(0..3)).collect();
        let lam = 0.35;
        let ya = one_hot(&a, 1, 3, 4, 4);
        let yb = one_hot(&b, 1, 3, 4, 4);
        let mixed = Tensor4::from_vec(
            1,
            3,
            4,
            4,
            ya.data.iter().zip(&yb.data).map(|(x, y)| lam * x + (1.0 - lam) * y).collect(),
        );
        let expected = lam * ce_loss(&logits, &a, IGNORE).value + (1.0 - lam) * ce_loss(&logits, &b, IGNORE).value;
        assert!((soft_ce_loss(&logits, &mixed).value - expected).abs() < 1e-6);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let logits = random_logits(&mut rng, 1, 3, 2, 3);
        let mask = [0u8, 2, IGNORE, 1, 1, 0];
        let weights = [0.7];
        let l = ce_loss_weighted(&logits, &mask, IGNORE, &weights);
        let h = 1e-6;
        for i in 0..logits.data.len() {
            let mut plus = logits.clone();
            plus.data[i] += h;
            let mut minus = logits.clone();
            minus.data[i] -= h;
            let fd = (ce_loss_weighted(&plus, &mask, IGNORE, &weights).value
                - ce_loss_weighted(&minus, &mask, IGNORE, &weights).value)
                / (2.0 * h);
            assert!((fd - l.grad.data[i]).abs() < 1e-7);
        }
    }
}
