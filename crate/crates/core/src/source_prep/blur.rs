use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::RgbImage;
use crate::error::{Error, Result};
use crate::imageops::{convolve_separable, gaussian_1d, map_channels};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SizeDistribution {
    Uniform,
    /// Draw from a normal, then snap to the nearest allowed kernel size.
    Normal { center: f64, std: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BlurConfig {
    pub apply_prob: f64,
    pub kernel_sizes: Vec<usize>,
    pub size_distribution: SizeDistribution,
}

impl Default for BlurConfig {
    fn default() -> Self {
        Self {
            apply_prob: 0.5,
            kernel_sizes: vec![5, 7, 9, 11, 13, 15, 17, 19],
            size_distribution: SizeDistribution::Uniform,
        }
    }
}

impl BlurConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.apply_prob) {
            return Err(Error::Config(format!("blur apply_prob {} outside [0, 1]", self.apply_prob)));
        }
        if self.kernel_sizes.is_empty() || self.kernel_sizes.iter().any(|&k| k == 0 || k % 2 == 0) {
            return Err(Error::Config("blur kernel sizes must be odd and at least 1".into()));
        }
        if let SizeDistribution::Normal { std, .. } = self.size_distribution {
            if std <= 0.0 {
                return Err(Error::Config("normal size distribution needs a positive std".into()));
            }
        }
        Ok(())
    }
}

/// Standard size-to-sigma rule: `0.3·((k−1)/2 − 1) + 0.8`.
pub fn sigma_for_kernel(k: usize) -> f64 {
    0.3 * ((k as f64 - 1.0) / 2.0 - 1.0) + 0.8
}

/// Normalized isotropic Gaussian on the `k × k` integer grid centered at the
/// middle cell, row-major.
pub fn gaussian_kernel(k: usize, sigma: f64) -> Result<Vec<f64>> {
    if k == 0 || k % 2 == 0 {
        return Err(Error::Contract(format!("kernel size must be odd and positive, got {k}")));
    }
    if sigma <= 0.0 {
        return Err(Error::Contract(format!("sigma must be positive, got {sigma}")));
    }
    let g = gaussian_1d(k, sigma);
    let mut kernel: Vec<f64> = g.iter().flat_map(|a| g.iter().map(move |b| a * b)).collect();
    let sum: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|v| *v /= sum);
    Ok(kernel)
}

/// Decides whether to blur and with which kernel size.
pub fn sample_blur(cfg: &BlurConfig, rng: &mut impl Rng) -> Option<usize> {
    if rng.random::<f64>() >= cfg.apply_prob {
        return None;
    }
    let sizes = &cfg.kernel_sizes;
    Some(match cfg.size_distribution {
        SizeDistribution::Uniform => sizes[rng.random_range(0..sizes.len())],
        SizeDistribution::Normal { center, std } => {
            let draw = Normal::new(center, std).expect("validated std").sample(rng);
            let lo = *sizes.iter().min().expect("nonempty") as f64;
            let hi = *sizes.iter().max().expect("nonempty") as f64;
            let draw = draw.clamp(lo, hi);
            *sizes
                .iter()
                .min_by(|a, b| (**a as f64 - draw).abs().total_cmp(&(**b as f64 - draw).abs()))
                .expect("nonempty")
        }
    })
}

/// Convolves every channel with `gaussian_kernel(k, σ(k))`, reflect padded.
pub fn blur_with_kernel(image: &RgbImage, k: usize) -> RgbImage {
    // The 2-D kernel is the outer product of this 1-D kernel, so two 1-D
    // passes give the same result.
    let g = gaussian_1d(k, sigma_for_kernel(k));
    let mut out = map_channels(image, |p| convolve_separable(p, image.height, image.width, &g));
    out.clamp01();
    out
}

/// With probability `apply_prob`, Gaussian-blurs the image with a randomly
/// drawn kernel size; otherwise returns it unchanged.
pub fn random_blur(image: &RgbImage, cfg: &BlurConfig, rng: &mut impl Rng) -> RgbImage {
    match sample_blur(cfg, rng) {
        Some(k) => blur_with_kernel(image, k),
        None => image.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imageops::convolve_2d;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn unit_kernel() {
        assert_eq!(gaussian_kernel(1, 0.7).unwrap(), vec![1.0]);
    }

    #[test]
    fn even_or_zero_size_is_rejected() {
        assert!(gaussian_kernel(4, 1.0).is_err());
        assert!(gaussian_kernel(0, 1.0).is_err());
    }

    #[test]
    fn normalized_and_symmetric() {
        for k in (1..=19).step_by(2) {
            for sigma in [0.5, 1.1, sigma_for_kernel(k), 4.0] {
                let kern = gaussian_kernel(k, sigma).unwrap();
                assert!((kern.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                for y in 0..k {
                    for x in 0..k {
                        let v = kern[y * k + x];
                        assert_eq!(v, kern[x * k + y], "transpose");
                        assert!((v - kern[(k - 1 - y) * k + (k - 1 - x)]).abs() < 1e-15, "rotation");
                    }
                }
            }
        }
    }

    #[test]
    fn matches_direct_formula() {
        let (k, sigma) = (5usize, 1.1f64);
        let mut direct = Vec::new();
        for dy in -2i32..=2 {
            for dx in -2i32..=2 {
                direct.push((-((dx * dx + dy * dy) as f64) / (2.0 * sigma * sigma)).exp());
            }
        }
        let sum: f64 = direct.iter().sum();
        let kern = gaussian_kernel(k, sigma).unwrap();
        for (a, b) in kern.iter().zip(&direct) {
            assert!((a - b / sum).abs() < 1e-12);
        }
    }

    #[test]
    fn disabled_blur_is_identity() {
        let img = RgbImage::from_vec(8, 8, (0..192).map(|i| (i % 7) as f64 / 7.0).collect());
        let cfg = BlurConfig {
            apply_prob: 0.0,
            ..Default::default()
        };
        for seed in 0..20 {
            assert_eq!(random_blur(&img, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)), img);
        }
    }

    #[test]
    fn constant_image_is_a_fixed_point() {
        let img = RgbImage::filled(32, 32, 0.42);
        for k in [5, 11, 19] {
            let out = blur_with_kernel(&img, k);
            assert!(out.data.iter().all(|v| (v - 0.42).abs() < 1e-12));
        }
    }

    #[test]
    fn separable_pass_equals_dense_kernel() {
        let img = RgbImage::from_vec(24, 24, (0..24 * 24 * 3).map(|i| ((i * 53) % 101) as f64 / 101.0).collect());
        let k = 9;
        let dense = gaussian_kernel(k, sigma_for_kernel(k)).unwrap();
        let blurred = blur_with_kernel(&img, k);
        for c in 0..3 {
            let expected = convolve_2d(&img.channel(c), 24, 24, &dense, k, k);
            for (a, b) in blurred.channel(c).iter().zip(&expected) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn blur_does_not_increase_channel_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let variance = |p: &[f64]| {
            let m = p.iter().sum::<f64>() / p.len() as f64;
            p.iter().map(|v| (v - m).powi(2)).sum::<f64>() / p.len() as f64
        };
        for _ in 0..100 {
            let img = RgbImage::from_vec(16, 16, (0..768).map(|_| rng.random::<f64>()).collect());
            let k = [5, 7, 9, 11, 13, 15, 17, 19][rng.random_range(0..8)];
            let out = blur_with_kernel(&img, k);
            for c in 0..3 {
                assert!(variance(&out.channel(c)) <= variance(&img.channel(c)) + 1e-12);
            }
        }
    }

    #[test]
    fn normal_mode_snaps_to_allowed_sizes() {
        let cfg = BlurConfig {
            apply_prob: 1.0,
            size_distribution: SizeDistribution::Normal {
                center: 12.0,
                std: 3.5,
            },
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut seen = std::collections::BTreeMap::new();
        for _ in 0..2000 {
            let k = sample_blur(&cfg, &mut rng).unwrap();
            assert!(cfg.kernel_sizes.contains(&k));
            *seen.entry(k).or_insert(0) += 1;
        }
        // the two sizes bracketing the center dominate the tails
        assert!(seen[&11] + seen[&13] > seen[&5] + seen[&19]);
    }
}
