use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Mask, RgbImage};

/// Geometric and photometric training augmentation applied to every
/// supervised batch, independently of any preparation scheme.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub hflip: bool,
    pub vflip: bool,
    pub photometric: Option<PhotometricConfig>,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            hflip: true,
            vflip: false,
            photometric: None,
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        Self {
            hflip: false,
            vflip: false,
            photometric: None,
        }
    }

    pub fn is_identity(&self) -> bool {
        !self.hflip && !self.vflip && self.photometric.is_none()
    }
}

/// Each distortion fires with probability 1/2, in the order brightness,
/// contrast, saturation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhotometricConfig {
    pub brightness_delta: f64,
    pub contrast_range: [f64; 2],
    pub saturation_range: [f64; 2],
}

impl Default for PhotometricConfig {
    fn default() -> Self {
        Self {
            brightness_delta: 32.0 / 255.0,
            contrast_range: [0.5, 1.5],
            saturation_range: [0.5, 1.5],
        }
    }
}

fn flip(image: &mut RgbImage, mask: &mut Mask, horizontal: bool) {
    let (h, w) = (image.height, image.width);
    let src_img = image.data.clone();
    let src_mask = mask.data.clone();
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = if horizontal { (y, w - 1 - x) } else { (h - 1 - y, x) };
            let (d, s) = ((y * w + x) * 3, (sy * w + sx) * 3);
            image.data[d..d + 3].copy_from_slice(&src_img[s..s + 3]);
            mask.data[y * w + x] = src_mask[sy * w + sx];
        }
    }
}

pub fn photometric(image: &mut RgbImage, cfg: &PhotometricConfig, rng: &mut impl Rng) {
    if rng.random::<bool>() {
        let delta = rng.random_range(-cfg.brightness_delta..=cfg.brightness_delta);
        image.data.iter_mut().for_each(|v| *v += delta);
    }
    if rng.random::<bool>() {
        let alpha = rng.random_range(cfg.contrast_range[0]..=cfg.contrast_range[1]);
        image.data.iter_mut().for_each(|v| *v *= alpha);
    }
    if rng.random::<bool>() {
        let alpha = rng.random_range(cfg.saturation_range[0]..=cfg.saturation_range[1]);
        for px in image.data.chunks_mut(3) {
            let gray = 0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2];
            px.iter_mut().for_each(|v| *v = gray + alpha * (*v - gray));
        }
    }
    image.clamp01();
}

/// Applies the configured augmentation to an image and its mask in place.
pub fn augment(image: &mut RgbImage, mask: &mut Mask, cfg: &AugmentConfig, rng: &mut impl Rng) {
    if cfg.hflip && rng.random::<bool>() {
        flip(image, mask, true);
    }
    if cfg.vflip && rng.random::<bool>() {
        flip(image, mask, false);
    }
    if let Some(p) = &cfg.photometric {
        photometric(image, p, rng);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ramp() -> (RgbImage, Mask) {
        let img = RgbImage::from_vec(4, 5, (0..60).map(|i| i as f64 / 60.0).collect());
        let mask = Mask::from_vec(4, 5, (0..20).map(|i| (i % 3) as u8).collect());
        (img, mask)
    }

    #[test]
    fn flips_move_image_and_mask_together() {
        let (img, mask) = ramp();
        let (mut a, mut m) = (img.clone(), mask.clone());
        flip(&mut a, &mut m, true);
        for y in 0..4 {
            for x in 0..5 {
                assert_eq!(a.pixel(y, x), img.pixel(y, 4 - x));
                assert_eq!(m.get(y, x), mask.get(y, 4 - x));
            }
        }
        flip(&mut a, &mut m, true);
        assert_eq!((a, m), (img, mask));
    }

    #[test]
    fn identity_config_changes_nothing() {
        let (img, mask) = ramp();
        let (mut a, mut m) = (img.clone(), mask.clone());
        augment(&mut a, &mut m, &AugmentConfig::none(), &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!((a, m), (img, mask));
    }

    #[test]
    fn photometric_keeps_values_in_range_and_mask_untouched() {
        let cfg = AugmentConfig {
            photometric: Some(PhotometricConfig::default()),
            ..AugmentConfig::none()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let (mut a, mut m) = ramp();
            augment(&mut a, &mut m, &cfg, &mut rng);
            assert!(a.is_valid());
            assert_eq!(m, ramp().1);
        }
    }
}
