//! Seeded shape scenes and the low-light "intensifier-like" domain shift
//! used to build paired synthetic benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{DomainTag, ImageSample, Mask, RgbImage};
use crate::error::{Error, Result};
use crate::imageops::gaussian_blur;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Disk,
    Rectangle,
}

/// One entry of the label space; `shape: None` marks the background class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub name: String,
    pub shape: Option<ShapeKind>,
}

impl ClassSpec {
    /// background = 0, disk = 1, rectangle = 2.
    pub fn default_classes() -> Vec<ClassSpec> {
        vec![
            ClassSpec {
                name: "background".into(),
                shape: None,
            },
            ClassSpec {
                name: "disk".into(),
                shape: Some(ShapeKind::Disk),
            },
            ClassSpec {
                name: "rectangle".into(),
                shape: Some(ShapeKind::Rectangle),
            },
        ]
    }
}

/// Probability that a scene contains a given foreground class.
const CLASS_PRESENCE: f64 = 0.8;
const MIN_LUMA_GAP: f64 = 0.25;

#[derive(Clone, Debug)]
struct Shape {
    class: u8,
    kind: ShapeKind,
    cx: f64,
    cy: f64,
    /// Disk radius, or rectangle half-extents.
    a: f64,
    b: f64,
    angle: f64,
    color: [f64; 3],
}

impl Shape {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        match self.kind {
            ShapeKind::Disk => dx * dx + dy * dy <= self.a * self.a,
            ShapeKind::Rectangle => {
                let (s, c) = self.angle.sin_cos();
                let u = c * dx + s * dy;
                let v = -s * dx + c * dy;
                u.abs() <= self.a && v.abs() <= self.b
            }
        }
    }
}

fn luma(c: [f64; 3]) -> f64 {
    0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]
}

/// Random color that differs from `reference` in brightness, not only hue,
/// so shapes stay visible after desaturation.
fn random_color_away_from(rng: &mut ChaCha8Rng, reference: [f64; 3]) -> [f64; 3] {
    let mut best = [0.0; 3];
    let mut best_gap = -1.0;
    for _ in 0..64 {
        let c = [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()];
        let gap = (luma(c) - luma(reference)).abs();
        if gap > best_gap {
            best = c;
            best_gap = gap;
        }
        if gap > MIN_LUMA_GAP {
            break;
        }
    }
    best
}

/// Renders a clean scene of anti-aliased shapes on a textured background.
///
/// The mask labels every pixel by the topmost shape containing the pixel
/// center; the image blends shapes by 4×4 supersampled coverage.
pub fn generate_scene(seed: u64, size: (usize, usize), class_spec: &[ClassSpec]) -> Result<ImageSample> {
    let (h, w) = size;
    if h < 32 || w < 32 {
        return Err(Error::Contract(format!("scenes must be at least 32x32, got {h}x{w}")));
    }
    if class_spec.is_empty() || class_spec[0].shape.is_some() || class_spec.iter().skip(1).any(|c| c.shape.is_none()) {
        return Err(Error::Config(
            "class spec must start with the single background class followed by shape classes".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = h.min(w) as f64 / 64.0;

    let base: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.25..0.75));
    let grad_x: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.2..0.2));
    let grad_y: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.2..0.2));
    // Fine two-orientation grating: source-domain background texture.
    let texture_amp = rng.random_range(0.05..0.09);
    let waves: Vec<(f64, f64, f64)> = (0..2)
        .map(|_| {
            let period = rng.random_range(2.5..4.0);
            let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            let f = std::f64::consts::TAU / period;
            (f * theta.cos(), f * theta.sin(), phase)
        })
        .collect();

    let mut shapes = Vec::new();
    for (class, spec) in class_spec.iter().enumerate().skip(1) {
        if rng.random::<f64>() >= CLASS_PRESENCE {
            continue;
        }
        let count = if rng.random::<f64>() < 0.35 { 2 } else { 1 };
        for _ in 0..count {
            let kind = spec.shape.expect("validated above");
            let (a, b) = match kind {
                ShapeKind::Disk => {
                    let r = rng.random_range(7.0..12.0) * scale;
                    (r, r)
                }
                // elongated bars, so the class is not a matter of size
                ShapeKind::Rectangle => (
                    rng.random_range(10.0..16.0) * scale,
                    rng.random_range(2.5..4.0) * scale,
                ),
            };
            shapes.push(Shape {
                class: class as u8,
                kind,
                cx: rng.random_range(0.15..0.85) * w as f64,
                cy: rng.random_range(0.15..0.85) * h as f64,
                a,
                b,
                angle: rng.random_range(0.0..std::f64::consts::PI),
                color: random_color_away_from(&mut rng, base),
            });
        }
    }
    // random painter's order
    for i in (1..shapes.len()).rev() {
        let j = rng.random_range(0..=i);
        shapes.swap(i, j);
    }

    let mut image = RgbImage::filled(h, w, 0.0);
    let mut mask = Mask::filled(h, w, 0);
    const SS: usize = 4;
    for y in 0..h {
        for x in 0..w {
            let (u, v) = (x as f64 / w as f64 - 0.5, y as f64 / h as f64 - 0.5);
            let tex: f64 = waves
                .iter()
                .map(|(fx, fy, ph)| (fx * x as f64 + fy * y as f64 + ph).sin())
                .sum::<f64>()
                * 0.5
                * texture_amp;
            let mut px: [f64; 3] = std::array::from_fn(|c| base[c] + grad_x[c] * u + grad_y[c] * v + tex);
            let (pcx, pcy) = (x as f64 + 0.5, y as f64 + 0.5);
            for shape in &shapes {
                let mut hits = 0;
                for sy in 0..SS {
                    for sx in 0..SS {
                        let qx = x as f64 + (sx as f64 + 0.5) / SS as f64;
                        let qy = y as f64 + (sy as f64 + 0.5) / SS as f64;
                        if shape.contains(qx, qy) {
                            hits += 1;
                        }
                    }
                }
                if hits > 0 {
                    let cov = hits as f64 / (SS * SS) as f64;
                    let shade = 0.92 + 0.08 * (1.0 - (pcy - shape.cy) / (2.0 * shape.a.max(shape.b)));
                    for c in 0..3 {
                        let sc = (shape.color[c] * shade).clamp(0.0, 1.0);
                        px[c] = px[c] * (1.0 - cov) + sc * cov;
                    }
                }
                if shape.contains(pcx, pcy) {
                    mask.data[y * w + x] = shape.class;
                }
            }
            for c in 0..3 {
                image.set(y, x, c, px[c].clamp(0.0, 1.0));
            }
        }
    }
    ImageSample::new(format!("scene{seed:08}"), image, Some(mask), DomainTag::Source)
}

/// Appearance shift mimicking a low-light intensifier sensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthDomainParams {
    pub luminance_scale: f64,
    pub noise_std: f64,
    /// Blend weight toward a green-tinted monochrome rendering.
    pub desaturation: f64,
    pub glare_count: usize,
    pub glare_radius: f64,
    pub blur_sigma: f64,
}

impl Default for SynthDomainParams {
    fn default() -> Self {
        Self::target_default()
    }
}

/// Per-channel gain of the monochrome rendering (green phosphor look).
const PHOSPHOR_TINT: [f64; 3] = [0.55, 1.0, 0.6];

impl SynthDomainParams {
    pub fn neutral() -> Self {
        Self {
            luminance_scale: 1.0,
            noise_std: 0.0,
            desaturation: 0.0,
            glare_count: 0,
            glare_radius: 6.0,
            blur_sigma: 0.0,
        }
    }

    pub fn target_default() -> Self {
        Self {
            luminance_scale: 0.35,
            noise_std: 0.08,
            desaturation: 0.8,
            glare_count: 2,
            glare_radius: 6.0,
            blur_sigma: 0.8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.luminance_scale > 0.0
            && self.luminance_scale <= 1.0
            && self.noise_std >= 0.0
            && (0.0..=1.0).contains(&self.desaturation)
            && self.glare_radius > 0.0
            && self.blur_sigma >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("synthetic domain parameters out of range: {self:?}")))
        }
    }
}

/// Applies, in order: luminance scaling, desaturation toward the tinted
/// monochrome axis, Gaussian blur, clipped additive Gaussian noise and
/// radial glare spots. The mask is carried through unchanged.
pub fn domainize(sample: &ImageSample, params: &SynthDomainParams, seed: u64) -> Result<ImageSample> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = sample.image.clone();
    let (h, w) = (img.height, img.width);

    if params.luminance_scale != 1.0 {
        img.data.iter_mut().for_each(|v| *v *= params.luminance_scale);
    }
    if params.desaturation > 0.0 {
        let d = params.desaturation;
        for px in img.data.chunks_mut(3) {
            let luma = 0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2];
            for c in 0..3 {
                px[c] = (1.0 - d) * px[c] + d * luma * PHOSPHOR_TINT[c];
            }
        }
    }
    if params.blur_sigma > 0.0 {
        img = gaussian_blur(&img, params.blur_sigma, 0);
    }
    if params.noise_std > 0.0 {
        let noise = Normal::new(0.0, params.noise_std).expect("validated std");
        img.data
            .iter_mut()
            .for_each(|v| *v = (*v + noise.sample(&mut rng)).clamp(0.0, 1.0));
    }
    for _ in 0..params.glare_count {
        let cx = rng.random_range(0.0..w as f64);
        let cy = rng.random_range(0.0..h as f64);
        let amp = rng.random_range(0.6..0.9);
        let r2 = 2.0 * params.glare_radius * params.glare_radius;
        for y in 0..h {
            for x in 0..w {
                let d2 = (x as f64 + 0.5 - cx).powi(2) + (y as f64 + 0.5 - cy).powi(2);
                let g = amp * (-d2 / r2).exp();
                if g > 1e-6 {
                    for c in 0..3 {
                        let v = img.get(y, x, c) + g * PHOSPHOR_TINT[c];
                        img.set(y, x, c, v);
                    }
                }
            }
        }
    }
    img.clamp01();
    ImageSample::new(sample.id.clone(), img, sample.mask.clone(), DomainTag::Target)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scenes_are_deterministic() {
        let classes = ClassSpec::default_classes();
        let a = generate_scene(17, (64, 64), &classes).unwrap();
        let b = generate_scene(17, (64, 64), &classes).unwrap();
        assert_eq!(a, b);
        let c = generate_scene(18, (64, 64), &classes).unwrap();
        assert_ne!(a.image, c.image);
    }

    #[test]
    fn mask_values_stay_in_class_spec() {
        let classes = ClassSpec::default_classes();
        for seed in 0..20 {
            let s = generate_scene(seed, (48, 64), &classes).unwrap();
            assert!(s.mask.unwrap().data.iter().all(|&v| v <= 2));
            assert!(s.image.is_valid());
        }
    }

    #[test]
    fn each_foreground_class_is_common() {
        let classes = ClassSpec::default_classes();
        let mut counts = [0usize; 3];
        for seed in 0..100 {
            let mask = generate_scene(seed, (64, 64), &classes).unwrap().mask.unwrap();
            for (c, count) in counts.iter_mut().enumerate() {
                if mask.data.contains(&(c as u8)) {
                    *count += 1;
                }
            }
        }
        assert!(counts[1] >= 40 && counts[2] >= 40, "{counts:?}");
    }

    #[test]
    fn rejects_small_scenes() {
        assert!(generate_scene(0, (16, 64), &ClassSpec::default_classes()).is_err());
    }

    #[test]
    fn neutral_params_are_identity() {
        let s = generate_scene(3, (64, 64), &ClassSpec::default_classes()).unwrap();
        let out = domainize(&s, &SynthDomainParams::neutral(), 9).unwrap();
        assert_eq!(out.image, s.image);
        assert_eq!(out.mask, s.mask);
    }

    #[test]
    fn luminance_scaling_is_pointwise() {
        let s = ImageSample::new("c", RgbImage::filled(16, 16, 0.5), None, DomainTag::Source).unwrap();
        let params = SynthDomainParams {
            luminance_scale: 0.3,
            ..SynthDomainParams::neutral()
        };
        let out = domainize(&s, &params, 0).unwrap();
        assert!(out.image.data.iter().all(|v| (v - 0.15).abs() < 1e-12));
    }

    #[test]
    fn noise_has_requested_std() {
        let s = ImageSample::new("g", RgbImage::filled(100, 100, 0.5), None, DomainTag::Source).unwrap();
        let params = SynthDomainParams {
            noise_std: 0.1,
            ..SynthDomainParams::neutral()
        };
        let out = domainize(&s, &params, 21).unwrap();
        let residual: Vec<f64> = out.image.channel(1).iter().map(|v| v - 0.5).collect();
        let n = residual.len() as f64;
        let mean = residual.iter().sum::<f64>() / n;
        let std = (residual.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!((0.09..=0.11).contains(&std), "std = {std}");
    }

    #[test]
    fn domainize_never_touches_the_mask() {
        let classes = ClassSpec::default_classes();
        for seed in 0..5 {
            let s = generate_scene(seed, (64, 64), &classes).unwrap();
            let out = domainize(&s, &SynthDomainParams::target_default(), seed + 100).unwrap();
            assert_eq!(out.mask, s.mask);
            assert_eq!(out.domain, DomainTag::Target);
            assert!(out.image.is_valid());
        }
    }
}
