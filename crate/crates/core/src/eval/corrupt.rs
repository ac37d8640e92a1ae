use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::RgbImage;
use crate::error::{Error, Result};
use crate::imageops::{convolve_2d, map_channels, reflect_index};

/// Gray level fog blends toward.
pub const FOG_GRAY: f64 = 0.75;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    Rain,
    Snow,
    Fog,
    MotionBlur,
    Cartoon,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 5] = [
        CorruptionKind::Rain,
        CorruptionKind::Snow,
        CorruptionKind::Fog,
        CorruptionKind::MotionBlur,
        CorruptionKind::Cartoon,
    ];

    /// Column heading in robustness grids.
    pub fn column_name(self) -> &'static str {
        match self {
            CorruptionKind::Rain => "rain",
            CorruptionKind::Snow => "snowy",
            CorruptionKind::Fog => "foggy",
            CorruptionKind::MotionBlur => "motion blur",
            CorruptionKind::Cartoon => "cartoonified",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub severity: f64,
    pub seed: u64,
}

impl CorruptionSpec {
    pub fn new(kind: CorruptionKind, severity: f64, seed: u64) -> Result<Self> {
        let spec = Self { kind, severity, seed };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.severity) {
            return Err(Error::Config(format!(
                "corruption severity {} outside [0, 1]",
                self.severity
            )));
        }
        Ok(())
    }
}

/// One spec per kind at severity 0.5.
pub fn default_battery(seed: u64) -> Vec<CorruptionSpec> {
    CorruptionKind::ALL
        .iter()
        .enumerate()
        .map(|(i, &kind)| CorruptionSpec {
            kind,
            severity: 0.5,
            seed: seed ^ (0xC0_0000 + i as u64),
        })
        .collect()
}

/// Deterministic in `(image, spec)`; severity 0 returns the input.
pub fn corrupt(image: &RgbImage, spec: &CorruptionSpec) -> Result<RgbImage> {
    spec.validate()?;
    let s = spec.severity;
    if s == 0.0 {
        return Ok(image.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = match spec.kind {
        CorruptionKind::Rain => rain(image, s, &mut rng),
        CorruptionKind::Snow => snow(image, s, &mut rng),
        CorruptionKind::Fog => fog(image, s),
        CorruptionKind::MotionBlur => {
            let length = 1 + (14.0 * s).floor() as usize;
            let angle = rng.random_range(0.0..PI);
            let (kernel, side) = motion_kernel(length, angle);
            map_channels(image, |p| convolve_2d(p, image.height, image.width, &kernel, side, side))
        }
        CorruptionKind::Cartoon => cartoon(image, s),
    };
    out.clamp01();
    Ok(out)
}

/// Normalized line kernel of `length` taps through the center of a square
/// of odd side, at `angle` radians from horizontal.
pub fn motion_kernel(length: usize, angle: f64) -> (Vec<f64>, usize) {
    let length = length.max(1);
    let side = if length % 2 == 1 { length } else { length + 1 };
    let mut k = vec![0.0; side * side];
    let c = (side / 2) as f64;
    let (dy, dx) = (angle.sin(), angle.cos());
    let half = (length as f64 - 1.0) / 2.0;
    for t in 0..length {
        let d = t as f64 - half;
        let y = (c + d * dy).round() as usize;
        let x = (c + d * dx).round() as usize;
        k[y.min(side - 1) * side + x.min(side - 1)] += 1.0;
    }
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    (k, side)
}

fn blend(px: &mut [f64], color: f64, alpha: f64) {
    px.iter_mut().for_each(|v| *v = (1.0 - alpha) * *v + alpha * color);
}

/// Darkening plus translucent streaks slanted a little off vertical.
fn rain(image: &RgbImage, s: f64, rng: &mut impl Rng) -> RgbImage {
    let (h, w) = (image.height, image.width);
    let mut out = image.clone();
    out.data.iter_mut().for_each(|v| *v *= 1.0 - 0.25 * s);
    let drops = ((h * w) as f64 * 0.02 * s).ceil() as usize;
    let slant = rng.random_range(-0.4..0.4);
    let alpha = 0.3 + 0.4 * s;
    for _ in 0..drops {
        let len = rng.random_range(3.0..(4.0 + 12.0 * s));
        let (y0, x0) = (rng.random_range(0.0..h as f64), rng.random_range(0.0..w as f64));
        let steps = len.ceil() as usize;
        for t in 0..steps {
            let y = y0 + t as f64;
            let x = x0 + slant * t as f64;
            if y < 0.0 || x < 0.0 || y >= h as f64 || x >= w as f64 {
                break;
            }
            let i = (y as usize * w + x as usize) * 3;
            blend(&mut out.data[i..i + 3], 0.8, alpha);
        }
    }
    out
}

/// Whitening plus bright flakes of radius 0 or 1.
fn snow(image: &RgbImage, s: f64, rng: &mut impl Rng) -> RgbImage {
    let (h, w) = (image.height, image.width);
    let mut out = image.clone();
    let lift = 0.3 * s;
    out.data.iter_mut().for_each(|v| *v += lift * (1.0 - *v));
    let flakes = ((h * w) as f64 * 0.06 * s).ceil() as usize;
    for _ in 0..flakes {
        let (cy, cx) = (rng.random_range(0..h) as isize, rng.random_range(0..w) as isize);
        let r: isize = if rng.random::<f64>() < 0.3 { 1 } else { 0 };
        let alpha = rng.random_range(0.6..0.95);
        for y in cy - r..=cy + r {
            for x in cx - r..=cx + r {
                if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                    continue;
                }
                let i = (y as usize * w + x as usize) * 3;
                blend(&mut out.data[i..i + 3], 1.0, alpha);
            }
        }
    }
    out
}

/// Contrast shrinks toward the per-channel mean, then the result blends
/// toward [`FOG_GRAY`] with weight `0.7·s`.
fn fog(image: &RgbImage, s: f64) -> RgbImage {
    let alpha = 0.7 * s;
    let contrast = 1.0 - 0.5 * s;
    let n = (image.height * image.width) as f64;
    let mut means = [0.0; 3];
    for px in image.data.chunks(3) {
        for c in 0..3 {
            means[c] += px[c] / n;
        }
    }
    let mut out = image.clone();
    for px in out.data.chunks_mut(3) {
        for c in 0..3 {
            let v = means[c] + contrast * (px[c] - means[c]);
            px[c] = (1.0 - alpha) * v + alpha * FOG_GRAY;
        }
    }
    out
}

const CARTOON_LEVELS: f64 = 8.0;

/// Bilateral smoothing, 8-level quantization and darkened luma edges.
fn cartoon(image: &RgbImage, s: f64) -> RgbImage {
    let (h, w) = (image.height, image.width);
    let mut cur = image.clone();
    let iterations = 1 + (3.0 * s).round() as usize;
    for _ in 0..iterations {
        cur = bilateral(&cur, 2, 1.5, 0.1 + 0.2 * s);
    }
    for v in cur.data.iter_mut() {
        *v = ((*v * CARTOON_LEVELS).floor().min(CARTOON_LEVELS - 1.0) + 0.5) / CARTOON_LEVELS;
    }
    let luma: Vec<f64> = cur
        .data
        .chunks(3)
        .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
        .collect();
    let at = |y: isize, x: isize| luma[reflect_index(y, h) * w + reflect_index(x, w)];
    let darken = 1.0 - 0.8 * s;
    let mut out = cur.clone();
    for y in 0..h as isize {
        for x in 0..w as isize {
            let gx = at(y, x + 1) - at(y, x - 1);
            let gy = at(y + 1, x) - at(y - 1, x);
            if (gx * gx + gy * gy).sqrt() > 0.12 {
                let i = (y as usize * w + x as usize) * 3;
                out.data[i..i + 3].iter_mut().for_each(|v| *v *= darken);
            }
        }
    }
    out
}

fn bilateral(image: &RgbImage, radius: isize, sigma_space: f64, sigma_color: f64) -> RgbImage {
    let (h, w) = (image.height, image.width);
    let mut out = image.clone();
    let (ss, sc) = (2.0 * sigma_space * sigma_space, 2.0 * sigma_color * sigma_color);
    for y in 0..h {
        for x in 0..w {
            let center = image.pixel(y, x);
            let mut acc = [0.0; 3];
            let mut norm = 0.0;
            for dy in -radius..=radius {
                let sy = reflect_index(y as isize + dy, h);
                for dx in -radius..=radius {
                    let sx = reflect_index(x as isize + dx, w);
                    let p = image.pixel(sy, sx);
                    let dc: f64 = (0..3).map(|c| (p[c] - center[c]).powi(2)).sum();
                    let wgt = (-((dy * dy + dx * dx) as f64) / ss - dc / sc).exp();
                    for c in 0..3 {
                        acc[c] += wgt * p[c];
                    }
                    norm += wgt;
                }
            }
            for c in 0..3 {
                out.set(y, x, c, acc[c] / norm);
            }
        }
    }
    out
}
