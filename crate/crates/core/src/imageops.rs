//! Plane convolutions with reflect padding, shared by the blur transform,
//! the synthetic domain shift and the corruption battery.

use crate::data::RgbImage;

/// Mirror index without repeating the edge sample (`dcb|abcd|cba`).
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut i = i.rem_euclid(period);
    if i >= n as isize {
        i = period - i;
    }
    i as usize
}

/// Normalized samples of `exp(-d²/2σ²)` for `d = -(k-1)/2 ..= (k-1)/2`.
pub fn gaussian_1d(k: usize, sigma: f64) -> Vec<f64> {
    let half = (k / 2) as isize;
    let raw: Vec<f64> = (-half..=half)
        .map(|d| (-((d * d) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / sum).collect()
}

/// Separable convolution of a `h × w` plane with a centered odd-length kernel.
pub fn convolve_separable(plane: &[f64], h: usize, w: usize, kernel: &[f64]) -> Vec<f64> {
    let half = (kernel.len() / 2) as isize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        let row = &plane[y * w..(y + 1) * w];
        for x in 0..w {
            tmp[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(t, k)| k * row[reflect_index(x as isize + t as isize - half, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(t, k)| k * tmp[reflect_index(y as isize + t as isize - half, h) * w + x])
                .sum();
        }
    }
    out
}

/// Dense 2-D convolution with a `kh × kw` kernel (odd sides), reflect padded.
pub fn convolve_2d(plane: &[f64], h: usize, w: usize, kernel: &[f64], kh: usize, kw: usize) -> Vec<f64> {
    let (hy, hx) = ((kh / 2) as isize, (kw / 2) as isize);
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for ky in 0..kh {
                let sy = reflect_index(y as isize + ky as isize - hy, h);
                for kx in 0..kw {
                    let k = kernel[ky * kw + kx];
                    if k != 0.0 {
                        let sx = reflect_index(x as isize + kx as isize - hx, w);
                        acc += k * plane[sy * w + sx];
                    }
                }
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Applies `f` to each channel plane of an image.
pub fn map_channels(image: &RgbImage, mut f: impl FnMut(&[f64]) -> Vec<f64>) -> RgbImage {
    let mut out = image.clone();
    for c in 0..3 {
        let plane = f(&image.channel(c));
        out.set_channel(c, &plane);
    }
    out
}

/// Gaussian blur with a `k`-tap kernel; `k` is derived from `sigma` when 0.
pub fn gaussian_blur(image: &RgbImage, sigma: f64, k: usize) -> RgbImage {
    let k = if k == 0 { 2 * (3.0 * sigma).ceil() as usize + 1 } else { k };
    let kernel = gaussian_1d(k, sigma);
    map_channels(image, |p| convolve_separable(p, image.height, image.width, &kernel))
}
