//! PNG encoding of images and masks.

use std::path::Path;

use image::{GrayImage, ImageBuffer, Rgb};

use crate::data::{Mask, RgbImage};
use crate::error::{Error, Result};

fn open(path: &Path) -> Result<image::DynamicImage> {
    if !path.is_file() {
        return Err(Error::NotFound(path.to_path_buf()));
    }
    image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_png_rgb(path: &Path) -> Result<RgbImage> {
    let img = open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| v as f64 / 255.0).collect();
    Ok(RgbImage::from_vec(h as usize, w as usize, data))
}

pub fn read_png_gray(path: &Path) -> Result<Mask> {
    let img = open(path)?;
    if img.color() != image::ColorType::L8 {
        return Err(Error::format(path, "index masks must be 8-bit grayscale"));
    }
    let img = img.to_luma8();
    let (w, h) = img.dimensions();
    Ok(Mask::from_vec(h as usize, w as usize, img.into_raw()))
}

pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn write_png_rgb(path: &Path, image: &RgbImage) -> Result<()> {
    let raw: Vec<u8> = image.data.iter().map(|&v| quantize(v)).collect();
    let buf: ImageBuffer<Rgb<u8>, Vec<u8>> = ImageBuffer::from_raw(image.width as u32, image.height as u32, raw)
        .ok_or_else(|| Error::Contract("image buffer size mismatch".into()))?;
    buf.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_png_gray(path: &Path, mask: &Mask) -> Result<()> {
    let buf = GrayImage::from_raw(mask.width as u32, mask.height as u32, mask.data.clone())
        .ok_or_else(|| Error::Contract("mask buffer size mismatch".into()))?;
    buf.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}
