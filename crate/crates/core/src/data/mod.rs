//! Images, masks, datasets and their on-disk formats, plus the synthetic
//! paired-domain generator.

mod city_intensified;
mod directory;
mod subset;
mod synth;

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor4;

pub use city_intensified::{
    decode_label_image, encode_label_mask, load_city_intensified, CityIntensified, LabelPalette, CI_BACKGROUND,
    CI_PEOPLE, CI_VEHICLE,
};
pub use directory::{load_directory_dataset, write_directory_dataset, DatasetManifest, DirectoryLayout, MaskFormat};
pub use subset::sample_labeled_subset;
pub use synth::{domainize, generate_scene, ClassSpec, ShapeKind, SynthDomainParams};

/// Reserved mask value for pixels excluded from losses and metrics.
pub const IGNORE_INDEX: u8 = 255;

/// Smallest accepted image side.
pub const MIN_SIDE: usize = 8;

/// RGB image with values in `[0, 1]`, stored row-major and channel-interleaved.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl RgbImage {
    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width * 3],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), height * width * 3, "image data length does not match shape");
        Self { height, width, data }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * 3 + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * 3 + c] = v;
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn clamp01(&mut self) {
        self.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    }

    pub fn is_valid(&self) -> bool {
        self.data.iter().all(|v| (0.0..=1.0).contains(v))
    }

    /// One channel as a dense `height × width` plane.
    pub fn channel(&self, c: usize) -> Vec<f64> {
        self.data.iter().skip(c).step_by(3).copied().collect()
    }

    pub fn set_channel(&mut self, c: usize, plane: &[f64]) {
        for (dst, v) in self.data.iter_mut().skip(c).step_by(3).zip(plane) {
            *dst = *v;
        }
    }
}

/// Dense class-index mask; [`IGNORE_INDEX`] marks excluded pixels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl Mask {
    pub fn filled(height: usize, width: usize, value: u8) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<u8>) -> Self {
        assert_eq!(data.len(), height * width, "mask data length does not match shape");
        Self { height, width, data }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainTag {
    Source,
    Target,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    pub id: String,
    pub image: RgbImage,
    pub mask: Option<Mask>,
    pub domain: DomainTag,
}

impl ImageSample {
    pub fn new(id: impl Into<String>, image: RgbImage, mask: Option<Mask>, domain: DomainTag) -> Result<Self> {
        let id = id.into();
        if image.height < MIN_SIDE || image.width < MIN_SIDE {
            return Err(Error::Contract(format!(
                "sample `{id}` is {}x{}, below the {MIN_SIDE}x{MIN_SIDE} minimum",
                image.height, image.width
            )));
        }
        if !image.is_valid() {
            return Err(Error::Contract(format!("sample `{id}` has values outside [0, 1]")));
        }
        if let Some(m) = &mask {
            if (m.height, m.width) != (image.height, image.width) {
                return Err(Error::Contract(format!(
                    "sample `{id}` mask is {}x{} but image is {}x{}",
                    m.height, m.width, image.height, image.width
                )));
            }
        }
        Ok(Self { id, image, mask, domain })
    }
}

/// Ordered, immutable collection of samples sharing a label space.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainDataset {
    samples: Vec<ImageSample>,
    num_classes: usize,
    class_names: Vec<String>,
    split: Split,
}

impl DomainDataset {
    pub fn new(samples: Vec<ImageSample>, num_classes: usize, split: Split) -> Result<Self> {
        let names = (0..num_classes).map(|c| format!("class{c}")).collect();
        Self::with_class_names(samples, names, split)
    }

    pub fn with_class_names(samples: Vec<ImageSample>, class_names: Vec<String>, split: Split) -> Result<Self> {
        let num_classes = class_names.len();
        if num_classes == 0 || num_classes > IGNORE_INDEX as usize {
            return Err(Error::Config(format!("num_classes must lie in 1..=254, got {num_classes}")));
        }
        let mut seen = HashSet::new();
        for s in &samples {
            if !seen.insert(s.id.as_str()) {
                return Err(Error::Contract(format!("duplicate sample id `{}`", s.id)));
            }
            if let Some(m) = &s.mask {
                if let Some(bad) = m.data.iter().find(|&&v| v != IGNORE_INDEX && v as usize >= num_classes) {
                    return Err(Error::Contract(format!(
                        "sample `{}` mask holds class {bad}, outside 0..{num_classes}",
                        s.id
                    )));
                }
            }
        }
        Ok(Self {
            samples,
            num_classes,
            class_names,
            split,
        })
    }

    pub fn samples(&self) -> &[ImageSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn ids(&self) -> Vec<&str> {
        self.samples.iter().map(|s| s.id.as_str()).collect()
    }

    /// Ids of samples carrying a mask, in dataset order.
    pub fn labeled_ids(&self) -> Vec<&str> {
        self.samples
            .iter()
            .filter(|s| s.mask.is_some())
            .map(|s| s.id.as_str())
            .collect()
    }

    pub fn is_fully_labeled(&self) -> bool {
        self.samples.iter().all(|s| s.mask.is_some())
    }

    pub fn get(&self, id: &str) -> Option<&ImageSample> {
        self.samples.iter().find(|s| s.id == id)
    }

    /// The same dataset with every mask removed.
    pub fn without_labels(&self) -> DomainDataset {
        let samples = self
            .samples
            .iter()
            .map(|s| ImageSample {
                mask: None,
                ..s.clone()
            })
            .collect();
        Self {
            samples,
            ..self.clone_meta()
        }
    }

    /// Samples whose ids are listed, in the order of `ids`.
    pub fn select(&self, ids: &[&str]) -> Result<DomainDataset> {
        let samples = ids
            .iter()
            .map(|id| {
                self.get(id)
                    .cloned()
                    .ok_or_else(|| Error::Contract(format!("unknown sample id `{id}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            samples,
            ..self.clone_meta()
        })
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    /// Applies `f` to every sample, keeping metadata.
    pub fn map_samples(&self, mut f: impl FnMut(&ImageSample) -> ImageSample) -> DomainDataset {
        Self {
            samples: self.samples.iter().map(&mut f).collect(),
            ..self.clone_meta()
        }
    }

    /// Deterministic visiting order for `seed`.
    pub fn shuffled_order(&self, seed: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.samples.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        order
    }

    fn clone_meta(&self) -> Self {
        Self {
            samples: Vec::new(),
            num_classes: self.num_classes,
            class_names: self.class_names.clone(),
            split: self.split,
        }
    }
}

/// Stacks images into a `B × 3 × H × W` tensor.
pub fn images_to_tensor(images: &[&RgbImage]) -> Tensor4 {
    let (h, w) = (images[0].height, images[0].width);
    let mut t = Tensor4::zeros(images.len(), 3, h, w);
    for (n, img) in images.iter().enumerate() {
        assert_eq!((img.height, img.width), (h, w), "batch images differ in size");
        for c in 0..3 {
            let plane = t.plane_mut(n, c);
            for (dst, src) in plane.iter_mut().zip(img.data.iter().skip(c).step_by(3)) {
                *dst = *src;
            }
        }
    }
    t
}

/// Inverse of [`images_to_tensor`] for one sample.
pub fn tensor_to_image(t: &Tensor4, n: usize) -> RgbImage {
    let mut img = RgbImage::filled(t.h, t.w, 0.0);
    for c in 0..3 {
        img.set_channel(c, t.plane(n, c));
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(id: &str, mask: Option<Mask>) -> ImageSample {
        ImageSample::new(id, RgbImage::filled(8, 8, 0.5), mask, DomainTag::Source).unwrap()
    }

    #[test]
    fn rejects_small_or_out_of_range_images() {
        assert!(ImageSample::new("a", RgbImage::filled(4, 8, 0.5), None, DomainTag::Source).is_err());
        assert!(ImageSample::new("a", RgbImage::filled(8, 8, 1.5), None, DomainTag::Source).is_err());
        let bad_mask = Mask::filled(8, 9, 0);
        assert!(ImageSample::new("a", RgbImage::filled(8, 8, 0.5), Some(bad_mask), DomainTag::Source).is_err());
    }

    #[test]
    fn rejects_out_of_range_classes_but_accepts_ignore() {
        let ok = DomainDataset::new(vec![sample("a", Some(Mask::filled(8, 8, IGNORE_INDEX)))], 3, Split::Train);
        assert!(ok.is_ok());
        let bad = DomainDataset::new(vec![sample("a", Some(Mask::filled(8, 8, 3)))], 3, Split::Train);
        assert!(bad.is_err());
    }

    #[test]
    fn labeled_ids_and_stripping() {
        let ds = DomainDataset::new(
            vec![sample("a", Some(Mask::filled(8, 8, 0))), sample("b", None)],
            2,
            Split::Train,
        )
        .unwrap();
        assert_eq!(ds.labeled_ids(), vec!["a"]);
        assert!(ds.without_labels().labeled_ids().is_empty());
    }

    #[test]
    fn tensor_round_trip() {
        let mut img = RgbImage::filled(8, 8, 0.0);
        img.set(3, 4, 1, 0.75);
        img.set(0, 7, 2, 0.25);
        let t = images_to_tensor(&[&img]);
        assert_eq!(t.at(0, 1, 3, 4), 0.75);
        assert_eq!(tensor_to_image(&t, 0), img);
    }
}
