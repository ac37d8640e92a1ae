//! Paired high-sensitivity / intensifier dataset with color-coded labels.
//!
//! Layout: `hs/<id>.png`, `intensifier/<id>.png`, `labels/<id>.png` (only for
//! the labeled subset) and the split lists `train.txt` / `val.txt`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DomainDataset, DomainTag, ImageSample, Mask, RgbImage, Split, IGNORE_INDEX};
use crate::error::{Error, Result};
use crate::io::read_png_rgb;

pub const CI_BACKGROUND: u8 = 0;
pub const CI_PEOPLE: u8 = 1;
pub const CI_VEHICLE: u8 = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PaletteEntry {
    /// Class index, or [`IGNORE_INDEX`].
    pub class: u8,
    pub color: [u8; 3],
}

/// Color → class table decoded by nearest color within `max_distance`
/// (Euclidean, 0–255 scale).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelPalette {
    pub entries: Vec<PaletteEntry>,
    pub max_distance: f64,
}

impl Default for LabelPalette {
    /// white = background, red = people, blue = vehicle, gray = ignore.
    fn default() -> Self {
        Self {
            entries: vec![
                PaletteEntry {
                    class: CI_BACKGROUND,
                    color: [255, 255, 255],
                },
                PaletteEntry {
                    class: CI_PEOPLE,
                    color: [255, 0, 0],
                },
                PaletteEntry {
                    class: CI_VEHICLE,
                    color: [0, 0, 255],
                },
                PaletteEntry {
                    class: IGNORE_INDEX,
                    color: [128, 128, 128],
                },
            ],
            max_distance: 60.0,
        }
    }
}

impl LabelPalette {
    fn nearest(&self, rgb: [f64; 3]) -> Option<(u8, f64)> {
        self.entries
            .iter()
            .map(|e| {
                let d = (0..3)
                    .map(|c| (rgb[c] - e.color[c] as f64).powi(2))
                    .sum::<f64>()
                    .sqrt();
                (e.class, d)
            })
            .min_by(|a, b| a.1.total_cmp(&b.1))
    }

    fn color_of(&self, class: u8) -> Option<[u8; 3]> {
        self.entries.iter().find(|e| e.class == class).map(|e| e.color)
    }
}

pub fn decode_label_image(label: &RgbImage, palette: &LabelPalette) -> Result<Mask, String> {
    let mut data = Vec::with_capacity(label.height * label.width);
    for y in 0..label.height {
        for x in 0..label.width {
            let p = label.pixel(y, x).map(|v| (v * 255.0).round());
            match palette.nearest(p) {
                Some((class, d)) if d <= palette.max_distance => data.push(class),
                _ => {
                    return Err(format!(
                        "undecodable label color ({}, {}, {}) at ({y}, {x})",
                        p[0], p[1], p[2]
                    ))
                }
            }
        }
    }
    Ok(Mask::from_vec(label.height, label.width, data))
}

/// Inverse of [`decode_label_image`] for masks whose classes all have colors.
pub fn encode_label_mask(mask: &Mask, palette: &LabelPalette) -> RgbImage {
    let mut img = RgbImage::filled(mask.height, mask.width, 0.0);
    for (i, &class) in mask.data.iter().enumerate() {
        let color = palette
            .color_of(class)
            .unwrap_or_else(|| panic!("class {class} has no palette color"));
        for c in 0..3 {
            img.data[i * 3 + c] = color[c] as f64 / 255.0;
        }
    }
    img
}

/// Both halves of the paired dataset; ids match position-wise.
#[derive(Clone, Debug)]
pub struct CityIntensified {
    pub hs: DomainDataset,
    pub intensifier: DomainDataset,
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
}

impl CityIntensified {
    /// Labeled intensifier samples listed in the requested split file.
    pub fn intensifier_split(&self, split: Split) -> Result<DomainDataset> {
        let ids = match split {
            Split::Train => &self.train_ids,
            Split::Val => &self.val_ids,
        };
        let ids: Vec<&str> = ids.iter().map(String::as_str).collect();
        Ok(self.intensifier.select(&ids)?.with_split(split))
    }
}

pub fn class_names() -> Vec<String> {
    vec!["background".into(), "people".into(), "vehicle".into()]
}

fn stems(dir: &Path) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            if let Some(s) = path.file_stem().and_then(|s| s.to_str()) {
                out.push(s.to_string());
            }
        }
    }
    out.sort();
    Ok(out)
}

fn read_split(path: &Path, known: &[String]) -> Result<Vec<String>> {
    if !path.is_file() {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let ids: Vec<String> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(String::from)
        .collect();
    if let Some(bad) = ids.iter().find(|id| known.binary_search(id).is_err()) {
        return Err(Error::format(path, format!("split lists unknown id `{bad}`")));
    }
    Ok(ids)
}

pub fn load_city_intensified(root: &Path) -> Result<CityIntensified> {
    load_city_intensified_with_palette(root, &LabelPalette::default())
}

pub fn load_city_intensified_with_palette(root: &Path, palette: &LabelPalette) -> Result<CityIntensified> {
    if !root.is_dir() {
        return Err(Error::NotFound(root.to_path_buf()));
    }
    let hs_ids = stems(&root.join("hs"))?;
    let int_ids = stems(&root.join("intensifier"))?;
    if let Some(id) = hs_ids.iter().find(|id| int_ids.binary_search(id).is_err()) {
        return Err(Error::Pairing(format!("`{id}` has a high-sensitivity image but no intensifier image")));
    }
    if let Some(id) = int_ids.iter().find(|id| hs_ids.binary_search(id).is_err()) {
        return Err(Error::Pairing(format!("`{id}` has an intensifier image but no high-sensitivity image")));
    }

    let mut hs = Vec::with_capacity(hs_ids.len());
    let mut intensifier = Vec::with_capacity(hs_ids.len());
    for id in &hs_ids {
        let hs_img = read_png_rgb(&root.join("hs").join(format!("{id}.png")))?;
        let int_path = root.join("intensifier").join(format!("{id}.png"));
        let int_img = read_png_rgb(&int_path)?;
        let label_path = root.join("labels").join(format!("{id}.png"));
        let mask = if label_path.is_file() {
            let mask = decode_label_image(&read_png_rgb(&label_path)?, palette)
                .map_err(|msg| Error::format(&label_path, msg))?;
            if (mask.height, mask.width) != (int_img.height, int_img.width) {
                return Err(Error::format(&label_path, "label size differs from the intensifier image"));
            }
            Some(mask)
        } else {
            None
        };
        hs.push(ImageSample::new(id.clone(), hs_img, None, DomainTag::Source)?);
        intensifier.push(ImageSample::new(id.clone(), int_img, mask, DomainTag::Target)?);
    }
    Ok(CityIntensified {
        hs: DomainDataset::with_class_names(hs, class_names(), Split::Train)?,
        intensifier: DomainDataset::with_class_names(intensifier, class_names(), Split::Train)?,
        train_ids: read_split(&root.join("train.txt"), &hs_ids)?,
        val_ids: read_split(&root.join("val.txt"), &hs_ids)?,
    })
}
