//! Generic `images/` + `masks/` + `manifest.toml` dataset directories.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::city_intensified::{decode_label_image, encode_label_mask, LabelPalette};
use super::{DomainDataset, DomainTag, ImageSample, Split, IGNORE_INDEX};
use crate::error::{Error, Result};
use crate::io::{read_png_gray, read_png_rgb, write_png_gray, write_png_rgb};

pub const MANIFEST_FILE: &str = "manifest.toml";

/// How mask files encode classes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum MaskFormat {
    /// 8-bit grayscale, pixel value = class index.
    #[default]
    Indexed,
    /// Color-coded labels decoded by nearest palette color.
    Palette(LabelPalette),
}

/// Dataset manifest stored next to the image folders.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    #[serde(default)]
    pub format: MaskFormat,
    pub num_classes: usize,
    pub class_names: Vec<String>,
    #[serde(default = "default_ignore")]
    pub ignore_index: u8,
    pub domain: DomainTag,
    /// Split the directory holds when `splits` does not list memberships.
    pub split: Split,
    /// Optional explicit membership lists, keyed by split.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub splits: BTreeMap<String, Vec<String>>,
}

fn default_ignore() -> u8 {
    IGNORE_INDEX
}

impl DatasetManifest {
    pub fn read(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Self = toml::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
        if manifest.class_names.len() != manifest.num_classes {
            return Err(Error::format(
                &path,
                format!(
                    "num_classes = {} but {} class names listed",
                    manifest.num_classes,
                    manifest.class_names.len()
                ),
            ));
        }
        if manifest.ignore_index != IGNORE_INDEX {
            return Err(Error::format(&path, format!("ignore_index must be {IGNORE_INDEX}")));
        }
        Ok(manifest)
    }

    pub fn write(&self, root: &Path) -> Result<()> {
        let path = root.join(MANIFEST_FILE);
        let text = toml::to_string(self).map_err(|e| Error::Serialization(e.to_string()))?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}

/// Folder names and split selection for [`load_directory_dataset`].
#[derive(Clone, Debug, PartialEq)]
pub struct DirectoryLayout {
    pub images_dir: String,
    pub masks_dir: String,
    /// When the manifest lists split memberships, load only this split.
    pub split: Option<Split>,
}

impl Default for DirectoryLayout {
    fn default() -> Self {
        Self {
            images_dir: "images".into(),
            masks_dir: "masks".into(),
            split: None,
        }
    }
}

fn split_key(split: Split) -> &'static str {
    match split {
        Split::Train => "train",
        Split::Val => "val",
    }
}

fn png_stems(dir: &Path) -> Result<Vec<String>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut stems = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                stems.push(stem.to_string());
            }
        }
    }
    stems.sort();
    Ok(stems)
}

/// Loads one sample per image file; samples with a matching mask file carry it.
/// Samples are ordered lexicographically by id.
pub fn load_directory_dataset(root: &Path, layout: &DirectoryLayout) -> Result<DomainDataset> {
    if !root.is_dir() {
        return Err(Error::NotFound(root.to_path_buf()));
    }
    let manifest = DatasetManifest::read(root)?;
    let images_dir = root.join(&layout.images_dir);
    let masks_dir = root.join(&layout.masks_dir);
    let mut ids = png_stems(&images_dir)?;

    let mut split = manifest.split;
    if let Some(wanted) = layout.split {
        if let Some(members) = manifest.splits.get(split_key(wanted)) {
            let members: HashSet<&str> = members.iter().map(String::as_str).collect();
            ids.retain(|id| members.contains(id.as_str()));
        } else if wanted != manifest.split {
            return Err(Error::format(
                root.join(MANIFEST_FILE),
                format!("no `{}` split in this dataset", split_key(wanted)),
            ));
        }
        split = wanted;
    }

    let mut samples = Vec::with_capacity(ids.len());
    for id in ids {
        let image_path = images_dir.join(format!("{id}.png"));
        let image = read_png_rgb(&image_path)?;
        let mask_path = masks_dir.join(format!("{id}.png"));
        let mask = if mask_path.is_file() {
            let mask = match &manifest.format {
                MaskFormat::Indexed => read_png_gray(&mask_path)?,
                MaskFormat::Palette(palette) => decode_label_image(&read_png_rgb(&mask_path)?, palette)
                    .map_err(|msg| Error::format(&mask_path, msg))?,
            };
            if (mask.height, mask.width) != (image.height, image.width) {
                return Err(Error::format(
                    &mask_path,
                    format!(
                        "mask is {}x{} but image is {}x{}",
                        mask.height, mask.width, image.height, image.width
                    ),
                ));
            }
            if let Some(bad) = mask
                .data
                .iter()
                .find(|&&v| v != IGNORE_INDEX && v as usize >= manifest.num_classes)
            {
                return Err(Error::format(
                    &mask_path,
                    format!("unknown class index {bad} (num_classes = {})", manifest.num_classes),
                ));
            }
            Some(mask)
        } else {
            None
        };
        samples.push(
            ImageSample::new(id, image, mask, manifest.domain).map_err(|e| Error::format(&image_path, e.to_string()))?,
        );
    }
    DomainDataset::with_class_names(samples, manifest.class_names.clone(), split)
}

/// Writes `ds` in directory format. When `write_masks` is false the masks
/// are withheld from disk.
pub fn write_directory_dataset(
    root: &Path,
    ds: &DomainDataset,
    domain: DomainTag,
    format: &MaskFormat,
    write_masks: bool,
) -> Result<PathBuf> {
    let images_dir = root.join("images");
    let masks_dir = root.join("masks");
    fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;
    if write_masks {
        fs::create_dir_all(&masks_dir).map_err(|e| Error::io(&masks_dir, e))?;
    }
    for s in ds.samples() {
        write_png_rgb(&images_dir.join(format!("{}.png", s.id)), &s.image)?;
        if let (true, Some(mask)) = (write_masks, &s.mask) {
            let path = masks_dir.join(format!("{}.png", s.id));
            match format {
                MaskFormat::Indexed => write_png_gray(&path, mask)?,
                MaskFormat::Palette(palette) => write_png_rgb(&path, &encode_label_mask(mask, palette))?,
            }
        }
    }
    let manifest = DatasetManifest {
        format: format.clone(),
        num_classes: ds.num_classes(),
        class_names: ds.class_names().to_vec(),
        ignore_index: IGNORE_INDEX,
        domain,
        split: ds.split(),
        splits: BTreeMap::new(),
    };
    manifest.write(root)?;
    Ok(root.to_path_buf())
}
