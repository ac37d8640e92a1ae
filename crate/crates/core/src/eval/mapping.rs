use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::IGNORE_INDEX;
use crate::error::{Error, Result};

/// Cityscapes train-index label space.
pub const CITYSCAPES_CLASSES: [&str; 19] = [
    "road",
    "sidewalk",
    "building",
    "wall",
    "fence",
    "pole",
    "traffic light",
    "traffic sign",
    "vegetation",
    "terrain",
    "sky",
    "person",
    "rider",
    "car",
    "truck",
    "bus",
    "train",
    "motorcycle",
    "bicycle",
];

const CS_PERSON: usize = 11;
const CS_RIDER: usize = 12;
const CS_CAR: usize = 13;
const CS_TRUCK: usize = 14;
const CS_BUS: usize = 15;
const CS_MOTORCYCLE: usize = 17;
const CS_BICYCLE: usize = 18;

/// Lookup from a model's label space to the evaluation label space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMapping {
    /// `table[src]` is the evaluation class, or `None` for ignore.
    pub table: Vec<Option<u8>>,
    pub eval_class_names: Vec<String>,
    pub ignore_index: u8,
}

impl ClassMapping {
    pub fn new(table: Vec<Option<u8>>, eval_class_names: Vec<String>) -> Result<Self> {
        let k = eval_class_names.len();
        if let Some(bad) = table.iter().flatten().find(|&&e| e as usize >= k) {
            return Err(Error::Config(format!(
                "mapping targets evaluation class {bad} but only {k} classes exist"
            )));
        }
        Ok(Self {
            table,
            eval_class_names,
            ignore_index: IGNORE_INDEX,
        })
    }

    pub fn identity(class_names: &[String]) -> Self {
        Self {
            table: (0..class_names.len()).map(|c| Some(c as u8)).collect(),
            eval_class_names: class_names.to_vec(),
            ignore_index: IGNORE_INDEX,
        }
    }

    pub fn num_eval_classes(&self) -> usize {
        self.eval_class_names.len()
    }

    pub fn num_source_classes(&self) -> usize {
        self.table.len()
    }

    /// Cityscapes → thermal benchmark: car; person and rider → person;
    /// motorcycle and bicycle → bike; every other class is ignored.
    /// Evaluation classes follow the thermal dataset's own indices.
    pub fn cityscapes_to_mfnt() -> Self {
        let names = [
            "unlabeled",
            "car",
            "person",
            "bike",
            "curve",
            "car_stop",
            "guardrail",
            "color_cone",
            "bump",
        ];
        let mut table = vec![None; CITYSCAPES_CLASSES.len()];
        table[CS_CAR] = Some(1);
        table[CS_PERSON] = Some(2);
        table[CS_RIDER] = Some(2);
        table[CS_MOTORCYCLE] = Some(3);
        table[CS_BICYCLE] = Some(3);
        Self::new(table, names.iter().map(|s| s.to_string()).collect()).expect("valid built-in")
    }

    /// Classes compared for the thermal benchmark: car, person, bike.
    pub fn mfnt_selected_classes() -> Vec<usize> {
        vec![1, 2, 3]
    }

    /// Cityscapes → intensifier benchmark: person and rider → people;
    /// car, truck and bus → vehicle; everything else → background.
    pub fn cityscapes_to_ci() -> Self {
        let mut table = vec![Some(0); CITYSCAPES_CLASSES.len()];
        table[CS_PERSON] = Some(1);
        table[CS_RIDER] = Some(1);
        for c in [CS_CAR, CS_TRUCK, CS_BUS] {
            table[c] = Some(2);
        }
        Self::new(table, ["background", "people", "vehicle"].iter().map(|s| s.to_string()).collect())
            .expect("valid built-in")
    }

    pub fn builtin(name: &str) -> Result<Self> {
        match name {
            "cs_to_mfnt" => Ok(Self::cityscapes_to_mfnt()),
            "cs_to_ci" => Ok(Self::cityscapes_to_ci()),
            other => Err(Error::Config(format!(
                "unknown built-in mapping `{other}` (known: cs_to_mfnt, cs_to_ci)"
            ))),
        }
    }

    /// Parses lines of `src -> eval` (or `src -> ignore`); `#` starts a
    /// comment. Source classes not listed map to ignore.
    pub fn from_table_text(text: &str, eval_class_names: Vec<String>) -> Result<Self> {
        let mut pairs = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = || Error::Config(format!("mapping line {}: expected `src -> eval`, got `{raw}`", lineno + 1));
            let (src, dst) = line.split_once("->").ok_or_else(bad)?;
            let src: usize = src.trim().parse().map_err(|_| bad())?;
            let dst = match dst.trim() {
                "ignore" => None,
                d => Some(d.parse::<u8>().map_err(|_| bad())?),
            };
            pairs.push((src, dst));
        }
        let len = pairs.iter().map(|(s, _)| s + 1).max().unwrap_or(0);
        let mut table = vec![None; len];
        for (src, dst) in pairs {
            table[src] = dst;
        }
        Self::new(table, eval_class_names)
    }

    pub fn load_table(path: &Path, eval_class_names: Vec<String>) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_table_text(&text, eval_class_names).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn map(&self, v: u8) -> u8 {
        if v == self.ignore_index {
            return self.ignore_index;
        }
        self.table
            .get(v as usize)
            .copied()
            .flatten()
            .unwrap_or(self.ignore_index)
    }
}

/// Elementwise lookup; unmapped classes and ignore become ignore.
pub fn remap_mask(mask: &[u8], mapping: &ClassMapping) -> Vec<u8> {
    mask.iter().map(|&v| mapping.map(v)).collect()
}
