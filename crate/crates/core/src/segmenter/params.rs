use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Name and location of one parameter array inside the flat buffer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Named parameter arrays backed by a single contiguous buffer.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamSet {
    specs: Vec<ParamSpec>,
    data: Vec<f64>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a zero-filled array and returns its range.
    pub fn push(&mut self, name: impl Into<String>, shape: &[usize]) -> Range<usize> {
        let spec = ParamSpec {
            name: name.into(),
            shape: shape.to_vec(),
            offset: self.data.len(),
        };
        let range = spec.range();
        self.data.resize(range.end, 0.0);
        self.specs.push(spec);
        range
    }

    pub fn from_parts(specs: Vec<ParamSpec>, data: Vec<f64>) -> Result<Self> {
        let mut expected = 0;
        for s in &specs {
            if s.offset != expected {
                return Err(Error::Contract(format!("parameter `{}` is not contiguous", s.name)));
            }
            expected += s.len();
        }
        if expected != data.len() {
            return Err(Error::Contract(format!(
                "parameter buffer holds {} values, specs describe {expected}",
                data.len()
            )));
        }
        Ok(Self { specs, data })
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.specs.iter().find(|s| s.name == name).map(|s| &self.data[s.range()])
    }

    /// Ranges of all parameters whose name starts with `prefix`.
    pub fn ranges_with_prefix(&self, prefix: &str) -> Vec<Range<usize>> {
        self.specs
            .iter()
            .filter(|s| s.name.starts_with(prefix))
            .map(ParamSpec::range)
            .collect()
    }

    pub fn same_layout(&self, other: &ParamSet) -> bool {
        self.specs == other.specs
    }
}
