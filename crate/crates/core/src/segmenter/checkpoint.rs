use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::Segmenter;
use super::params::{ParamSet, ParamSpec};
use super::SegmenterConfig;
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

const MAGIC: &[u8; 8] = b"SEGADAPT";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageKind {
    Sp,
    Uda,
    Sa,
}

/// One training stage that produced (part of) a checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub stage: StageKind,
    /// Scheme, adapter or alignment mode name.
    pub label: String,
    pub config: serde_json::Value,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegmenterCheckpoint {
    pub weights: ParamSet,
    pub config: SegmenterConfig,
    provenance: Vec<Provenance>,
    pub format_version: u32,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: SegmenterConfig,
    provenance: Vec<Provenance>,
    params: Vec<ParamSpec>,
}

impl SegmenterCheckpoint {
    pub fn from_model(model: &Segmenter, provenance: Vec<Provenance>) -> Self {
        Self {
            weights: model.params().clone(),
            config: model.config().clone(),
            provenance,
            format_version: CHECKPOINT_FORMAT_VERSION,
        }
    }

    pub fn provenance(&self) -> &[Provenance] {
        &self.provenance
    }

    /// Appends a stage record; existing records are never rewritten.
    pub fn push_provenance(&mut self, record: Provenance) {
        self.provenance.push(record);
    }

    /// Derives a checkpoint for `model` that extends this one's history.
    pub fn extended(&self, model: &Segmenter, record: Provenance) -> Self {
        let mut provenance = self.provenance.clone();
        provenance.push(record);
        Self::from_model(model, provenance)
    }

    pub fn to_model(&self) -> Result<Segmenter> {
        Segmenter::from_params(self.config.clone(), self.weights.clone())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            config: self.config.clone(),
            provenance: self.provenance.clone(),
            params: self.weights.specs().to_vec(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Serialization(e.to_string()))?;
        let mut out = Vec::with_capacity(24 + json.len() + 8 * self.weights.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.format_version.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for v in self.weights.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |msg: &str| Error::format(path, msg);
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a segmenter checkpoint"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_FORMAT_VERSION {
            return Err(bad(&format!(
                "checkpoint format version {version}, expected {CHECKPOINT_FORMAT_VERSION}"
            )));
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(20..20 + header_len).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| bad(&format!("bad header: {e}")))?;
        let blob = &bytes[20 + header_len..];
        if blob.len() % 8 != 0 {
            return Err(bad("weight blob is not a whole number of f64 values"));
        }
        let data: Vec<f64> = blob
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let weights = ParamSet::from_parts(header.params, data).map_err(|e| bad(&e.to_string()))?;
        // shape check against the architecture
        Segmenter::from_params(header.config.clone(), weights.clone())?;
        Ok(Self {
            weights,
            config: header.config,
            provenance: header.provenance,
            format_version: version,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
        }
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("partial");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}
