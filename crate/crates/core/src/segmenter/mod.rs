//! A small hierarchical encoder with an all-stage fusing decoder, its losses,
//! the poly learning-rate schedule, the optimizer and the supervised loop.

mod augment;
mod checkpoint;
pub mod layers;
mod loss;
mod model;
mod optim;
mod params;
mod schedule;
mod train;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor4;

pub use augment::{augment, photometric, AugmentConfig, PhotometricConfig};
pub use checkpoint::{Provenance, SegmenterCheckpoint, StageKind, CHECKPOINT_FORMAT_VERSION};
pub use loss::{ce_loss, ce_loss_weighted, soft_ce_loss, LossGrad};
pub use model::{BackwardScope, ForwardCache, Segmenter, HEAD_PREFIX};
pub use optim::{AdamW, AdamWConfig};
pub use params::{ParamSet, ParamSpec};
pub use schedule::{poly_lr, PolySchedule};
pub use train::{fit, images_to_batch, train_supervised, TrainConfig, TrainOutcome};
pub(crate) use train::{random_crop, BatchSampler};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegmenterConfig {
    pub num_stages: usize,
    pub stage_channels: Vec<usize>,
    /// Per-stage downsampling factor; the cumulative product is the stride of
    /// each stage's feature map.
    pub stage_downsample: Vec<usize>,
    pub blocks_per_stage: Vec<usize>,
    pub decoder_dim: usize,
    pub num_classes: usize,
    /// Hidden expansion of the mixing blocks.
    pub mlp_ratio: usize,
}

impl Default for SegmenterConfig {
    fn default() -> Self {
        Self {
            num_stages: 4,
            stage_channels: vec![16, 32, 64, 128],
            stage_downsample: vec![4, 2, 2, 2],
            blocks_per_stage: vec![1, 1, 1, 1],
            decoder_dim: 32,
            num_classes: 3,
            mlp_ratio: 2,
        }
    }
}

impl SegmenterConfig {
    /// Two-stage, stride-4 model of a few hundred parameters for tests.
    pub fn tiny(num_classes: usize) -> Self {
        Self {
            num_stages: 2,
            stage_channels: vec![4, 8],
            stage_downsample: vec![2, 2],
            blocks_per_stage: vec![1, 1],
            decoder_dim: 4,
            num_classes,
            mlp_ratio: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.num_stages;
        if n == 0 {
            return Err(Error::Config("num_stages must be at least 1".into()));
        }
        for (name, len) in [
            ("stage_channels", self.stage_channels.len()),
            ("stage_downsample", self.stage_downsample.len()),
            ("blocks_per_stage", self.blocks_per_stage.len()),
        ] {
            if len != n {
                return Err(Error::Config(format!("{name} has {len} entries, expected num_stages = {n}")));
            }
        }
        if self.stage_channels.iter().any(|&c| c == 0) {
            return Err(Error::Config("stage widths must be at least 1".into()));
        }
        if self.stage_downsample.iter().any(|&d| d == 0) {
            return Err(Error::Config("downsample factors must be at least 1".into()));
        }
        if self.decoder_dim == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config("decoder_dim and mlp_ratio must be at least 1".into()));
        }
        if self.num_classes < 2 || self.num_classes > 255 {
            return Err(Error::Config(format!(
                "num_classes must lie in 2..=255, got {}",
                self.num_classes
            )));
        }
        Ok(())
    }

    /// Cumulative stride of each stage's output.
    pub fn stage_strides(&self) -> Vec<usize> {
        self.stage_downsample
            .iter()
            .scan(1, |acc, &d| {
                *acc *= d;
                Some(*acc)
            })
            .collect()
    }

    pub fn total_stride(&self) -> usize {
        self.stage_downsample.iter().product()
    }

    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let s = self.total_stride();
        if h % s != 0 || w % s != 0 || h == 0 || w == 0 {
            return Err(Error::Contract(format!(
                "input {h}x{w} is not divisible by the cumulative downsample {s}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Activations at a stage boundary (`stage_index` is 1-based).
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub values: Tensor4,
    pub stage_index: usize,
}

/// A train-time transform applied to stage outputs.
///
/// The transform must act on each (sample, channel) plane as an affine map
/// whose slope is treated as a constant during backpropagation; `apply`
/// returns those slopes (length `B × C`) when it rewrote the map.
pub trait StageHook {
    fn apply(&mut self, fm: &mut FeatureMap) -> Option<Vec<f64>>;

    /// Number of times the hook actually transformed a feature map.
    fn invocations(&self) -> usize;
}
