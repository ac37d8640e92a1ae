//! Three-stage domain adaptation for semantic segmentation: source
//! preparation, unsupervised adaptation and supervised alignment.

pub mod alignment;
pub mod data;
pub mod error;
pub mod eval;
pub mod imageops;
pub mod io;
pub mod pipeline;
pub mod segmenter;
pub mod source_prep;
pub mod tensor;
pub mod uda;

pub use error::{Error, Result};
