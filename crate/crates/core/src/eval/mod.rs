//! Class-remapped mIoU, the corruption battery and table-shaped reports.

mod corrupt;
mod evaluate;
mod mapping;
mod metrics;
mod report;

pub use corrupt::{corrupt, default_battery, motion_kernel, CorruptionKind, CorruptionSpec, FOG_GRAY};
pub use evaluate::{
    evaluate_model, evaluate_predictor, robustness_eval, Predictor, RobustnessRow, SegmenterPredictor, StageReport,
};
pub use mapping::{remap_mask, ClassMapping, CITYSCAPES_CLASSES};
pub use metrics::{accumulate_confusion, miou, AbsentClassPolicy, ClassIou, ConfusionMatrix, MiouResult};
pub use report::{contribution_grid, render_grid, robustness_grid, ReportRecord};
