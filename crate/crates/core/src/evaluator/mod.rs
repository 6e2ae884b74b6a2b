//! Classification metrics and the masking ablation harness.

pub mod masking;
pub mod metrics;
pub mod study;

pub use masking::{apply_mask, random_mask_like, MaskSpec};
pub use metrics::{auroc, average_precision, cmap, eer, t1_acc, Condition, MetricReport};
pub use study::{masking_study, SchemeStudy, SpectrogramModel, StudyConfig, StudyReport};
