//! Segmentation and phase-classification models trained on real/synthetic
//! mixes, and comparison across regimes.

mod compare;
mod probe;
mod segmentation;
mod segnet;

pub use compare::{
    classification_columns, compare_regimes, plot_convergence, segmentation_columns, Comparison, ComparisonRow,
    MetricValue, Rank, RegimeResult,
};
pub use probe::{
    backbone_by_name, linear_probe, train_linear_head, Backbone, ConvBackbone, LinearHead, ProbeConfig, ProbeRun,
    BACKBONE_PREFIX, PHASE_CLASSES,
};
pub use segmentation::{
    check_training_records, check_validation_records, evaluate_segmentation, train_segmentation, EpochLog, SegConfig,
    SegRun, ALLOWED_MIX_PERCENTS,
};
pub use segnet::{argmax_maps, ce_dice_loss, SegNet, SegNetSpec, SEGNET_PREFIX};
