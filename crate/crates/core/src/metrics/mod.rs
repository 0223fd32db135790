//! Generation-quality, segmentation and classification metrics.

mod classification;
mod distribution;
mod features;
mod report;
mod segmentation;

pub use classification::{classification_scores, confusion_matrix, scores_from_confusion, ClassificationScores};
pub use distribution::{fid, frechet_distance, kid, mmd2_unbiased, GaussianStats, KidParams};
pub use features::{extract_features, extractor_by_name, AssetRegistry, FeatureExtractor, FeatureSet, LinearEmbedder};
pub use report::{
    ClassificationRow, GenerationCell, GenerationTable, MetricReport, ReferenceValue, SegmentationRow,
    DISTANCE_UNIT_NOTE, KID_SCALE_NOTE,
};
pub use segmentation::{
    average_surface_distance, dice, distance_transform, hausdorff, score_segmentations, Mask, SegmentationScores,
    StructureScores,
};
