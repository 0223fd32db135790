//! Scan ingestion, phantom fixtures, hashed manifests, patient splits and
//! real/synthetic mixes.

pub mod image;
pub mod ingest;
pub mod manifest;
pub mod phantom;
pub mod record;
pub mod split;

pub use image::{BitDepth, GrayImage, LabelMap, CLASS_NAMES, NUM_CLASSES};
pub use ingest::{ingest, IngestReport, RecordGap};
pub use manifest::{read_manifest, write_records, write_synthetic, Counts, DatasetManifest, RecordDescriptor};
pub use record::{PatientKeyed, PatientRecord, Provenance};
pub use split::{mix_real_synthetic, required_synthetic, split_manifest, split_patients, SplitSpec};
