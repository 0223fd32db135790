//! The experiment verbs behind the command line: each reads its inputs,
//! writes into a locked run directory and records what it consumed.

mod data;
mod downstream;
mod evaluate;
mod report;
mod run;
mod synthesize;
mod train;

pub use data::{cmd_ingest, cmd_make_fixture, FixtureArgs, IngestArgs, IngestSummary, GAPS_FILE, TRAIN_DIR, VALIDATION_DIR};
pub use downstream::{
    check_patient_overlap, cmd_downstream_cls, cmd_downstream_seg, read_regime_results, regime_name, ClsArgs,
    DownstreamSummary, RegimeArgs, SegArgs, CLASSIFICATION_REFERENCE, COMPARISON_MD, CONVERGENCE_SVG, REGIME_DIR,
    SEGMENTATION_REFERENCE,
};
pub use evaluate::{
    cmd_evaluate, generation_references, generation_table, manifest_features, EvalArgs, GENERATION_REFERENCE,
    REPORT_JSON, REPORT_MD,
};
pub use report::cmd_report;
pub use run::{file_hash, RunDir, RunRecord, LOCK_FILE, RUN_FILE};
pub use synthesize::{cmd_synthesize, synthetic_patient_id, SynthArgs, SynthSummary};
pub use train::{cmd_train, latest_checkpoint, TrainArgs, TrainSummary, CONFIG_SNAPSHOT};
