use std::path::PathBuf;

use serde::Serialize;

use crate::data::phantom::write_fixture_tree;
use crate::data::{ingest, split_patients, write_records, BitDepth, RecordGap, SplitSpec};
use crate::error::{Error, Result};
use crate::prompt::ViewPhase;

use super::run::{RunDir, RunRecord};

pub const TRAIN_DIR: &str = "train";
pub const VALIDATION_DIR: &str = "validation";
pub const GAPS_FILE: &str = "gaps.json";

#[derive(Debug, Clone, Serialize)]
pub struct IngestArgs {
    pub root: PathBuf,
    pub out: PathBuf,
    /// Square side records are resampled to; native size when `None`.
    pub resolution: Option<usize>,
    /// Split off this many lowest-id patients as validation.
    pub validation_patients: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct IngestSummary {
    /// `(directory, record count)` per written manifest.
    pub manifests: Vec<(PathBuf, usize)>,
    pub gaps: Vec<RecordGap>,
    pub warnings: Vec<String>,
}

#[derive(Serialize)]
struct GapEntry<'a> {
    patient_id: &'a str,
    view_phase: String,
    reason: &'a str,
}

/// Reads a scan tree and writes one manifest, or a train/validation pair
/// when a split is requested. Missing records are listed in `gaps.json`.
pub fn cmd_ingest(args: &IngestArgs) -> Result<IngestSummary> {
    let report = ingest(&args.root, args.resolution)?;
    for w in &report.warnings {
        log::warn!("{w}");
    }
    if report.records.is_empty() {
        return Err(Error::config(format!("no usable records under {}", args.root.display())));
    }
    let fallback = [args.resolution.unwrap_or(0); 2];
    let run = RunDir::open(&args.out)?;
    let mut manifests = Vec::new();
    let mut rec = RunRecord::new("ingest", 0, args)?;
    match args.validation_patients {
        Some(n) => {
            let (train, val) = split_patients(&report.records, SplitSpec { validation_patient_count: n })?;
            for (name, part) in [(TRAIN_DIR, train), (VALIDATION_DIR, val)] {
                let m = write_records(&part, &run.join(name), name, 0, BitDepth::Sixteen, fallback)?;
                rec = rec.output(name, format!("{name}/manifest.json"));
                manifests.push((run.join(name), m.len()));
            }
        }
        None => {
            let m = write_records(&report.records, run.path(), "real", 0, BitDepth::Sixteen, fallback)?;
            rec = rec.output("manifest", "manifest.json");
            manifests.push((run.path().to_path_buf(), m.len()));
        }
    }
    let gaps: Vec<GapEntry> = report
        .gaps
        .iter()
        .map(|g| GapEntry { patient_id: &g.patient_id, view_phase: g.view_phase.to_string(), reason: &g.reason })
        .collect();
    let gp = run.join(GAPS_FILE);
    std::fs::write(&gp, serde_json::to_string_pretty(&gaps)?).map_err(|e| Error::io(&gp, e))?;
    run.record(&rec.output("gaps", GAPS_FILE))?;
    Ok(IngestSummary { manifests, gaps: report.gaps, warnings: report.warnings })
}

#[derive(Debug, Clone, Serialize)]
pub struct FixtureArgs {
    pub root: PathBuf,
    pub patients: usize,
    pub size: usize,
    /// Patient/view-phase pairs written without a label file.
    pub skip_labels: Vec<(usize, ViewPhase)>,
}

/// Writes a phantom scan tree that `ingest` can read.
pub fn cmd_make_fixture(args: &FixtureArgs) -> Result<PathBuf> {
    if args.patients == 0 {
        return Err(Error::param("patients", "must be positive"));
    }
    write_fixture_tree(&args.root, args.patients, args.size, &args.skip_labels)?;
    Ok(args.root.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::read_manifest;

    #[test]
    fn fixture_ingest_split() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("scans");
        let vp = ViewPhase::all()[1];
        cmd_make_fixture(&FixtureArgs { root: root.clone(), patients: 5, size: 24, skip_labels: vec![(5, vp)] }).unwrap();
        let out = dir.path().join("data");
        let s = cmd_ingest(&IngestArgs { root, out: out.clone(), resolution: Some(16), validation_patients: Some(2) })
            .unwrap();
        assert_eq!(s.manifests.iter().map(|m| m.1).collect::<Vec<_>>(), [11, 8]);
        assert_eq!(s.gaps.len(), 1);
        let train = read_manifest(&out.join(TRAIN_DIR)).unwrap();
        let val = read_manifest(&out.join(VALIDATION_DIR)).unwrap();
        assert_eq!(train.header.resolution, [16, 16]);
        assert!(val.records.iter().all(|r| r.patient_id <= "patient0002".to_string()));
        assert_eq!(val.load_records().unwrap().len(), 8);
        let gaps = std::fs::read_to_string(out.join(GAPS_FILE)).unwrap();
        assert!(gaps.contains("patient0005"));
    }
}
