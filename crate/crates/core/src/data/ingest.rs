//! Reads a scan tree laid out as
//!
//! ```text
//! root/<patient>/<patient>_<2CH|4CH>_<ED|ES>.png
//! root/<patient>/<patient>_<2CH|4CH>_<ED|ES>_gt.png
//! ```
//!
//! Per-record failures are collected, not raised.

use std::path::{Path, PathBuf};

use super::image::{GrayImage, LabelMap};
use super::record::{PatientRecord, Provenance};
use crate::error::{Error, Result};
use crate::prompt::ViewPhase;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecordGap {
    pub patient_id: String,
    pub view_phase: ViewPhase,
    pub reason: String,
}

#[derive(Debug, Default)]
pub struct IngestReport {
    /// Sorted by patient id, then table order of view/phase.
    pub records: Vec<PatientRecord>,
    pub gaps: Vec<RecordGap>,
    pub warnings: Vec<String>,
}

/// Ingests every patient folder under `root`. With `resolution`, images are
/// area-resampled and masks nearest-resampled to `resolution × resolution`.
pub fn ingest(root: &Path, resolution: Option<usize>) -> Result<IngestReport> {
    let entries = std::fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    let mut patients: Vec<(String, PathBuf)> = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        if entry.path().is_dir() {
            patients.push((entry.file_name().to_string_lossy().into_owned(), entry.path()));
        }
    }
    patients.sort();
    let mut report = IngestReport::default();
    if patients.is_empty() {
        report.warnings.push(format!("no patient folders under {}", root.display()));
        return Ok(report);
    }

    let workers = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    let chunk = patients.len().div_ceil(workers);
    let parts: Vec<Vec<(Vec<PatientRecord>, Vec<RecordGap>)>> = std::thread::scope(|s| {
        let handles: Vec<_> = patients
            .chunks(chunk)
            .map(|group| s.spawn(move || group.iter().map(|(id, dir)| ingest_patient(id, dir, resolution)).collect()))
            .collect();
        handles.into_iter().map(|h| h.join().expect("ingest worker panicked")).collect()
    });
    for (records, gaps) in parts.into_iter().flatten() {
        report.records.extend(records);
        report.gaps.extend(gaps);
    }
    Ok(report)
}

fn ingest_patient(id: &str, dir: &Path, resolution: Option<usize>) -> (Vec<PatientRecord>, Vec<RecordGap>) {
    let mut records = Vec::new();
    let mut gaps = Vec::new();
    for vp in ViewPhase::all() {
        let stem = format!("{id}_{}_{}", vp.view.code(), vp.phase.code());
        match load_pair(&dir.join(format!("{stem}.png")), &dir.join(format!("{stem}_gt.png")), resolution) {
            Ok((image, label)) => records.push(PatientRecord {
                patient_id: id.to_string(),
                view_phase: vp,
                image,
                label_map: Some(label),
                provenance: Provenance::Real,
                source_prompt: None,
            }),
            Err(e) => gaps.push(RecordGap {
                patient_id: id.to_string(),
                view_phase: vp,
                reason: e.to_string(),
            }),
        }
    }
    (records, gaps)
}

fn load_pair(image: &Path, label: &Path, resolution: Option<usize>) -> Result<(GrayImage, LabelMap)> {
    if !image.exists() {
        return Err(Error::Integrity(format!("missing image {}", image.display())));
    }
    if !label.exists() {
        return Err(Error::Integrity(format!("missing label file {}", label.display())));
    }
    let (img, _) = GrayImage::load_png(image)?;
    let lab = LabelMap::load_png(label)?;
    if (img.height, img.width) != (lab.height, lab.width) {
        return Err(Error::Integrity(format!("{} and its label differ in size", image.display())));
    }
    Ok(match resolution {
        Some(r) => (img.resize_area(r, r), lab.resize_nearest(r, r)),
        None => (img, lab),
    })
}
