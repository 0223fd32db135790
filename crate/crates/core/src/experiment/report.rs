use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::metrics::MetricReport;

use super::evaluate::{REPORT_JSON, REPORT_MD};
use super::run::{RunDir, RunRecord, RUN_FILE};

/// Hashes a report's numbers were measured against. Reports may only be
/// merged when these agree.
#[derive(Debug, Default, PartialEq)]
struct Anchors {
    generation_reference: Option<String>,
    validation: Option<String>,
}

fn agree(slot: &mut Option<String>, value: &str, what: &str, dir: &Path) -> Result<()> {
    match slot {
        Some(v) if v != value => Err(Error::Comparison(format!(
            "{} used {what} {value} but earlier runs used {v}",
            dir.display()
        ))),
        Some(_) => Ok(()),
        None => {
            *slot = Some(value.to_string());
            Ok(())
        }
    }
}

/// Merges the reports of several run directories into one and writes it to
/// `out`. Runs measured against different real data are refused.
pub fn cmd_report(run_dirs: &[PathBuf], out: &Path) -> Result<MetricReport> {
    if run_dirs.is_empty() {
        return Err(Error::config("report needs at least one run directory"));
    }
    let mut anchors = Anchors::default();
    let mut merged = MetricReport::default();
    for dir in run_dirs {
        let report = MetricReport::read_json(&dir.join(REPORT_JSON))?;
        for t in &report.generation {
            agree(&mut anchors.generation_reference, &t.reference_hash, "real reference", dir)?;
        }
        if dir.join(RUN_FILE).is_file() {
            if let Some(h) = RunRecord::read(dir)?.inputs.get("validation") {
                agree(&mut anchors.validation, h, "validation set", dir)?;
            }
        }
        merged.merge(report);
    }
    merged.references.dedup();
    let run = RunDir::open(out)?;
    merged.write_json(&run.join(REPORT_JSON))?;
    let md = run.join(REPORT_MD);
    std::fs::write(&md, merged.to_markdown()).map_err(|e| Error::io(&md, e))?;
    let mut rec = RunRecord::new("report", 0, &run_dirs)?.output("report", REPORT_JSON).output("markdown", REPORT_MD);
    if let Some(h) = &anchors.generation_reference {
        rec = rec.input("real_reference", h);
    }
    if let Some(h) = &anchors.validation {
        rec = rec.input("validation", h);
    }
    run.record(&rec)?;
    Ok(merged)
}
