//! Metric tables as JSON and markdown.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ClassificationScores, SegmentationScores};
use crate::error::{Error, Result};
use crate::prompt::ViewPhase;

/// KID is stored unscaled; this note travels with every table.
pub const KID_SCALE_NOTE: &str = "KID values are raw MMD² (not multiplied by 100 or 1000)";
pub const DISTANCE_UNIT_NOTE: &str = "HD and ASD are in pixels of the evaluated resolution";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationCell {
    pub view_phase: ViewPhase,
    /// `None` when either side has fewer than two images.
    pub fid: Option<f64>,
    pub kid_mean: Option<f64>,
    pub kid_std: Option<f64>,
    pub n_real: usize,
    pub n_synthetic: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationTable {
    pub model: String,
    pub extractor: String,
    /// Hash of the real manifest the cells were measured against.
    pub reference_hash: String,
    pub cells: Vec<GenerationCell>,
}

fn mean_of(v: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let xs: Vec<f64> = v.flatten().collect();
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

impl GenerationTable {
    /// Mean over defined cells.
    pub fn mean_fid(&self) -> Option<f64> {
        mean_of(self.cells.iter().map(|c| c.fid))
    }

    pub fn mean_kid(&self) -> Option<f64> {
        mean_of(self.cells.iter().map(|c| c.kid_mean))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentationRow {
    pub regime: String,
    pub scores: SegmentationScores,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationRow {
    pub regime: String,
    pub scores: ClassificationScores,
}

/// A reference value printed next to a measured one, for context only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceValue {
    pub table: String,
    pub row: String,
    pub metric: String,
    pub value: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub generation: Vec<GenerationTable>,
    pub segmentation: Vec<SegmentationRow>,
    pub classification: Vec<ClassificationRow>,
    pub references: Vec<ReferenceValue>,
    pub notes: Vec<String>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("n/a".into(), |x| format!("{x:.3}"))
}

fn fmt_prec(v: Option<f64>, digits: usize) -> String {
    v.map_or("n/a".into(), |x| format!("{x:.digits$}"))
}

impl MetricReport {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        let s = serde_json::to_string_pretty(self).map_err(|e| Error::Serde(e.to_string()))?;
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&s).map_err(|e| Error::Serde(format!("{}: {e}", path.display())))
    }

    pub fn merge(&mut self, other: MetricReport) {
        self.generation.extend(other.generation);
        self.segmentation.extend(other.segmentation);
        self.classification.extend(other.classification);
        self.references.extend(other.references);
        for n in other.notes {
            if !self.notes.contains(&n) {
                self.notes.push(n);
            }
        }
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::new();
        if !self.generation.is_empty() {
            s.push_str("## Generation quality\n\n| Model | Extractor |");
            for vp in ViewPhase::all() {
                let _ = write!(s, " {vp} FID | {vp} KID |");
            }
            s.push_str(" Mean FID | Mean KID |\n|---|---|");
            s.push_str(&"---|---|".repeat(5));
            s.push('\n');
            for t in &self.generation {
                let _ = write!(s, "| {} | {} |", t.model, t.extractor);
                for vp in ViewPhase::all() {
                    match t.cells.iter().find(|c| c.view_phase == vp) {
                        Some(c) if c.kid_mean.is_some() => {
                            let _ = write!(
                                s,
                                " {} | {} ± {} |",
                                fmt_prec(c.fid, 4),
                                fmt_prec(c.kid_mean, 5),
                                fmt_prec(c.kid_std, 5)
                            );
                        }
                        Some(c) => {
                            let _ = write!(s, " {} | n/a |", fmt_prec(c.fid, 4));
                        }
                        None => s.push_str(" n/a | n/a |"),
                    }
                }
                let _ = writeln!(s, " {} | {} |", fmt_prec(t.mean_fid(), 4), fmt_prec(t.mean_kid(), 5));
            }
            s.push('\n');
        }
        if !self.segmentation.is_empty() {
            s.push_str("## Segmentation\n\n| Regime | Structure | Dice | HD | ASD | Undefined |\n|---|---|---|---|---|---|\n");
            for row in &self.segmentation {
                for st in &row.scores.structures {
                    let _ = writeln!(
                        s,
                        "| {} | {} | {:.4} | {} | {} | {} |",
                        row.regime,
                        st.structure,
                        st.dice,
                        fmt_opt(st.hausdorff),
                        fmt_opt(st.asd),
                        st.undefined
                    );
                }
                let _ = writeln!(s, "| {} | mean | {:.4} | | | |", row.regime, row.scores.mean_dice);
            }
            s.push('\n');
        }
        if !self.classification.is_empty() {
            s.push_str("## Phase classification\n\n| Regime | ACC | Precision | Recall | F1 |\n|---|---|---|---|---|\n");
            for row in &self.classification {
                let c = row.scores;
                let _ = writeln!(s, "| {} | {:.4} | {:.4} | {:.4} | {:.4} |", row.regime, c.accuracy, c.precision, c.recall, c.f1);
            }
            s.push('\n');
        }
        if !self.references.is_empty() {
            s.push_str("## Reference values\n\n| Table | Row | Metric | Value |\n|---|---|---|---|\n");
            for r in &self.references {
                let _ = writeln!(s, "| {} | {} | {} | {:.4} |", r.table, r.row, r.metric, r.value);
            }
            s.push('\n');
        }
        for n in &self.notes {
            let _ = writeln!(s, "- {n}");
        }
        s
    }
}
