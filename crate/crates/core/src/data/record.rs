use serde::{Deserialize, Serialize};

use super::image::{GrayImage, LabelMap};
use crate::error::{Error, Result};
use crate::prompt::{Prompt, ViewPhase};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Real,
    Synthetic,
}

/// One image of one patient in one view and phase.
#[derive(Debug, Clone, PartialEq)]
pub struct PatientRecord {
    pub patient_id: String,
    pub view_phase: ViewPhase,
    pub image: GrayImage,
    /// Present for every real record and for synthetic records generated
    /// from a label map.
    pub label_map: Option<LabelMap>,
    pub provenance: Provenance,
    pub source_prompt: Option<Prompt>,
}

impl PatientRecord {
    pub fn validate(&self) -> Result<()> {
        if let Some(m) = &self.label_map {
            if (m.height, m.width) != (self.image.height, self.image.width) {
                return Err(Error::Integrity(format!(
                    "{} {}: label map {}x{} does not match image {}x{}",
                    self.patient_id, self.view_phase, m.height, m.width, self.image.height, self.image.width
                )));
            }
        }
        match self.provenance {
            Provenance::Real if self.label_map.is_none() => Err(Error::Integrity(format!(
                "{} {}: real record without label map",
                self.patient_id, self.view_phase
            ))),
            Provenance::Synthetic if self.source_prompt.is_none() => Err(Error::Integrity(format!(
                "{} {}: synthetic record without source prompt",
                self.patient_id, self.view_phase
            ))),
            _ => Ok(()),
        }
    }
}

/// Anything keyed by a patient id; lets splitting work on records and
/// descriptors alike.
pub trait PatientKeyed {
    fn patient_id(&self) -> &str;
}

impl PatientKeyed for PatientRecord {
    fn patient_id(&self) -> &str {
        &self.patient_id
    }
}
