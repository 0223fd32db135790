use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::manifest::DatasetManifest;
use super::record::{PatientKeyed, Provenance};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    /// The lowest patient ids (ascending) go to validation.
    pub validation_patient_count: usize,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self { validation_patient_count: 50 }
    }
}

/// Returns `(train, validation)`, each keeping the input order.
pub fn split_patients<T: PatientKeyed + Clone>(items: &[T], spec: SplitSpec) -> Result<(Vec<T>, Vec<T>)> {
    let ids: BTreeSet<&str> = items.iter().map(|r| r.patient_id()).collect();
    if ids.len() <= spec.validation_patient_count {
        return Err(Error::Split(format!(
            "{} patients cannot fill {} validation patients and a non-empty train split",
            ids.len(),
            spec.validation_patient_count
        )));
    }
    let val: BTreeSet<&str> = ids.into_iter().take(spec.validation_patient_count).collect();
    let (v, t): (Vec<T>, Vec<T>) = items.iter().cloned().partition(|r| val.contains(r.patient_id()));
    Ok((t, v))
}

pub fn split_manifest(m: &DatasetManifest, spec: SplitSpec) -> Result<(DatasetManifest, DatasetManifest)> {
    let (train, val) = split_patients(&m.records, spec)?;
    Ok((
        m.subset(&format!("{}-train", m.header.dataset), train)?,
        m.subset(&format!("{}-validation", m.header.dataset), val)?,
    ))
}

/// Number of synthetic records a `percent` mix adds to `real_count`.
pub fn required_synthetic(real_count: usize, percent: u32) -> usize {
    real_count * percent as usize / 100
}

/// All real records followed by a seeded, shuffled selection of synthetic
/// ones. `percent == 0` returns `real` unchanged.
pub fn mix_real_synthetic(
    real: &DatasetManifest,
    synth: &DatasetManifest,
    percent: u32,
    seed: u64,
) -> Result<DatasetManifest> {
    if percent == 0 {
        return Ok(real.clone());
    }
    if real.records.iter().any(|r| r.provenance != Provenance::Real) {
        return Err(Error::config("the real side of a mix contains synthetic records"));
    }
    if real.header.resolution != synth.header.resolution {
        return Err(Error::config(format!(
            "resolution mismatch: real {:?}, synthetic {:?}",
            real.header.resolution, synth.header.resolution
        )));
    }
    let required = required_synthetic(real.len(), percent);
    if required > synth.len() {
        return Err(Error::Mix { required, available: synth.len() });
    }
    let mut order: Vec<usize> = (0..synth.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let pool = synth.absolutized();
    let mut records = real.absolutized();
    records.extend(order[..required].iter().map(|&i| pool[i].clone()));
    DatasetManifest::new(
        &format!("{}+{percent}%", real.header.dataset),
        real.header.resolution,
        seed,
        real.header.bit_depth,
        records,
        &real.base_dir,
    )
}
