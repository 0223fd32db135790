use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::image::{BitDepth, GrayImage, LabelMap, CLASS_NAMES};
use super::record::{PatientKeyed, PatientRecord, Provenance};
use crate::error::{Error, Result};
use crate::prompt::{Phase, Prompt, View, ViewPhase};

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestHeader {
    pub format_version: u32,
    pub dataset: String,
    /// `[height, width]` that records are resampled to on load.
    pub resolution: [usize; 2],
    pub class_table: Vec<String>,
    pub seed: u64,
    pub bit_depth: BitDepth,
    pub content_hash: String,
}

/// Paths are relative to the manifest directory unless absolute.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecordDescriptor {
    pub patient_id: String,
    pub view: View,
    pub phase: Phase,
    pub provenance: Provenance,
    pub image: PathBuf,
    pub label: Option<PathBuf>,
    pub prompt: Option<Prompt>,
}

impl RecordDescriptor {
    pub fn view_phase(&self) -> ViewPhase {
        ViewPhase::new(self.view, self.phase)
    }
}

impl PatientKeyed for RecordDescriptor {
    fn patient_id(&self) -> &str {
        &self.patient_id
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct Counts {
    pub total: usize,
    pub real: usize,
    pub synthetic: usize,
    pub patients: usize,
    pub per_view_phase: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub header: ManifestHeader,
    pub records: Vec<RecordDescriptor>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl DatasetManifest {
    /// Builds a manifest over files that already exist and stamps its hash.
    pub fn new(
        dataset: &str,
        resolution: [usize; 2],
        seed: u64,
        bit_depth: BitDepth,
        records: Vec<RecordDescriptor>,
        base_dir: &Path,
    ) -> Result<Self> {
        let mut m = Self {
            header: ManifestHeader {
                format_version: MANIFEST_VERSION,
                dataset: dataset.to_string(),
                resolution,
                class_table: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
                seed,
                bit_depth,
                content_hash: String::new(),
            },
            records,
            base_dir: base_dir.to_path_buf(),
        };
        m.header.content_hash = m.compute_hash()?;
        Ok(m)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn hash(&self) -> &str {
        &self.header.content_hash
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Always derived from the records.
    pub fn counts(&self) -> Counts {
        let mut c = Counts { total: self.records.len(), ..Default::default() };
        let mut patients = std::collections::BTreeSet::new();
        for r in &self.records {
            match r.provenance {
                Provenance::Real => c.real += 1,
                Provenance::Synthetic => c.synthetic += 1,
            }
            patients.insert(r.patient_id.as_str());
            *c.per_view_phase.entry(r.view_phase().to_string()).or_default() += 1;
        }
        c.patients = patients.len();
        c
    }

    /// SHA-256 over the header (minus the hash itself), every descriptor and
    /// the bytes of every referenced file.
    pub fn compute_hash(&self) -> Result<String> {
        let mut h = Sha256::new();
        let mut header = self.header.clone();
        header.content_hash.clear();
        h.update(serde_json::to_vec(&header)?);
        for r in &self.records {
            h.update(serde_json::to_vec(r)?);
            for p in std::iter::once(&r.image).chain(r.label.iter()) {
                let path = self.resolve(p);
                let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
                h.update((bytes.len() as u64).to_le_bytes());
                h.update(&bytes);
            }
        }
        Ok(hex::encode(h.finalize()))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    /// Reads and verifies a manifest; any content drift is an integrity error.
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: DatasetManifest =
            serde_json::from_str(&text).map_err(|e| Error::Integrity(format!("{}: {e}", path.display())))?;
        if m.header.format_version > MANIFEST_VERSION {
            return Err(Error::Integrity(format!(
                "manifest version {} is newer than supported {MANIFEST_VERSION}",
                m.header.format_version
            )));
        }
        m.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let actual = m.compute_hash().map_err(|e| match e {
            Error::Io { path, .. } => Error::Integrity(format!("referenced file {} unreadable", path.display())),
            other => other,
        })?;
        if actual != m.header.content_hash {
            return Err(Error::Integrity(format!(
                "content hash mismatch for {}: recorded {}, found {actual}",
                path.display(),
                m.header.content_hash
            )));
        }
        Ok(m)
    }

    /// Loads every record, resampled to the header resolution.
    pub fn load_records(&self) -> Result<Vec<PatientRecord>> {
        self.records.iter().map(|d| self.load_record(d)).collect()
    }

    pub fn load_record(&self, d: &RecordDescriptor) -> Result<PatientRecord> {
        let [h, w] = self.header.resolution;
        let (img, _) = GrayImage::load_png(&self.resolve(&d.image))?;
        let label = match &d.label {
            Some(p) => Some(LabelMap::load_png(&self.resolve(p))?.resize_nearest(h, w)),
            None => None,
        };
        let rec = PatientRecord {
            patient_id: d.patient_id.clone(),
            view_phase: d.view_phase(),
            image: img.resize_area(h, w),
            label_map: label,
            provenance: d.provenance,
            source_prompt: d.prompt.clone(),
        };
        rec.validate()?;
        Ok(rec)
    }

    /// Copy with every path made absolute, so records can be merged across
    /// manifests.
    pub fn absolutized(&self) -> Vec<RecordDescriptor> {
        self.records
            .iter()
            .map(|d| RecordDescriptor {
                image: self.resolve(&d.image),
                label: d.label.as_ref().map(|p| self.resolve(p)),
                ..d.clone()
            })
            .collect()
    }

    /// Subset manifest sharing files with `self`.
    pub fn subset(&self, dataset: &str, records: Vec<RecordDescriptor>) -> Result<Self> {
        Self::new(
            dataset,
            self.header.resolution,
            self.header.seed,
            self.header.bit_depth,
            records,
            &self.base_dir,
        )
    }
}

/// Writes images, label maps and `manifest.json` into `out` and returns the
/// manifest. Resolution is taken from the first record (or `fallback`).
pub fn write_records(
    records: &[PatientRecord],
    out: &Path,
    dataset: &str,
    seed: u64,
    bit_depth: BitDepth,
    fallback: [usize; 2],
) -> Result<DatasetManifest> {
    let images = out.join("images");
    let labels = out.join("labels");
    std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    std::fs::create_dir_all(&labels).map_err(|e| Error::io(&labels, e))?;
    let resolution = records
        .first()
        .map(|r| [r.image.height, r.image.width])
        .unwrap_or(fallback);
    let mut descriptors = Vec::with_capacity(records.len());
    for (i, r) in records.iter().enumerate() {
        r.validate()?;
        if [r.image.height, r.image.width] != resolution {
            return Err(Error::shape(&resolution, &[r.image.height, r.image.width]));
        }
        let stem = format!("{i:05}_{}_{}", r.patient_id, r.view_phase);
        let img_rel = PathBuf::from("images").join(format!("{stem}.png"));
        r.image.save_png(&out.join(&img_rel), bit_depth)?;
        let label_rel = match &r.label_map {
            Some(m) => {
                let rel = PathBuf::from("labels").join(format!("{stem}_gt.png"));
                m.save_png(&out.join(&rel))?;
                Some(rel)
            }
            None => None,
        };
        descriptors.push(RecordDescriptor {
            patient_id: r.patient_id.clone(),
            view: r.view_phase.view,
            phase: r.view_phase.phase,
            provenance: r.provenance,
            image: img_rel,
            label: label_rel,
            prompt: r.source_prompt.clone(),
        });
    }
    let m = DatasetManifest::new(dataset, resolution, seed, bit_depth, descriptors, out)?;
    m.write(&out.join(MANIFEST_FILE))?;
    Ok(m)
}

/// Synthetic outputs are stored losslessly at 16 bits.
pub fn write_synthetic(records: &[PatientRecord], out: &Path, seed: u64) -> Result<DatasetManifest> {
    if let Some(r) = records.iter().find(|r| r.provenance != Provenance::Synthetic) {
        return Err(Error::Integrity(format!("{} is not a synthetic record", r.patient_id)));
    }
    write_records(records, out, "synthetic", seed, BitDepth::Sixteen, [0, 0])
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let path = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
    DatasetManifest::read(&path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::phantom::phantom;
    use crate::prompt::render_textual;

    fn synth(n: usize) -> Vec<PatientRecord> {
        (0..n)
            .map(|i| {
                let vp = ViewPhase::all()[i % 4];
                let (image, label) = phantom(i as u64, vp, 8);
                PatientRecord {
                    patient_id: format!("patient{i:04}"),
                    view_phase: vp,
                    image,
                    label_map: if i % 2 == 0 { Some(label) } else { None },
                    provenance: Provenance::Synthetic,
                    source_prompt: Some(render_textual(vp)),
                }
            })
            .collect()
    }

    #[test]
    fn round_trip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let recs = synth(5);
        let m = write_synthetic(&recs, dir.path(), 3).unwrap();
        let back = read_manifest(dir.path()).unwrap();
        assert_eq!(m, back);
        let loaded = back.load_records().unwrap();
        for (a, b) in recs.iter().zip(&loaded) {
            assert_eq!(a.label_map, b.label_map);
            assert_eq!(a.source_prompt, b.source_prompt);
            for (x, y) in a.image.data.iter().zip(&b.image.data) {
                assert!((x - y).abs() <= 0.5 / 65535.0 + 1e-12);
            }
        }
        assert_eq!(back.counts().synthetic, 5);
    }

    #[test]
    fn tampering_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let m = write_synthetic(&synth(2), dir.path(), 0).unwrap();
        let p = m.resolve(&m.records[1].image);
        let mut bytes = std::fs::read(&p).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 1;
        std::fs::write(&p, bytes).unwrap();
        assert!(matches!(read_manifest(dir.path()), Err(Error::Integrity(_))));
    }

    #[test]
    fn empty_manifest_is_valid() {
        let dir = tempfile::tempdir().unwrap();
        let m = write_synthetic(&[], dir.path(), 0).unwrap();
        assert!(read_manifest(dir.path()).unwrap().is_empty());
        assert_eq!(m.counts().total, 0);
    }
}
