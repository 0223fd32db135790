//! Deterministic apical-view phantoms: a fan-shaped sector with a left
//! ventricle, its myocardium, the left atrium and (in 4CH) the right-side
//! chambers. Used as fixtures wherever real scans are unavailable.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::image::{BitDepth, GrayImage, LabelMap};
use crate::error::{Error, Result};
use crate::prompt::{Phase, View, ViewPhase};

struct Ellipse {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        let dx = (x - self.cx) / self.rx;
        let dy = (y - self.cy) / self.ry;
        dx * dx + dy * dy <= 1.0
    }

    fn grown(&self, d: f64) -> Ellipse {
        Ellipse { cx: self.cx, cy: self.cy, rx: self.rx + d, ry: self.ry + d }
    }
}

/// Per-patient anatomy jitter, shared by all four views/phases of a patient.
fn anatomy(patient: u64) -> [f64; 4] {
    let mut rng = ChaCha8Rng::seed_from_u64(patient.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    [
        rng.random_range(-0.03..0.03),
        rng.random_range(0.9..1.1),
        rng.random_range(0.9..1.1),
        rng.random_range(0.03..0.05),
    ]
}

/// Renders one image/label pair. Same arguments give the same pixels.
pub fn phantom(patient: u64, vp: ViewPhase, size: usize) -> (GrayImage, LabelMap) {
    let [shift, sx, sy, wall] = anatomy(patient);
    let lv_scale = match vp.phase {
        Phase::EndDiastole => 1.0,
        Phase::EndSystole => 0.78,
    };
    let la_scale = match vp.phase {
        Phase::EndDiastole => 0.85,
        Phase::EndSystole => 1.1,
    };
    let lv_x = match vp.view {
        View::TwoChamber => 0.5,
        View::FourChamber => 0.6,
    } + shift;
    let lv = Ellipse { cx: lv_x, cy: 0.4, rx: 0.11 * sx * lv_scale, ry: 0.22 * sy * lv_scale };
    let epi = lv.grown(wall);
    let la = Ellipse { cx: lv_x, cy: 0.78, rx: 0.1 * sx * la_scale, ry: 0.08 * sy * la_scale };
    let right = match vp.view {
        View::TwoChamber => vec![],
        View::FourChamber => vec![
            Ellipse { cx: lv_x - 0.26, cy: 0.42, rx: 0.08 * lv_scale, ry: 0.18 * lv_scale },
            Ellipse { cx: lv_x - 0.24, cy: 0.78, rx: 0.08 * la_scale, ry: 0.07 * la_scale },
        ],
    };

    let seed = patient
        .wrapping_mul(31)
        .wrapping_add(vp.view as u64 * 7 + vp.phase as u64 * 3 + size as u64 * 1013);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pixels = Vec::with_capacity(size * size);
    let mut labels = Vec::with_capacity(size * size);
    for i in 0..size {
        for j in 0..size {
            let x = (j as f64 + 0.5) / size as f64;
            let y = (i as f64 + 0.5) / size as f64;
            let label = if lv.contains(x, y) {
                1
            } else if epi.contains(x, y) {
                2
            } else if la.contains(x, y) && !epi.grown(0.01).contains(x, y) {
                3
            } else {
                0
            };
            let dx = x - 0.5;
            let dy = y + 0.02;
            let in_sector = dy > 0.0 && dx.abs() < dy * 0.9 && (dx * dx + dy * dy).sqrt() < 1.0;
            let base = if !in_sector {
                0.0
            } else {
                match label {
                    1 | 3 => 0.08,
                    2 => 0.75,
                    _ if right.iter().any(|e| e.contains(x, y)) => 0.1,
                    _ if right.iter().any(|e| e.grown(wall).contains(x, y)) => 0.6,
                    _ => 0.35,
                }
            };
            let speckle: f64 = rng.sample(StandardNormal);
            let v = if in_sector { base * (1.0 + 0.25 * speckle) + 0.02 * speckle } else { 0.0 };
            pixels.push(v.clamp(0.0, 1.0));
            labels.push(if in_sector { label } else { 0 });
        }
    }
    (
        GrayImage { height: size, width: size, data: pixels },
        LabelMap { height: size, width: size, data: labels },
    )
}

/// Canonical patient folder name, e.g. `patient0007`.
pub fn patient_id(index: usize) -> String {
    format!("patient{index:04}")
}

/// Writes a scan tree of `patients` phantom patients (ids `1..=patients`)
/// in the directory layout that [`super::ingest`] reads. `skip` lists
/// `(patient index, view-phase)` pairs whose label file is left out.
pub fn write_fixture_tree(
    root: &Path,
    patients: usize,
    size: usize,
    skip: &[(usize, ViewPhase)],
) -> Result<()> {
    if size == 0 {
        return Err(Error::param("size", "must be positive"));
    }
    for p in 1..=patients {
        let id = patient_id(p);
        let dir = root.join(&id);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for vp in ViewPhase::all() {
            let (img, lab) = phantom(p as u64, vp, size);
            let stem = format!("{id}_{}_{}", vp.view.code(), vp.phase.code());
            img.save_png(&dir.join(format!("{stem}.png")), BitDepth::Eight)?;
            if !skip.contains(&(p, vp)) {
                lab.save_png(&dir.join(format!("{stem}_gt.png")))?;
            }
        }
    }
    Ok(())
}
