//! Overlap and surface-distance metrics on binary masks.

use serde::{Deserialize, Serialize};

use crate::data::{LabelMap, CLASS_NAMES, NUM_CLASSES};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape(&[height, width], &[data.len()]));
        }
        Ok(Self { height, width, data })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![false; height * width] }
    }

    pub fn from_labels(map: &LabelMap, class: u8) -> Self {
        Self { height: map.height, width: map.width, data: map.data.iter().map(|&c| c == class).collect() }
    }

    pub fn set(&mut self, r: usize, c: usize) {
        self.data[r * self.width + c] = true;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    /// Foreground pixels with a 4-neighbour outside the mask. Pixels on the
    /// image border count as boundary.
    pub fn boundary(&self) -> Mask {
        let (h, w) = (self.height, self.width);
        let at = |r: isize, c: isize| {
            r >= 0 && c >= 0 && (r as usize) < h && (c as usize) < w && self.data[r as usize * w + c as usize]
        };
        let mut out = Mask::empty(h, w);
        for r in 0..h {
            for c in 0..w {
                if !self.data[r * w + c] {
                    continue;
                }
                let (ri, ci) = (r as isize, c as isize);
                if !(at(ri - 1, ci) && at(ri + 1, ci) && at(ri, ci - 1) && at(ri, ci + 1)) {
                    out.set(r, c);
                }
            }
        }
        out
    }

    fn check_same(&self, other: &Mask) -> Result<()> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(Error::shape(&[self.height, self.width], &[other.height, other.width]));
        }
        Ok(())
    }
}

/// `2|A∩B| / (|A|+|B|)`; two empty masks score 1.
pub fn dice(pred: &Mask, truth: &Mask) -> Result<f64> {
    pred.check_same(truth)?;
    let inter = pred.data.iter().zip(&truth.data).filter(|(a, b)| **a && **b).count();
    let total = pred.count() + truth.count();
    Ok(if total == 0 { 1.0 } else { 2.0 * inter as f64 / total as f64 })
}

/// 1-D squared distance transform of a sampled function (lower envelope
/// of parabolas).
fn edt_1d(f: &[f64], out: &mut [f64]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0usize;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    let mut started = false;
    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        if !started {
            v[0] = q;
            started = true;
            continue;
        }
        let cross = |p: usize| ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
        let mut s = cross(v[k]);
        while s <= z[k] {
            k -= 1;
            s = cross(v[k]);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    if !started {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let mut k = 0usize;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Exact Euclidean distance from every pixel to the nearest set pixel of
/// `sites`; infinite when `sites` is empty.
pub fn distance_transform(sites: &Mask) -> Vec<f64> {
    let (h, w) = (sites.height, sites.width);
    let mut grid: Vec<f64> = sites.data.iter().map(|&b| if b { 0.0 } else { f64::INFINITY }).collect();
    let mut col = vec![0.0; h];
    let mut out = vec![0.0; h.max(w)];
    for c in 0..w {
        for r in 0..h {
            col[r] = grid[r * w + c];
        }
        edt_1d(&col, &mut out[..h]);
        for r in 0..h {
            grid[r * w + c] = out[r];
        }
    }
    for r in 0..h {
        let row = grid[r * w..(r + 1) * w].to_vec();
        edt_1d(&row, &mut out[..w]);
        grid[r * w..(r + 1) * w].copy_from_slice(&out[..w]);
    }
    grid.iter().map(|v| v.sqrt()).collect()
}

/// Distances from each boundary pixel of `a` to the boundary of `b`.
fn directed(a_edge: &Mask, b_edge: &Mask) -> Vec<f64> {
    let dt = distance_transform(b_edge);
    a_edge.data.iter().zip(dt).filter(|(on, _)| **on).map(|(_, d)| d).collect()
}

fn both_directions(pred: &Mask, truth: &Mask) -> Result<Option<(Vec<f64>, Vec<f64>)>> {
    pred.check_same(truth)?;
    if pred.is_empty() || truth.is_empty() {
        return Ok(None);
    }
    let (pe, te) = (pred.boundary(), truth.boundary());
    Ok(Some((directed(&pe, &te), directed(&te, &pe))))
}

/// Symmetric Hausdorff distance between mask boundaries, in pixels.
/// `None` when either mask is empty.
pub fn hausdorff(pred: &Mask, truth: &Mask) -> Result<Option<f64>> {
    Ok(both_directions(pred, truth)?.map(|(a, b)| a.iter().chain(&b).fold(0.0f64, |m, &v| m.max(v))))
}

/// Average symmetric surface distance in pixels: the mean over the pooled
/// boundary-to-boundary distances of both directions.
pub fn average_surface_distance(pred: &Mask, truth: &Mask) -> Result<Option<f64>> {
    Ok(both_directions(pred, truth)?.map(|(a, b)| (a.iter().sum::<f64>() + b.iter().sum::<f64>()) / (a.len() + b.len()) as f64))
}

/// Per-structure means over a set of images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructureScores {
    pub structure: String,
    pub dice: f64,
    /// Means over images where both masks are non-empty.
    pub hausdorff: Option<f64>,
    pub asd: Option<f64>,
    /// Images excluded from the distance means.
    pub undefined: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentationScores {
    pub structures: Vec<StructureScores>,
    pub mean_dice: f64,
    pub images: usize,
}

/// Scores foreground classes of predicted against reference label maps.
pub fn score_segmentations(preds: &[LabelMap], truths: &[LabelMap]) -> Result<SegmentationScores> {
    if preds.len() != truths.len() || preds.is_empty() {
        return Err(Error::param("preds", format!("{} predictions for {} references", preds.len(), truths.len())));
    }
    let mut structures = Vec::new();
    for class in 1..NUM_CLASSES as u8 {
        let mut dices = Vec::new();
        let mut hds = Vec::new();
        let mut asds = Vec::new();
        let mut undefined = 0;
        for (p, t) in preds.iter().zip(truths) {
            let (pm, tm) = (Mask::from_labels(p, class), Mask::from_labels(t, class));
            dices.push(dice(&pm, &tm)?);
            match both_directions(&pm, &tm)? {
                Some((a, b)) => {
                    hds.push(a.iter().chain(&b).fold(0.0f64, |m, &v| m.max(v)));
                    asds.push((a.iter().sum::<f64>() + b.iter().sum::<f64>()) / (a.len() + b.len()) as f64);
                }
                None => undefined += 1,
            }
        }
        let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
        structures.push(StructureScores {
            structure: CLASS_NAMES[class as usize].to_string(),
            dice: mean(&dices).unwrap_or(0.0),
            hausdorff: mean(&hds),
            asd: mean(&asds),
            undefined,
        });
    }
    let mean_dice = structures.iter().map(|s| s.dice).sum::<f64>() / structures.len() as f64;
    Ok(SegmentationScores { structures, mean_dice, images: preds.len() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mask(h: usize, w: usize, on: &[(usize, usize)]) -> Mask {
        let mut m = Mask::empty(h, w);
        for &(r, c) in on {
            m.set(r, c);
        }
        m
    }

    fn brute_directed(a: &Mask, b: &Mask) -> Vec<f64> {
        let pts = |m: &Mask| -> Vec<(f64, f64)> {
            (0..m.data.len()).filter(|&i| m.data[i]).map(|i| ((i / m.width) as f64, (i % m.width) as f64)).collect()
        };
        let bp = pts(b);
        pts(a)
            .iter()
            .map(|&(r, c)| bp.iter().map(|&(s, t)| ((r - s).powi(2) + (c - t).powi(2)).sqrt()).fold(f64::INFINITY, f64::min))
            .collect()
    }

    #[test]
    fn dice_cases() {
        let e = Mask::empty(3, 3);
        assert_eq!(dice(&e, &e).unwrap(), 1.0);
        let a = mask(3, 3, &[(0, 0), (0, 1)]);
        let b = mask(3, 3, &[(0, 1), (1, 1)]);
        assert_eq!(dice(&a, &b).unwrap(), 0.5);
        assert_eq!(dice(&a, &a).unwrap(), 1.0);
        assert_eq!(dice(&a, &e).unwrap(), 0.0);
        assert!(dice(&a, &Mask::empty(2, 2)).is_err());
    }

    #[test]
    fn single_pixels_are_five_apart() {
        let a = mask(5, 5, &[(0, 0)]);
        let b = mask(5, 5, &[(3, 4)]);
        assert_eq!(hausdorff(&a, &b).unwrap(), Some(5.0));
        assert_eq!(average_surface_distance(&a, &b).unwrap(), Some(5.0));
        assert_eq!(hausdorff(&a, &Mask::empty(5, 5)).unwrap(), None);
    }

    #[test]
    fn boundary_excludes_interior() {
        let mut m = Mask::empty(5, 5);
        for r in 1..4 {
            for c in 1..4 {
                m.set(r, c);
            }
        }
        let b = m.boundary();
        assert_eq!(b.count(), 8);
        assert!(!b.data[2 * 5 + 2]);
    }

    #[test]
    fn label_map_scoring_flags_undefined() {
        let t = LabelMap::new(4, 4, vec![0, 1, 1, 0, 0, 1, 1, 0, 0, 2, 2, 0, 0, 0, 0, 0]).unwrap();
        let s = score_segmentations(&[t.clone()], &[t]).unwrap();
        assert_eq!(s.structures[0].dice, 1.0);
        assert_eq!(s.structures[0].hausdorff, Some(0.0));
        assert_eq!(s.structures[2].dice, 1.0);
        assert_eq!(s.structures[2].undefined, 1);
        assert_eq!(s.structures[2].hausdorff, None);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn transform_matches_brute_force(bits in proptest::collection::vec(proptest::bool::weighted(0.2), 7 * 9),
                                         bits2 in proptest::collection::vec(proptest::bool::weighted(0.3), 7 * 9)) {
            let a = Mask::new(7, 9, bits).unwrap();
            let b = Mask::new(7, 9, bits2).unwrap();
            prop_assume!(!a.is_empty() && !b.is_empty());
            let (ae, be) = (a.boundary(), b.boundary());
            let fast = directed(&ae, &be);
            let slow = brute_directed(&ae, &be);
            for (x, y) in fast.iter().zip(&slow) {
                prop_assert!((x - y).abs() < 1e-9);
            }
            let hd = hausdorff(&a, &b).unwrap().unwrap();
            prop_assert!((hd - hausdorff(&b, &a).unwrap().unwrap()).abs() < 1e-12);
            let asd = average_surface_distance(&a, &b).unwrap().unwrap();
            prop_assert!(asd <= hd + 1e-12);
            let d = dice(&a, &b).unwrap();
            prop_assert!((0.0..=1.0).contains(&d));
            prop_assert!((d - dice(&b, &a).unwrap()).abs() < 1e-15);
        }
    }
}
