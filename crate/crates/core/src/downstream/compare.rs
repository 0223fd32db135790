//! Side-by-side comparison of downstream results across data regimes.

use std::fmt::Write as _;
use std::path::Path;

use plotters::prelude::*;
use serde::{Deserialize, Serialize};

use super::segmentation::EpochLog;
use crate::error::{Error, Result};
use crate::metrics::{ClassificationScores, SegmentationScores};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricValue {
    pub name: String,
    pub value: Option<f64>,
    pub higher_is_better: bool,
}

/// One trained model's results, keyed by regime, backbone and seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeResult {
    pub regime: String,
    pub backbone: Option<String>,
    pub seed: u64,
    pub validation_hash: String,
    pub metrics: Vec<MetricValue>,
    pub history: Vec<EpochLog>,
}

fn mean_defined(v: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let xs: Vec<f64> = v.flatten().collect();
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

/// Dice, HD and ASD columns, each as mean then one per structure.
pub fn segmentation_columns(s: &SegmentationScores) -> Vec<MetricValue> {
    let mut out = Vec::new();
    let mut group = |metric: &str, higher: bool, mean: Option<f64>, per: Vec<(String, Option<f64>)>| {
        out.push(MetricValue { name: format!("{metric} mean"), value: mean, higher_is_better: higher });
        for (name, v) in per {
            out.push(MetricValue { name: format!("{metric} {name}"), value: v, higher_is_better: higher });
        }
    };
    group("Dice", true, Some(s.mean_dice), s.structures.iter().map(|x| (x.structure.clone(), Some(x.dice))).collect());
    group(
        "HD",
        false,
        mean_defined(s.structures.iter().map(|x| x.hausdorff)),
        s.structures.iter().map(|x| (x.structure.clone(), x.hausdorff)).collect(),
    );
    group(
        "ASD",
        false,
        mean_defined(s.structures.iter().map(|x| x.asd)),
        s.structures.iter().map(|x| (x.structure.clone(), x.asd)).collect(),
    );
    out
}

pub fn classification_columns(c: &ClassificationScores) -> Vec<MetricValue> {
    [("ACC", c.accuracy), ("PR", c.precision), ("RC", c.recall), ("F1", c.f1)]
        .into_iter()
        .map(|(n, v)| MetricValue { name: n.into(), value: Some(v), higher_is_better: true })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rank {
    Best,
    Second,
    Other,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub regime: String,
    pub backbone: Option<String>,
    pub seed: u64,
    pub values: Vec<Option<f64>>,
    pub ranks: Vec<Rank>,
    /// Difference to the first row, column by column.
    pub deltas: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub validation_hash: String,
    pub columns: Vec<String>,
    pub rows: Vec<ComparisonRow>,
}

/// Ranks every column across regimes; equal values share a rank.
pub fn compare_regimes(results: &[RegimeResult]) -> Result<Comparison> {
    if results.len() < 2 {
        return Err(Error::Comparison(format!("need at least two regimes, got {}", results.len())));
    }
    let hash = &results[0].validation_hash;
    if let Some(r) = results.iter().find(|r| &r.validation_hash != hash) {
        return Err(Error::Comparison(format!(
            "regime {} was validated on {} but {} on {}",
            r.regime, r.validation_hash, results[0].regime, hash
        )));
    }
    let columns: Vec<String> = results[0].metrics.iter().map(|m| m.name.clone()).collect();
    for r in results {
        let names: Vec<&str> = r.metrics.iter().map(|m| m.name.as_str()).collect();
        if names != columns.iter().map(String::as_str).collect::<Vec<_>>() {
            return Err(Error::Comparison(format!("regime {} reports different metrics", r.regime)));
        }
    }
    let mut ranks = vec![vec![Rank::Other; columns.len()]; results.len()];
    for c in 0..columns.len() {
        let higher = results[0].metrics[c].higher_is_better;
        let mut distinct: Vec<f64> = results.iter().filter_map(|r| r.metrics[c].value).collect();
        distinct.sort_by(|a, b| if higher { b.total_cmp(a) } else { a.total_cmp(b) });
        distinct.dedup();
        for (i, r) in results.iter().enumerate() {
            if let Some(v) = r.metrics[c].value {
                if distinct.first() == Some(&v) {
                    ranks[i][c] = Rank::Best;
                } else if distinct.get(1) == Some(&v) {
                    ranks[i][c] = Rank::Second;
                }
            }
        }
    }
    let base: Vec<Option<f64>> = results[0].metrics.iter().map(|m| m.value).collect();
    let rows = results
        .iter()
        .zip(ranks)
        .map(|(r, ranks)| {
            let values: Vec<Option<f64>> = r.metrics.iter().map(|m| m.value).collect();
            let deltas = values.iter().zip(&base).map(|(v, b)| Some((*v)? - (*b)?)).collect();
            ComparisonRow { regime: r.regime.clone(), backbone: r.backbone.clone(), seed: r.seed, values, ranks, deltas }
        })
        .collect();
    Ok(Comparison { validation_hash: hash.clone(), columns, rows })
}

impl Comparison {
    /// Best values in bold, second best in italics.
    pub fn to_markdown(&self) -> String {
        let mut s = String::from("| Regime |");
        for c in &self.columns {
            let _ = write!(s, " {c} |");
        }
        s.push_str("\n|---|");
        s.push_str(&"---|".repeat(self.columns.len()));
        s.push('\n');
        for row in &self.rows {
            let label = match &row.backbone {
                Some(b) => format!("{} ({b})", row.regime),
                None => row.regime.clone(),
            };
            let _ = write!(s, "| {label} |");
            for (v, r) in row.values.iter().zip(&row.ranks) {
                let cell = v.map_or("n/a".to_string(), |x| format!("{x:.4}"));
                let _ = match r {
                    Rank::Best => write!(s, " **{cell}** |"),
                    Rank::Second => write!(s, " _{cell}_ |"),
                    Rank::Other => write!(s, " {cell} |"),
                };
            }
            s.push('\n');
        }
        s
    }
}

/// Validation metric against epoch, one line per regime, as SVG.
pub fn plot_convergence(results: &[RegimeResult], title: &str, path: &Path) -> Result<()> {
    let plot_err = |e: String| Error::Image { path: path.to_path_buf(), message: e };
    let points: Vec<Vec<(f64, f64)>> = results
        .iter()
        .map(|r| r.history.iter().filter(|e| e.val_metric.is_finite()).map(|e| (e.epoch as f64, e.val_metric)).collect())
        .collect();
    let max_x = points.iter().flatten().map(|p| p.0).fold(1.0, f64::max);
    let (lo, hi) = points.iter().flatten().map(|p| p.1).fold((f64::MAX, f64::MIN), |(l, h), v| (l.min(v), h.max(v)));
    let (lo, hi) = if lo > hi { (0.0, 1.0) } else { (lo.min(hi - 1e-3), hi) };
    let root = SVGBackend::new(path, (640, 400)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(e.to_string()))?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 18))
        .margin(10)
        .x_label_area_size(30)
        .y_label_area_size(50)
        .build_cartesian_2d(0.0..max_x, lo..hi)
        .map_err(|e| plot_err(e.to_string()))?;
    chart.configure_mesh().x_desc("epoch").y_desc("validation").draw().map_err(|e| plot_err(e.to_string()))?;
    for (i, (r, pts)) in results.iter().zip(points).enumerate() {
        let color = Palette99::pick(i).to_rgba();
        chart
            .draw_series(LineSeries::new(pts, color))
            .map_err(|e| plot_err(e.to_string()))?
            .label(r.regime.clone())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(|e| plot_err(e.to_string()))?;
    root.present().map_err(|e| plot_err(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn result(regime: &str, hash: &str, dice: f64, hd: f64) -> RegimeResult {
        RegimeResult {
            regime: regime.into(),
            backbone: None,
            seed: 0,
            validation_hash: hash.into(),
            metrics: vec![
                MetricValue { name: "Dice mean".into(), value: Some(dice), higher_is_better: true },
                MetricValue { name: "HD mean".into(), value: Some(hd), higher_is_better: false },
            ],
            history: (0..3).map(|e| EpochLog { epoch: e, train_loss: 1.0, val_metric: dice * (e + 1) as f64 / 3.0 }).collect(),
        }
    }

    #[test]
    fn hand_marked_flags() {
        let rows = [
            result("Real", "h", 0.8700, 12.0),
            result("Real+50%", "h", 0.8721, 11.93),
            result("Real+100%", "h", 0.8759, 12.65),
            result("Real+200%", "h", 0.8685, 11.57),
        ];
        let c = compare_regimes(&rows).unwrap();
        let dice: Vec<Rank> = c.rows.iter().map(|r| r.ranks[0]).collect();
        assert_eq!(dice, [Rank::Other, Rank::Second, Rank::Best, Rank::Other]);
        let hd: Vec<Rank> = c.rows.iter().map(|r| r.ranks[1]).collect();
        assert_eq!(hd, [Rank::Other, Rank::Second, Rank::Other, Rank::Best]);
        assert!((c.rows[2].deltas[0].unwrap() - 0.0059).abs() < 1e-12);
        let md = c.to_markdown();
        assert!(md.contains("**0.8759**"));
        assert!(md.contains("_0.8721_"));
    }

    #[test]
    fn identical_results_have_zero_deltas() {
        let r = result("a", "h", 0.5, 3.0);
        let c = compare_regimes(&[r.clone(), RegimeResult { regime: "b".into(), ..r }]).unwrap();
        assert!(c.rows.iter().flat_map(|r| &r.deltas).all(|d| *d == Some(0.0)));
        assert!(c.rows.iter().all(|r| r.ranks == [Rank::Best, Rank::Best]));
    }

    #[test]
    fn refusals() {
        let a = result("a", "h1", 0.5, 3.0);
        assert!(matches!(compare_regimes(std::slice::from_ref(&a)), Err(Error::Comparison(_))));
        assert!(matches!(compare_regimes(&[a.clone(), result("b", "h2", 0.5, 3.0)]), Err(Error::Comparison(_))));
    }

    #[test]
    fn convergence_plot_is_svg() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("curves.svg");
        plot_convergence(&[result("a", "h", 0.5, 3.0), result("b", "h", 0.7, 2.0)], "dice", &p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("<svg"));
        assert!(text.contains("polyline"));
    }
}
