use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::data::{mix_real_synthetic, read_manifest, DatasetManifest, PatientRecord, Provenance};
use crate::downstream::{
    backbone_by_name, classification_columns, compare_regimes, linear_probe, plot_convergence, segmentation_columns,
    train_segmentation, Comparison, ProbeConfig, RegimeResult, SegConfig,
};
use crate::error::{Error, Result};
use crate::metrics::{
    AssetRegistry, ClassificationRow, MetricReport, ReferenceValue, SegmentationRow, DISTANCE_UNIT_NOTE,
};

use super::evaluate::{REPORT_JSON, REPORT_MD};
use super::run::{RunDir, RunRecord};

pub const REGIME_DIR: &str = "regimes";
pub const COMPARISON_MD: &str = "comparison.md";
pub const CONVERGENCE_SVG: &str = "convergence.svg";

/// Full-scale reference mean Dice per regime.
pub const SEGMENTATION_REFERENCE: [(&str, f64); 2] = [("Real", 0.8700), ("Real+100%", 0.8759)];
/// Full-scale reference phase accuracy of a linear probe on a ResNet18
/// backbone, per training source.
pub const CLASSIFICATION_REFERENCE: [(&str, f64); 3] = [("Real", 0.84), ("Text", 0.87), ("Text+Seg", 0.865)];

#[derive(Debug, Clone, Serialize)]
pub struct RegimeArgs {
    /// Real training manifest.
    pub train: PathBuf,
    /// Real validation manifest; never mixed.
    pub validation: PathBuf,
    pub synthetic: Option<PathBuf>,
    /// One regime per percentage; 0 is real only.
    pub mix_percents: Vec<u32>,
    pub out: PathBuf,
}

#[derive(Debug, Clone, Serialize)]
pub struct SegArgs {
    pub regimes: RegimeArgs,
    pub config: SegConfig,
}

#[derive(Debug, Clone, Serialize)]
pub struct ClsArgs {
    pub regimes: RegimeArgs,
    pub config: ProbeConfig,
    pub assets: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct DownstreamSummary {
    pub results: Vec<RegimeResult>,
    /// Present when at least two regimes ran.
    pub comparison: Option<Comparison>,
    pub report: MetricReport,
}

pub fn regime_name(percent: u32) -> String {
    if percent == 0 {
        "Real".into()
    } else {
        format!("Real+{percent}%")
    }
}

fn slug(name: &str) -> String {
    name.chars().map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '-' }).collect::<String>()
}

/// Refuses validation patients that also appear among real training
/// patients.
pub fn check_patient_overlap(train: &DatasetManifest, val: &DatasetManifest) -> Result<()> {
    let t: BTreeSet<&str> =
        train.records.iter().filter(|r| r.provenance == Provenance::Real).map(|r| r.patient_id.as_str()).collect();
    let shared: Vec<&str> = val.records.iter().map(|r| r.patient_id.as_str()).filter(|p| t.contains(p)).collect();
    match shared.first() {
        Some(p) => Err(Error::Integrity(format!(
            "patient {p} is in both training and validation ({} shared records)",
            shared.len()
        ))),
        None => Ok(()),
    }
}

struct Prepared {
    train: DatasetManifest,
    val: DatasetManifest,
    val_records: Vec<PatientRecord>,
    synth: Option<DatasetManifest>,
    run: RunDir,
}

fn prepare(args: &RegimeArgs) -> Result<Prepared> {
    if args.mix_percents.is_empty() {
        return Err(Error::config("no regimes requested"));
    }
    let train = read_manifest(&args.train)?;
    let val = read_manifest(&args.validation)?;
    check_patient_overlap(&train, &val)?;
    let synth = args.synthetic.as_deref().map(read_manifest).transpose()?;
    if synth.is_none() && args.mix_percents.iter().any(|&p| p > 0) {
        return Err(Error::config("mixed regimes need a synthetic manifest"));
    }
    let val_records = val.load_records()?;
    let run = RunDir::open(&args.out)?;
    std::fs::create_dir_all(run.join(REGIME_DIR)).map_err(|e| Error::io(&run.join(REGIME_DIR), e))?;
    Ok(Prepared { train, val, val_records, synth, run })
}

impl Prepared {
    fn mix(&self, percent: u32, seed: u64) -> Result<Vec<PatientRecord>> {
        let m = match &self.synth {
            Some(s) => mix_real_synthetic(&self.train, s, percent, seed)?,
            None => self.train.clone(),
        };
        m.load_records()
    }

    fn write_result(&self, r: &RegimeResult) -> Result<PathBuf> {
        let p = self.run.join(REGIME_DIR).join(format!("{}.json", slug(&r.regime)));
        std::fs::write(&p, serde_json::to_string_pretty(r)?).map_err(|e| Error::io(&p, e))?;
        Ok(p)
    }

    fn finish(
        self,
        verb: &str,
        seed: u64,
        args: &impl Serialize,
        results: Vec<RegimeResult>,
        report: MetricReport,
        title: &str,
    ) -> Result<DownstreamSummary> {
        let comparison = if results.len() >= 2 {
            let c = compare_regimes(&results)?;
            let p = self.run.join(COMPARISON_MD);
            std::fs::write(&p, c.to_markdown()).map_err(|e| Error::io(&p, e))?;
            plot_convergence(&results, title, &self.run.join(CONVERGENCE_SVG))?;
            Some(c)
        } else {
            None
        };
        report.write_json(&self.run.join(REPORT_JSON))?;
        let md = self.run.join(REPORT_MD);
        std::fs::write(&md, report.to_markdown()).map_err(|e| Error::io(&md, e))?;
        let mut rec = RunRecord::new(verb, seed, args)?
            .input("train", self.train.hash())
            .input("validation", self.val.hash())
            .output("report", REPORT_JSON)
            .output("regimes", REGIME_DIR);
        if let Some(s) = &self.synth {
            rec = rec.input("synthetic", s.hash());
        }
        if comparison.is_some() {
            rec = rec.output("comparison", COMPARISON_MD).output("convergence", CONVERGENCE_SVG);
        }
        self.run.record(&rec)?;
        Ok(DownstreamSummary { results, comparison, report })
    }
}

pub fn cmd_downstream_seg(args: &SegArgs) -> Result<DownstreamSummary> {
    let prep = prepare(&args.regimes)?;
    let mut results = Vec::new();
    let mut report = MetricReport { notes: vec![DISTANCE_UNIT_NOTE.into()], ..Default::default() };
    for &p in &args.regimes.mix_percents {
        let cfg = SegConfig { mix_percent: p, ..args.config.clone() };
        cfg.validate()?;
        let name = regime_name(p);
        log::info!("segmentation regime {name}");
        let train = prep.mix(p, cfg.seed)?;
        let run = train_segmentation(&cfg, &train, &prep.val_records)?;
        run.net.save(&prep.run.join(REGIME_DIR).join(format!("{}.seg.bin", slug(&name))))?;
        let r = RegimeResult {
            regime: name.clone(),
            backbone: None,
            seed: cfg.seed,
            validation_hash: prep.val.hash().to_string(),
            metrics: segmentation_columns(&run.scores),
            history: run.history,
        };
        prep.write_result(&r)?;
        report.segmentation.push(SegmentationRow { regime: name, scores: run.scores });
        results.push(r);
    }
    report.references = SEGMENTATION_REFERENCE
        .iter()
        .map(|(row, v)| ReferenceValue {
            table: "segmentation (full-scale reference)".into(),
            row: (*row).into(),
            metric: "mean Dice".into(),
            value: *v,
        })
        .collect();
    let seed = args.config.seed;
    prep.finish("downstream-seg", seed, args, results, report, "validation mean Dice")
}

pub fn cmd_downstream_cls(args: &ClsArgs) -> Result<DownstreamSummary> {
    let assets = match &args.assets {
        Some(p) => AssetRegistry::load(p)?,
        None => AssetRegistry::default(),
    };
    let backbone = backbone_by_name(&args.config.backbone, &assets, args.config.image_size)?;
    let prep = prepare(&args.regimes)?;
    let mut results = Vec::new();
    let mut report = MetricReport::default();
    for &p in &args.regimes.mix_percents {
        let cfg = ProbeConfig { mix_percent: p, ..args.config.clone() };
        let name = regime_name(p);
        log::info!("classification regime {name}");
        let train = prep.mix(p, cfg.seed)?;
        let run = linear_probe(&cfg, backbone.as_ref(), &train, &prep.val_records)?;
        let r = RegimeResult {
            regime: name.clone(),
            backbone: Some(run.backbone.clone()),
            seed: cfg.seed,
            validation_hash: prep.val.hash().to_string(),
            metrics: classification_columns(&run.scores),
            history: run.history,
        };
        prep.write_result(&r)?;
        report.classification.push(ClassificationRow { regime: name, scores: run.scores });
        results.push(r);
    }
    report.references = CLASSIFICATION_REFERENCE
        .iter()
        .map(|(row, v)| ReferenceValue {
            table: "phase classification (full-scale reference, ResNet18 probe)".into(),
            row: (*row).into(),
            metric: "ACC".into(),
            value: *v,
        })
        .collect();
    let seed = args.config.seed;
    prep.finish("downstream-cls", seed, args, results, report, "validation accuracy")
}

/// Loads every `regimes/*.json` under a downstream output directory, sorted
/// by file name.
pub fn read_regime_results(dir: &Path) -> Result<Vec<RegimeResult>> {
    let d = dir.join(REGIME_DIR);
    let mut paths: Vec<PathBuf> = std::fs::read_dir(&d)
        .map_err(|e| Error::io(&d, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            Ok(serde_json::from_str(&text)?)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::phantom::phantom;
    use crate::data::{write_records, BitDepth};
    use crate::prompt::ViewPhase;

    fn manifest(dir: &Path, patients: std::ops::Range<u64>) -> DatasetManifest {
        let recs: Vec<PatientRecord> = patients
            .flat_map(|p| {
                ViewPhase::all().into_iter().map(move |vp| {
                    let (image, label) = phantom(p, vp, 16);
                    PatientRecord {
                        patient_id: format!("p{p:03}"),
                        view_phase: vp,
                        image,
                        label_map: Some(label),
                        provenance: Provenance::Real,
                        source_prompt: None,
                    }
                })
            })
            .collect();
        write_records(&recs, dir, "t", 0, BitDepth::Eight, [16, 16]).unwrap()
    }

    #[test]
    fn regime_names() {
        assert_eq!(regime_name(0), "Real");
        assert_eq!(regime_name(100), "Real+100%");
        assert_eq!(slug("Real+100%"), "real-100-");
    }

    #[test]
    fn overlapping_patients_are_refused() {
        let dir = tempfile::tempdir().unwrap();
        let a = manifest(&dir.path().join("a"), 0..3);
        let b = manifest(&dir.path().join("b"), 2..4);
        let c = manifest(&dir.path().join("c"), 3..5);
        assert!(matches!(check_patient_overlap(&a, &b), Err(Error::Integrity(_))));
        check_patient_overlap(&a, &c).unwrap();
    }

    #[test]
    fn mixing_without_synthetic_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        manifest(&dir.path().join("a"), 0..3);
        manifest(&dir.path().join("b"), 3..5);
        let args = RegimeArgs {
            train: dir.path().join("a"),
            validation: dir.path().join("b"),
            synthetic: None,
            mix_percents: vec![0, 100],
            out: dir.path().join("out"),
        };
        assert!(matches!(prepare(&args), Err(Error::Config(_))));
    }
}
