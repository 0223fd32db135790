use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::data::{read_manifest, DatasetManifest};
use crate::error::{Error, Result};
use crate::metrics::{
    extract_features, extractor_by_name, fid, kid, AssetRegistry, FeatureExtractor, FeatureSet, GenerationCell,
    GenerationTable, KidParams, MetricReport, ReferenceValue, KID_SCALE_NOTE,
};
use crate::prompt::ViewPhase;

use super::run::{RunDir, RunRecord};

pub const REPORT_JSON: &str = "report.json";
pub const REPORT_MD: &str = "report.md";

/// Full-scale text+seg FID per view/phase, printed beside measured values.
pub const GENERATION_REFERENCE: [(&str, f64); 5] =
    [("2CH-ED", 1.3957), ("2CH-ES", 1.6251), ("4CH-ED", 1.6080), ("4CH-ES", 1.3322), ("mean", 1.4902)];

#[derive(Debug, Clone, Serialize)]
pub struct EvalArgs {
    pub real: PathBuf,
    pub synthetic: PathBuf,
    pub extractor: String,
    /// TOML file mapping asset names to weight blobs.
    pub assets: Option<PathBuf>,
    pub kid: KidParams,
    pub out: PathBuf,
    /// Row label in the report.
    pub model: String,
    pub cache_dir: Option<PathBuf>,
}

impl EvalArgs {
    pub fn new(real: PathBuf, synthetic: PathBuf, out: PathBuf) -> Self {
        Self {
            real,
            synthetic,
            extractor: "random-projection".into(),
            assets: None,
            kid: KidParams::default(),
            out,
            model: "synthetic".into(),
            cache_dir: None,
        }
    }
}

fn cache_path(dir: &Path, manifest_hash: &str, extractor: &str) -> PathBuf {
    let key = hex::encode(Sha256::digest(format!("{manifest_hash}\n{extractor}").as_bytes()));
    dir.join(format!("features-{}.json", &key[..16]))
}

/// Features for every record of `m`, read from or written to the cache.
pub fn manifest_features(
    m: &DatasetManifest,
    extractor: &dyn FeatureExtractor,
    cache_dir: Option<&Path>,
) -> Result<FeatureSet> {
    let cached = cache_dir.map(|d| cache_path(d, m.hash(), &extractor.id()));
    if let Some(p) = cached.as_ref().filter(|p| p.is_file()) {
        let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        let f: FeatureSet = serde_json::from_str(&text)?;
        if f.n == m.len() && f.source_hash.as_deref() == Some(m.hash()) && f.extractor == extractor.id() {
            return Ok(f);
        }
        log::warn!("ignoring stale feature cache {}", p.display());
    }
    let images: Vec<_> = m.load_records()?.into_iter().map(|r| r.image).collect();
    let mut f = if images.is_empty() {
        FeatureSet::new(0, extractor.dim(), Vec::new(), &extractor.id())?
    } else {
        extract_features(&images, extractor)?
    };
    f.source_hash = Some(m.hash().to_string());
    if let Some(p) = cached {
        if let Some(dir) = p.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(&p, serde_json::to_string(&f)?).map_err(|e| Error::io(&p, e))?;
    }
    Ok(f)
}

fn rows_of(m: &DatasetManifest, vp: ViewPhase) -> Vec<usize> {
    m.records.iter().enumerate().filter(|(_, r)| r.view_phase() == vp).map(|(i, _)| i).collect()
}

/// FID and KID per view/phase. A cell with fewer than two images on
/// either side is left undefined.
pub fn generation_table(
    real: &DatasetManifest,
    synth: &DatasetManifest,
    extractor: &dyn FeatureExtractor,
    kid_params: KidParams,
    model: &str,
    cache_dir: Option<&Path>,
) -> Result<GenerationTable> {
    let fr = manifest_features(real, extractor, cache_dir)?;
    let fs = manifest_features(synth, extractor, cache_dir)?;
    let mut cells = Vec::new();
    for vp in ViewPhase::all() {
        let (ir, is) = (rows_of(real, vp), rows_of(synth, vp));
        let mut cell =
            GenerationCell { view_phase: vp, fid: None, kid_mean: None, kid_std: None, n_real: ir.len(), n_synthetic: is.len() };
        if ir.len() >= 2 && is.len() >= 2 {
            let (a, b) = (fr.select(&ir), fs.select(&is));
            cell.fid = Some(fid(&a, &b)?);
            let (mean, std) = kid(&a, &b, kid_params)?;
            cell.kid_mean = Some(mean);
            cell.kid_std = Some(std);
        }
        cells.push(cell);
    }
    Ok(GenerationTable {
        model: model.to_string(),
        extractor: extractor.id(),
        reference_hash: real.hash().to_string(),
        cells,
    })
}

pub fn generation_references() -> Vec<ReferenceValue> {
    GENERATION_REFERENCE
        .iter()
        .map(|(row, v)| ReferenceValue {
            table: "generation (full-scale reference, text+seg)".into(),
            row: (*row).into(),
            metric: "FID".into(),
            value: *v,
        })
        .collect()
}

pub fn cmd_evaluate(args: &EvalArgs) -> Result<MetricReport> {
    let assets = match &args.assets {
        Some(p) => AssetRegistry::load(p)?,
        None => AssetRegistry::default(),
    };
    let extractor = extractor_by_name(&args.extractor, &assets)?;
    let real = read_manifest(&args.real)?;
    let synth = read_manifest(&args.synthetic)?;
    let run = RunDir::open(&args.out)?;
    let table = generation_table(&real, &synth, extractor.as_ref(), args.kid, &args.model, args.cache_dir.as_deref())?;
    let report = MetricReport {
        generation: vec![table],
        references: generation_references(),
        notes: vec![KID_SCALE_NOTE.into(), format!("features: {}", extractor.id())],
        ..Default::default()
    };
    report.write_json(&run.join(REPORT_JSON))?;
    let md = run.join(REPORT_MD);
    std::fs::write(&md, report.to_markdown()).map_err(|e| Error::io(&md, e))?;
    run.record(
        &RunRecord::new("evaluate", args.kid.seed, args)?
            .input("real", real.hash())
            .input("synthetic", synth.hash())
            .output("report", REPORT_JSON)
            .output("markdown", REPORT_MD),
    )?;
    Ok(report)
}
