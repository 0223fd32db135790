use std::path::{Path, PathBuf};

use crate::data::read_manifest;
use crate::error::{Error, Result};
use crate::models::{load_checkpoint, load_lexicon, read_checkpoint_manifest, GenerationMode, ModelBundle};
use crate::prompt::{ConceptLexicon, PromptStyle};
use crate::training::{train, TrainConfig, TrainData, Trainer, CHECKPOINT_DIR, LOSS_LOG};

use super::run::{RunDir, RunRecord};

pub const CONFIG_SNAPSHOT: &str = "config.toml";

#[derive(Debug, Clone)]
pub struct TrainArgs {
    pub config: TrainConfig,
    /// Manifest file or directory holding `manifest.json`.
    pub data: PathBuf,
    pub run_dir: PathBuf,
    /// Continue from the newest checkpoint in `run_dir`.
    pub resume: bool,
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub run_dir: PathBuf,
    pub iterations: u64,
    pub last_checkpoint: Option<PathBuf>,
    pub final_loss: Option<f64>,
}

/// Newest `checkpoints/step-*` directory of a run.
pub fn latest_checkpoint(run_dir: &Path) -> Result<Option<PathBuf>> {
    let dir = run_dir.join(CHECKPOINT_DIR);
    if !dir.is_dir() {
        return Ok(None);
    }
    let mut steps: Vec<PathBuf> = std::fs::read_dir(&dir)
        .map_err(|e| Error::io(&dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.file_name().is_some_and(|n| n.to_string_lossy().starts_with("step-")))
        .collect();
    steps.sort();
    Ok(steps.pop())
}

/// Fresh bundle for the configured mode. Text+seg runs start from the text
/// checkpoint named in `base_checkpoint` and reuse its lexicon.
fn initial_bundle(cfg: &TrainConfig) -> Result<(ModelBundle, Option<ConceptLexicon>, Option<String>)> {
    match cfg.mode {
        GenerationMode::TextSeg => {
            let base = cfg
                .base_checkpoint
                .as_ref()
                .ok_or_else(|| Error::config("text_seg training needs base_checkpoint"))?;
            let (bundle, m) = load_checkpoint(base)?;
            if bundle.mode() != GenerationMode::Text {
                return Err(Error::config(format!("base checkpoint is {}, not text", bundle.mode())));
            }
            if m.spec.image_size != [cfg.model.image_size; 2] {
                return Err(Error::config(format!(
                    "base checkpoint image size {:?} differs from model.image_size {}",
                    m.spec.image_size, cfg.model.image_size
                )));
            }
            if m.info.prompt_style != Some(cfg.prompt_style) {
                return Err(Error::config("prompt_style differs from the base checkpoint"));
            }
            let lexicon = load_lexicon(base, &m)?;
            let seg = bundle.init_control_from_base(cfg.seed)?;
            Ok((seg, lexicon, Some(bundle.base_checksum())))
        }
        mode => {
            let lexicon = if mode.needs_text() && cfg.prompt_style == PromptStyle::Abstract {
                Some(ConceptLexicon::build(cfg.lexicon_seed, cfg.lexicon_token_length)?)
            } else {
                None
            };
            Ok((ModelBundle::new(cfg.bundle_spec(), cfg.seed)?, lexicon, None))
        }
    }
}

pub fn cmd_train(args: &TrainArgs) -> Result<TrainSummary> {
    let cfg = &args.config;
    cfg.validate()?;
    let run = RunDir::open(&args.run_dir)?;
    let manifest = read_manifest(&args.data)?;
    let records = manifest.load_records()?;
    let size = [cfg.model.image_size; 2];
    let hash = manifest.hash().to_string();
    let snapshot = run.join(CONFIG_SNAPSHOT);
    std::fs::write(&snapshot, cfg.to_toml()?).map_err(|e| Error::io(&snapshot, e))?;
    let mut record = RunRecord::new("train", cfg.seed, cfg)?.input("data_manifest", &hash);

    let (losses, last) = if args.resume {
        let ckpt = latest_checkpoint(run.path())?
            .ok_or_else(|| Error::config(format!("nothing to resume in {}", run.path().display())))?;
        let m = read_checkpoint_manifest(&ckpt)?;
        if m.info.data_manifest_hash.as_deref() != Some(hash.as_str()) {
            return Err(Error::Integrity("resume data differs from the data the run started with".into()));
        }
        let lexicon = load_lexicon(&ckpt, &m)?;
        let data = TrainData::from_records(&records, cfg.mode, size, cfg.prompt_style, lexicon.as_ref(), Some(hash))?;
        let mut t = Trainer::resume(cfg.clone(), &ckpt, data, Some(run.path()))?;
        let losses = t.run()?;
        (losses, t.last_checkpoint().map(Path::to_path_buf))
    } else {
        let (bundle, lexicon, base) = initial_bundle(cfg)?;
        if let Some(b) = base {
            record = record.input("base_model", b);
        }
        let data = TrainData::from_records(&records, cfg.mode, size, cfg.prompt_style, lexicon.as_ref(), Some(hash))?;
        let out = train(cfg, data, bundle, lexicon, Some(run.path()))?;
        (out.records, out.last_checkpoint)
    };
    let iterations = match &last {
        Some(p) => read_checkpoint_manifest(p)?.info.step,
        None => 0,
    };
    record = record.output("losses", LOSS_LOG);
    if let Some(p) = &last {
        let rel = p.strip_prefix(run.path()).unwrap_or(p);
        record = record.output("checkpoint", rel.to_string_lossy());
    }
    run.record(&record)?;
    Ok(TrainSummary {
        run_dir: run.path().to_path_buf(),
        iterations,
        last_checkpoint: last,
        final_loss: losses.last().map(|r| r.loss),
    })
}
