//! Checkpoint directories: `checkpoint.json` plus one parameter blob per
//! sub-model and, for abstract prompting, the lexicon.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::bundle::ModelBundle;
use super::codec::CODEC_PREFIX;
use super::denoiser::{CONTROL_PREFIX, DENOISER_PREFIX};
use super::spec::{BundleSpec, GenerationMode};
use super::text::TEXT_PREFIX;
use crate::diffusion::ScheduleMeta;
use crate::error::{Error, Result};
use crate::prompt::{ConceptLexicon, PromptStyle};

pub const CHECKPOINT_VERSION: u32 = 1;
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const LEXICON_FILE: &str = "lexicon.json";
/// Reverse-process variance recorded with every checkpoint.
pub const VARIANCE_FIXED_BETA: &str = "fixed_beta";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointInfo {
    pub schedule: ScheduleMeta,
    pub step: u64,
    pub seed: u64,
    pub prompt_style: Option<PromptStyle>,
    pub lexicon_hash: Option<String>,
    pub data_manifest_hash: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub mode: GenerationMode,
    pub spec: BundleSpec,
    pub variance: String,
    #[serde(flatten)]
    pub info: CheckpointInfo,
    /// Sub-model name to blob file.
    pub blobs: BTreeMap<String, String>,
}

const SUBMODELS: [&str; 4] = [DENOISER_PREFIX, CODEC_PREFIX, TEXT_PREFIX, CONTROL_PREFIX];

pub fn save_checkpoint(
    bundle: &ModelBundle,
    dir: &Path,
    info: CheckpointInfo,
    lexicon: Option<&ConceptLexicon>,
) -> Result<CheckpointManifest> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    if info.lexicon_hash.as_deref() != lexicon.map(|l| l.hash()).as_deref() {
        return Err(Error::Integrity("lexicon hash does not match the lexicon being saved".into()));
    }
    let mut blobs = BTreeMap::new();
    for sub in SUBMODELS {
        if bundle.store.ids_with_prefix(sub).next().is_none() {
            continue;
        }
        let file = format!("{sub}.bin");
        bundle.store.save_blob(sub, &dir.join(&file))?;
        blobs.insert(sub.to_string(), file);
    }
    if let Some(l) = lexicon {
        l.save(&dir.join(LEXICON_FILE))?;
    }
    let manifest = CheckpointManifest {
        format_version: CHECKPOINT_VERSION,
        mode: bundle.mode(),
        spec: bundle.spec().clone(),
        variance: VARIANCE_FIXED_BETA.into(),
        info,
        blobs,
    };
    let path = dir.join(CHECKPOINT_FILE);
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_checkpoint_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let path = dir.join(CHECKPOINT_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: CheckpointManifest = serde_json::from_str(&text)?;
    if m.format_version > CHECKPOINT_VERSION {
        return Err(Error::Integrity(format!(
            "checkpoint version {} is newer than supported {CHECKPOINT_VERSION}",
            m.format_version
        )));
    }
    if m.variance != VARIANCE_FIXED_BETA {
        return Err(Error::config(format!("unsupported reverse variance `{}`", m.variance)));
    }
    Ok(m)
}

/// Rebuilds the bundle and restores every parameter.
pub fn load_checkpoint(dir: &Path) -> Result<(ModelBundle, CheckpointManifest)> {
    let m = read_checkpoint_manifest(dir)?;
    if m.spec.mode != m.mode {
        return Err(Error::Integrity("checkpoint mode disagrees with its spec".into()));
    }
    let mut bundle = ModelBundle::new(m.spec.clone(), 0)?;
    let mut loaded = 0;
    for file in m.blobs.values() {
        loaded += bundle.store.load_blob(&dir.join(file))?;
    }
    if loaded != bundle.store.len() {
        return Err(Error::Integrity(format!(
            "checkpoint restores {loaded} of {} parameters",
            bundle.store.len()
        )));
    }
    bundle.apply_freeze_policy();
    Ok((bundle, m))
}

/// The lexicon stored with a checkpoint, verified against the recorded hash.
pub fn load_lexicon(dir: &Path, m: &CheckpointManifest) -> Result<Option<ConceptLexicon>> {
    match &m.info.lexicon_hash {
        None => Ok(None),
        Some(h) => {
            let lex = ConceptLexicon::load(&dir.join(LEXICON_FILE))?;
            verify_lexicon(&lex, m)?;
            debug_assert_eq!(&lex.hash(), h);
            Ok(Some(lex))
        }
    }
}

/// Refuses a lexicon other than the one the checkpoint was trained with.
pub fn verify_lexicon(lex: &ConceptLexicon, m: &CheckpointManifest) -> Result<()> {
    match &m.info.lexicon_hash {
        Some(h) if *h == lex.hash() => Ok(()),
        Some(h) => Err(Error::Integrity(format!(
            "lexicon hash {} differs from checkpoint's {h}",
            lex.hash()
        ))),
        None => Err(Error::config("checkpoint was not trained with a lexicon")),
    }
}
