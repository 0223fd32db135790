use std::collections::BTreeMap;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::manifest::MANIFEST_FILE;
use crate::data::{read_manifest, write_records, write_synthetic, BitDepth, LabelMap, PatientRecord, Provenance};
use crate::diffusion::FastSolver;
use crate::error::{Error, Result};
use crate::models::{load_checkpoint, load_lexicon, verify_lexicon, Conditioning, GenerationMode};
use crate::prompt::{render, ConceptLexicon, Prompt, PromptStyle, ViewPhase};
use crate::tensor::Tensor;
use crate::training::from_model_space;

use super::run::{RunDir, RunRecord};

#[derive(Debug, Clone, Serialize)]
pub struct SynthArgs {
    pub checkpoint: PathBuf,
    pub out: PathBuf,
    pub count: usize,
    /// Cycled in order over the generated images.
    pub view_phases: Vec<ViewPhase>,
    /// Manifest whose label maps condition text+seg sampling.
    pub label_source: Option<PathBuf>,
    /// Lexicon file expected to match the checkpoint's.
    pub lexicon: Option<PathBuf>,
    /// Fail instead of reusing a label map once a pool is exhausted.
    pub no_repeat: bool,
    pub seed: u64,
    /// `None` runs the full reverse chain.
    pub sampler_steps: Option<usize>,
    pub solver: FastSolver,
    pub guidance_scale: Option<f64>,
    pub batch_size: usize,
}

impl SynthArgs {
    pub fn new(checkpoint: PathBuf, out: PathBuf, count: usize) -> Self {
        Self {
            checkpoint,
            out,
            count,
            view_phases: ViewPhase::all().to_vec(),
            label_source: None,
            lexicon: None,
            no_repeat: false,
            seed: 0,
            sampler_steps: Some(25),
            solver: FastSolver::default(),
            guidance_scale: None,
            batch_size: 8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthSummary {
    pub out: PathBuf,
    pub count: usize,
    pub manifest_hash: String,
}

pub fn synthetic_patient_id(i: usize) -> String {
    format!("synthetic{i:05}")
}

/// Seeded, shuffled label maps per view/phase, drawn in order.
struct LabelPools {
    pools: BTreeMap<ViewPhase, Vec<LabelMap>>,
    next: BTreeMap<ViewPhase, usize>,
    no_repeat: bool,
}

impl LabelPools {
    fn new(records: Vec<PatientRecord>, size: [usize; 2], seed: u64, no_repeat: bool) -> Self {
        let mut pools: BTreeMap<ViewPhase, Vec<LabelMap>> = BTreeMap::new();
        for r in records {
            if let Some(m) = r.label_map {
                pools.entry(r.view_phase).or_default().push(m.resize_nearest(size[0], size[1]));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in pools.values_mut() {
            p.shuffle(&mut rng);
        }
        Self { pools, next: BTreeMap::new(), no_repeat }
    }

    fn draw(&mut self, vp: ViewPhase) -> Result<LabelMap> {
        let pool = self
            .pools
            .get(&vp)
            .filter(|p| !p.is_empty())
            .ok_or_else(|| Error::config(format!("label source has no {vp} label maps")))?;
        let i = self.next.entry(vp).or_insert(0);
        if *i >= pool.len() && self.no_repeat {
            return Err(Error::config(format!(
                "{vp} label pool exhausted after {} maps and repeats are disabled",
                pool.len()
            )));
        }
        let m = pool[*i % pool.len()].clone();
        *i += 1;
        Ok(m)
    }
}

fn batch_seed(seed: u64, batch: usize) -> u64 {
    seed ^ (batch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn prompt_for(mode: GenerationMode, vp: ViewPhase, style: PromptStyle, lex: Option<&ConceptLexicon>) -> Result<Prompt> {
    if mode.needs_text() {
        render(vp, style, lex)
    } else {
        Ok(Prompt { text: String::new(), style: PromptStyle::Textual, view_phase: vp })
    }
}

/// Samples `count` images from a checkpoint and writes them as a synthetic
/// manifest. Identical arguments give byte-identical outputs.
pub fn cmd_synthesize(args: &SynthArgs) -> Result<SynthSummary> {
    if args.batch_size == 0 {
        return Err(Error::param("batch_size", "must be positive"));
    }
    if args.view_phases.is_empty() {
        return Err(Error::config("no view/phase requested"));
    }
    let (bundle, manifest) = load_checkpoint(&args.checkpoint)?;
    let mode = bundle.mode();
    let style = manifest.info.prompt_style.unwrap_or_default();
    let mut lexicon = load_lexicon(&args.checkpoint, &manifest)?;
    if let Some(p) = &args.lexicon {
        let given = ConceptLexicon::load(p)?;
        verify_lexicon(&given, &manifest)?;
        lexicon = Some(given);
    }
    if mode.needs_text() && style == PromptStyle::Abstract && lexicon.is_none() {
        return Err(Error::config("abstract prompts need a lexicon and the checkpoint has none"));
    }
    let size = bundle.spec().image_size;
    let mut pools = match (mode, &args.label_source) {
        (GenerationMode::TextSeg, Some(src)) => {
            Some(LabelPools::new(read_manifest(src)?.load_records()?, size, args.seed, args.no_repeat))
        }
        (GenerationMode::TextSeg, None) => return Err(Error::config("text_seg sampling needs a label source")),
        (_, Some(_)) => return Err(Error::config(format!("{mode} sampling takes no label source"))),
        _ => None,
    };
    let schedule = manifest.info.schedule.build()?;
    let run = RunDir::open(&args.out)?;

    let mut records = Vec::with_capacity(args.count);
    let indices: Vec<usize> = (0..args.count).collect();
    for (b, chunk) in indices.chunks(args.batch_size).enumerate() {
        let vps: Vec<ViewPhase> = chunk.iter().map(|&i| args.view_phases[i % args.view_phases.len()]).collect();
        let prompts = vps.iter().map(|&vp| prompt_for(mode, vp, style, lexicon.as_ref())).collect::<Result<Vec<_>>>()?;
        let maps = match &mut pools {
            Some(p) => Some(vps.iter().map(|&vp| p.draw(vp)).collect::<Result<Vec<_>>>()?),
            None => None,
        };
        let context = if mode.needs_text() {
            let texts: Vec<&str> = prompts.iter().map(|p| p.text.as_str()).collect();
            Some(bundle.encode_texts(&texts)?)
        } else {
            None
        };
        let label_map = match &maps {
            Some(ms) => Some(Tensor::stack_batch(&ms.iter().map(|m| bundle.rasterize(m)).collect::<Vec<_>>())?),
            None => None,
        };
        let cond = Conditioning { context, label_map, guidance_scale: args.guidance_scale };
        let steps = args.sampler_steps.map(|k| (k, args.solver));
        let x = bundle.sample(chunk.len(), &schedule, batch_seed(args.seed, b), cond, steps)?;
        for (j, &i) in chunk.iter().enumerate() {
            records.push(PatientRecord {
                patient_id: synthetic_patient_id(i),
                view_phase: vps[j],
                image: from_model_space(&x.batch_item(j))?,
                label_map: maps.as_ref().map(|m| m[j].clone()),
                provenance: Provenance::Synthetic,
                source_prompt: Some(prompts[j].clone()),
            });
        }
        log::info!("synthesized {}/{}", records.len(), args.count);
    }
    let written = if records.is_empty() {
        write_records(&records, run.path(), "synthetic", args.seed, BitDepth::Sixteen, size)?
    } else {
        write_synthetic(&records, run.path(), args.seed)?
    };

    let mut rec = RunRecord::new("synthesize", args.seed, args)?
        .input("checkpoint", bundle.store.checksum(""))
        .output("manifest", MANIFEST_FILE);
    if let Some(src) = &args.label_source {
        rec = rec.input("label_source", read_manifest(src)?.hash());
    }
    run.record(&rec)?;
    Ok(SynthSummary { out: run.path().to_path_buf(), count: written.len(), manifest_hash: written.hash().to_string() })
}
