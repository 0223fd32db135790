//! The training loop: sampling, optimizer steps, freezing checks, logs and
//! resumable checkpoints.
//!
//! Every iteration draws from its own ChaCha stream `(seed, iteration)`, so a
//! run resumed from a checkpoint replays exactly the draws it would have
//! made without interruption.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{CodecPretrain, TrainConfig};
use super::loss::{loss_graph, TrainSample};
use crate::data::PatientRecord;
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::models::codec::{Codec, CODEC_PREFIX};
use crate::models::{load_checkpoint, save_checkpoint, verify_lexicon, CheckpointInfo, GenerationMode, ModelBundle};
use crate::nn::{read_blob, Adam, AdamConfig, Gradients, Graph, ParamId, ParamStore};
use crate::prompt::{render, ConceptLexicon, PromptStyle};
use crate::tensor::Tensor;

pub const LOSS_LOG: &str = "losses.jsonl";
pub const CHECKPOINT_DIR: &str = "checkpoints";
const OPTIMIZER_FILE: &str = "optimizer.bin";
const EMA_FILE: &str = "ema.bin";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: u64,
    pub loss: f64,
    /// Timestep of the first batch item.
    pub timestep: usize,
    pub mode: GenerationMode,
}

/// Model-space samples plus the hash of the manifest they came from.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub samples: Vec<TrainSample>,
    pub manifest_hash: Option<String>,
}

impl TrainData {
    /// Attaches prompts and checks that every record carries what `mode`
    /// needs. Synthetic records keep their own source prompt.
    pub fn from_records(
        records: &[PatientRecord],
        mode: GenerationMode,
        image_size: [usize; 2],
        style: PromptStyle,
        lexicon: Option<&ConceptLexicon>,
        manifest_hash: Option<String>,
    ) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::config("training data is empty"));
        }
        let mut samples = Vec::with_capacity(records.len());
        for r in records {
            let prompt = if mode.needs_text() {
                Some(match &r.source_prompt {
                    Some(p) => p.clone(),
                    None => render(r.view_phase, style, lexicon)?,
                })
            } else {
                None
            };
            if mode == GenerationMode::TextSeg && r.label_map.is_none() {
                return Err(Error::config(format!(
                    "{} {} has no label map for text_seg training",
                    r.patient_id, r.view_phase
                )));
            }
            samples.push(TrainSample::from_record(r, prompt.as_ref(), image_size));
        }
        Ok(Self { samples, manifest_hash })
    }
}

pub struct Trainer {
    config: TrainConfig,
    bundle: ModelBundle,
    schedule: NoiseSchedule,
    adam: Adam,
    ema: Option<BTreeMap<ParamId, Tensor>>,
    data: TrainData,
    lexicon: Option<ConceptLexicon>,
    iteration: u64,
    frozen_checksum: String,
    run_dir: Option<PathBuf>,
    last_checkpoint: Option<PathBuf>,
}

impl Trainer {
    /// Fresh run. A text bundle with an untrained convolutional codec gets
    /// the codec fit first (and then frozen).
    pub fn new(
        config: TrainConfig,
        mut bundle: ModelBundle,
        data: TrainData,
        lexicon: Option<ConceptLexicon>,
        run_dir: Option<&Path>,
    ) -> Result<Self> {
        config.validate()?;
        if bundle.mode() != config.mode {
            return Err(Error::config(format!("config mode {} but bundle is {}", config.mode, bundle.mode())));
        }
        if config.mode.needs_text() && config.prompt_style == PromptStyle::Abstract && lexicon.is_none() {
            return Err(Error::config("abstract prompting needs a lexicon"));
        }
        if config.mode == GenerationMode::Text
            && matches!(bundle.codec(), Codec::Conv(_))
            && config.codec_pretrain.iterations > 0
        {
            let images: Vec<Tensor> = data.samples.iter().map(|s| s.image.clone()).collect();
            let recon = pretrain_codec(&mut bundle, &images, config.codec_pretrain, config.seed)?;
            log::info!("codec reconstruction mse {recon:.5}");
        }
        let schedule = config.schedule.build()?;
        let adam = Adam::new(adam_config(&config));
        let ema = config.ema_decay.map(|_| snapshot_trainable(&bundle.store));
        let frozen_checksum = bundle.frozen_checksum();
        let run_dir = run_dir.map(Path::to_path_buf);
        if let Some(d) = &run_dir {
            std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
            let log = d.join(LOSS_LOG);
            std::fs::write(&log, "").map_err(|e| Error::io(&log, e))?;
        }
        Ok(Self {
            config,
            bundle,
            schedule,
            adam,
            ema,
            data,
            lexicon,
            iteration: 0,
            frozen_checksum,
            run_dir,
            last_checkpoint: None,
        })
    }

    /// Continues from a checkpoint written by [`Trainer::save_checkpoint`].
    pub fn resume(config: TrainConfig, checkpoint: &Path, data: TrainData, run_dir: Option<&Path>) -> Result<Self> {
        config.validate()?;
        let (bundle, manifest) = load_checkpoint(checkpoint)?;
        if bundle.mode() != config.mode {
            return Err(Error::config(format!("checkpoint mode {} but config is {}", bundle.mode(), config.mode)));
        }
        let lexicon = crate::models::load_lexicon(checkpoint, &manifest)?;
        if let Some(l) = &lexicon {
            verify_lexicon(l, &manifest)?;
        }
        let adam = Adam::load(adam_config(&config), &bundle.store, &checkpoint.join(OPTIMIZER_FILE))?;
        let ema = match config.ema_decay {
            Some(_) => {
                let mut m = BTreeMap::new();
                for (name, t) in read_blob(&checkpoint.join(EMA_FILE))? {
                    let id = bundle
                        .store
                        .id(&name)
                        .ok_or_else(|| Error::Integrity(format!("ema names unknown parameter `{name}`")))?;
                    m.insert(id, t);
                }
                Some(m)
            }
            None => None,
        };
        let run_dir = run_dir.map(Path::to_path_buf);
        if let Some(d) = &run_dir {
            truncate_log(&d.join(LOSS_LOG), manifest.info.step)?;
        }
        Ok(Self {
            schedule: config.schedule.build()?,
            frozen_checksum: bundle.frozen_checksum(),
            config,
            bundle,
            adam,
            ema,
            data,
            lexicon,
            iteration: manifest.info.step,
            run_dir,
            last_checkpoint: Some(checkpoint.to_path_buf()),
        })
    }

    pub fn bundle(&self) -> &ModelBundle {
        &self.bundle
    }

    pub fn into_bundle(self) -> ModelBundle {
        self.bundle
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn lexicon(&self) -> Option<&ConceptLexicon> {
        self.lexicon.as_ref()
    }

    pub fn last_checkpoint(&self) -> Option<&Path> {
        self.last_checkpoint.as_deref()
    }

    /// Bundle carrying the moving-average weights, when enabled.
    pub fn ema_bundle(&self) -> Option<ModelBundle> {
        self.ema.as_ref().map(|ema| {
            let mut b = self.bundle.clone();
            for (id, t) in ema {
                *b.store.value_mut(*id) = t.clone();
            }
            b
        })
    }

    /// One optimizer step over `batch_size_per_device × grad_accumulation`
    /// samples.
    pub fn step(&mut self) -> Result<LossRecord> {
        let it = self.iteration + 1;
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(it);
        let b = self.config.batch_size_per_device;
        let accum = self.config.grad_accumulation;
        let latent = self.bundle.latent_batch_shape(b);
        let mut total = Gradients::default();
        let mut loss_sum = 0.0;
        let mut first_t = 0;
        for micro in 0..accum {
            let idx: Vec<usize> = (0..b).map(|_| rng.random_range(0..self.data.samples.len())).collect();
            let ts: Vec<usize> = (0..b).map(|_| rng.random_range(1..=self.schedule.steps())).collect();
            let eps = Tensor::randn(&latent, &mut rng);
            if micro == 0 {
                first_t = ts[0];
            }
            let batch: Vec<&TrainSample> = idx.iter().map(|&i| &self.data.samples[i]).collect();
            let mut g = Graph::new(&self.bundle.store);
            let loss = loss_graph(&self.bundle, &mut g, &self.schedule, &batch, &ts, &eps)?;
            loss_sum += g.value(loss).data()[0];
            total.accumulate(g.backward(loss)?, 1.0 / accum as f64);
        }
        let loss = loss_sum / accum as f64;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { iteration: it, last_good: self.last_checkpoint.clone() });
        }
        let touched = self.adam.step(&mut self.bundle.store, &total);
        if let Some(id) = touched.iter().find(|id| self.bundle.store.get(**id).frozen) {
            return Err(Error::FrozenDrift {
                iteration: it,
                parameter: self.bundle.store.get(*id).name.clone(),
            });
        }
        if self.bundle.frozen_checksum() != self.frozen_checksum {
            return Err(Error::FrozenDrift { iteration: it, parameter: "<frozen checksum>".into() });
        }
        if let (Some(ema), Some(d)) = (&mut self.ema, self.config.ema_decay) {
            for (id, avg) in ema.iter_mut() {
                let cur = self.bundle.store.value(*id);
                *avg = avg.lin_comb(d, cur, 1.0 - d)?;
            }
        }
        self.iteration = it;
        let rec = LossRecord { iteration: it, loss, timestep: first_t, mode: self.config.mode };
        if let Some(d) = &self.run_dir {
            append_log(&d.join(LOSS_LOG), &rec)?;
            if it % self.config.checkpoint_every == 0 || it == self.config.max_iterations {
                self.save_checkpoint()?;
            }
        }
        Ok(rec)
    }

    /// Steps until `max_iterations`.
    pub fn run(&mut self) -> Result<Vec<LossRecord>> {
        let mut out = Vec::new();
        while self.iteration < self.config.max_iterations {
            let rec = self.step()?;
            if rec.iteration % 100 == 0 {
                log::info!("iteration {} loss {:.5}", rec.iteration, rec.loss);
            }
            out.push(rec);
        }
        Ok(out)
    }

    /// Writes `checkpoints/step-NNNNNNNN` under the run directory.
    pub fn save_checkpoint(&mut self) -> Result<PathBuf> {
        let run = self
            .run_dir
            .as_ref()
            .ok_or_else(|| Error::config("checkpointing needs a run directory"))?;
        let dir = run.join(CHECKPOINT_DIR).join(format!("step-{:08}", self.iteration));
        let info = CheckpointInfo {
            schedule: self.config.schedule,
            step: self.iteration,
            seed: self.config.seed,
            prompt_style: self.config.mode.needs_text().then_some(self.config.prompt_style),
            lexicon_hash: self.lexicon.as_ref().map(ConceptLexicon::hash),
            data_manifest_hash: self.data.manifest_hash.clone(),
        };
        save_checkpoint(&self.bundle, &dir, info, self.lexicon.as_ref())?;
        self.adam.save(&self.bundle.store, &dir.join(OPTIMIZER_FILE))?;
        if let Some(ema) = &self.ema {
            let mut tmp = ParamStore::new();
            for (id, t) in ema {
                tmp.insert(self.bundle.store.get(*id).name.clone(), t.clone())?;
            }
            tmp.save_blob("", &dir.join(EMA_FILE))?;
        }
        self.last_checkpoint = Some(dir.clone());
        Ok(dir)
    }
}

fn adam_config(c: &TrainConfig) -> AdamConfig {
    AdamConfig { lr: c.learning_rate, beta1: c.adam_beta1, beta2: c.adam_beta2, eps: c.adam_eps }
}

fn snapshot_trainable(store: &ParamStore) -> BTreeMap<ParamId, Tensor> {
    store.trainable_ids().into_iter().map(|id| (id, store.value(id).clone())).collect()
}

fn append_log(path: &Path, rec: &LossRecord) -> Result<()> {
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    writeln!(f, "{}", serde_json::to_string(rec)?).map_err(|e| Error::io(path, e))
}

/// Drops log lines past `step` so a resumed run does not duplicate them.
fn truncate_log(path: &Path, step: u64) -> Result<()> {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(_) => return Ok(()),
    };
    let mut kept = String::new();
    for line in text.lines() {
        let rec: LossRecord = serde_json::from_str(line)?;
        if rec.iteration <= step {
            kept.push_str(line);
            kept.push('\n');
        }
    }
    std::fs::write(path, kept).map_err(|e| Error::io(path, e))
}

pub fn read_loss_log(path: &Path) -> Result<Vec<LossRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines().map(|l| Ok(serde_json::from_str(l)?)).collect()
}

/// Fits the convolutional codec by reconstruction, then sets its latent
/// scale to the inverse latent standard deviation. Returns the final mean
/// reconstruction error over `images`.
pub fn pretrain_codec(bundle: &mut ModelBundle, images: &[Tensor], cfg: CodecPretrain, seed: u64) -> Result<f64> {
    let Codec::Conv(conv) = bundle.codec().clone() else {
        return Ok(0.0);
    };
    if images.is_empty() {
        return Err(Error::config("codec pretraining needs images"));
    }
    bundle.store.set_frozen_prefix("", true);
    bundle.store.set_frozen_prefix(CODEC_PREFIX, false);
    bundle.store.get_mut(conv.latent_scale).frozen = true;
    let mut adam = Adam::new(AdamConfig { lr: cfg.learning_rate, ..Default::default() });
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xC0DE_C0DE);
    let codec = bundle.codec().clone();
    let batch = images.len().min(4);
    for _ in 0..cfg.iterations {
        let items: Vec<Tensor> = (0..batch).map(|_| images[rng.random_range(0..images.len())].clone()).collect();
        let x = Tensor::stack_batch(&items)?;
        let grads = {
            let mut g = Graph::new(&bundle.store);
            let xv = g.constant(x);
            let z = codec.encode_raw(&mut g, xv)?;
            let y = codec.decode_raw(&mut g, z)?;
            let l = g.mse(y, xv)?;
            if !g.value(l).data()[0].is_finite() {
                return Err(Error::Numeric { message: "codec reconstruction diverged".into(), timestep: None });
            }
            g.backward(l)?
        };
        adam.step(&mut bundle.store, &grads);
    }
    let mut sq = 0.0;
    let mut n = 0usize;
    let mut recon = 0.0;
    for x in images {
        let mut g = Graph::inference(&bundle.store);
        let xv = g.constant(x.clone());
        let z = codec.encode_raw(&mut g, xv)?;
        let y = codec.decode_raw(&mut g, z)?;
        let l = g.mse(y, xv)?;
        recon += g.value(l).data()[0];
        let zt = g.value(z);
        sq += zt.data().iter().map(|v| v * v).sum::<f64>();
        n += zt.numel();
    }
    let std = (sq / n as f64).sqrt().max(1e-6);
    bundle.store.value_mut(conv.latent_scale).data_mut()[0] = 1.0 / std;
    bundle.apply_freeze_policy();
    Ok(recon / images.len() as f64)
}

/// Everything a finished run produced.
pub struct TrainOutcome {
    pub records: Vec<LossRecord>,
    pub bundle: ModelBundle,
    pub last_checkpoint: Option<PathBuf>,
}

/// Runs `config.max_iterations` steps from scratch.
pub fn train(
    config: &TrainConfig,
    data: TrainData,
    bundle: ModelBundle,
    lexicon: Option<ConceptLexicon>,
    run_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    let mut t = Trainer::new(config.clone(), bundle, data, lexicon, run_dir)?;
    let records = t.run()?;
    let last_checkpoint = t.last_checkpoint().map(Path::to_path_buf);
    Ok(TrainOutcome { records, bundle: t.into_bundle(), last_checkpoint })
}
