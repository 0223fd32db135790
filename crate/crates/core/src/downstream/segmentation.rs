//! Segmentation training on real/synthetic mixes with held-out evaluation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::segnet::{ce_dice_loss, SegNet, SegNetSpec};
use crate::data::{LabelMap, PatientRecord, Provenance};
use crate::error::{Error, Result};
use crate::metrics::{score_segmentations, SegmentationScores};
use crate::nn::{Adam, AdamConfig, Graph};
use crate::tensor::Tensor;
use crate::training::to_model_space;

pub const ALLOWED_MIX_PERCENTS: [u32; 4] = [0, 50, 100, 200];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegConfig {
    pub image_size: usize,
    pub net: SegNetSpec,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub mix_percent: u32,
    pub seed: u64,
    /// Epochs without validation improvement before stopping.
    pub patience: Option<usize>,
}

impl SegConfig {
    pub fn desk() -> Self {
        Self {
            image_size: 64,
            net: SegNetSpec { base_width: 8, depth: 2 },
            epochs: 20,
            learning_rate: 3e-3,
            batch_size: 4,
            mix_percent: 0,
            seed: 0,
            patience: Some(6),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !ALLOWED_MIX_PERCENTS.contains(&self.mix_percent) {
            return Err(Error::param("mix_percent", format!("{} not in {ALLOWED_MIX_PERCENTS:?}", self.mix_percent)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::param("epochs", "epochs and batch_size must be positive"));
        }
        if self.image_size % self.net.spatial_multiple() != 0 {
            return Err(Error::param(
                "image_size",
                format!("{} is not a multiple of {}", self.image_size, self.net.spatial_multiple()),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    /// Mean validation Dice for segmentation, accuracy for probes.
    pub val_metric: f64,
}

#[derive(Debug, Clone)]
pub struct SegRun {
    pub net: SegNet,
    pub history: Vec<EpochLog>,
    pub best_epoch: usize,
    pub scores: SegmentationScores,
}

/// Every training record needs a label map; synthetic ones inherit theirs
/// from the real map that conditioned them.
pub fn check_training_records(records: &[PatientRecord]) -> Result<()> {
    if records.is_empty() {
        return Err(Error::config("no training records"));
    }
    for r in records {
        if r.label_map.is_none() {
            return Err(Error::config(format!(
                "{:?} record {} {} has no label map",
                r.provenance, r.patient_id, r.view_phase
            )));
        }
    }
    Ok(())
}

/// Validation must be real data only.
pub fn check_validation_records(records: &[PatientRecord]) -> Result<()> {
    if records.is_empty() {
        return Err(Error::config("no validation records"));
    }
    if let Some(r) = records.iter().find(|r| r.provenance == Provenance::Synthetic) {
        return Err(Error::Integrity(format!("validation contains synthetic record {} {}", r.patient_id, r.view_phase)));
    }
    if let Some(r) = records.iter().find(|r| r.label_map.is_none()) {
        return Err(Error::Integrity(format!("validation record {} {} has no label map", r.patient_id, r.view_phase)));
    }
    Ok(())
}

struct Prepared {
    image: Tensor,
    target: Tensor,
    labels: LabelMap,
}

fn prepare(records: &[PatientRecord], size: usize) -> Vec<Prepared> {
    records
        .iter()
        .map(|r| {
            let labels = r.label_map.as_ref().expect("checked").resize_nearest(size, size);
            Prepared {
                image: to_model_space(&r.image.resize_area(size, size)),
                target: labels.one_hot(size, size),
                labels,
            }
        })
        .collect()
}

fn predict_all(net: &SegNet, items: &[Prepared]) -> Result<Vec<LabelMap>> {
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(items.len().max(1));
    let chunk = items.len().div_ceil(workers).max(1);
    let parts: Vec<Result<Vec<LabelMap>>> = std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|part| {
                s.spawn(move || {
                    let mut out = Vec::with_capacity(part.len());
                    for batch in part.chunks(8) {
                        let x = Tensor::stack_batch(&batch.iter().map(|p| p.image.clone()).collect::<Vec<_>>())?;
                        out.extend(net.predict(&x)?);
                    }
                    Ok(out)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("prediction worker panicked")).collect()
    });
    let mut all = Vec::with_capacity(items.len());
    for p in parts {
        all.extend(p?);
    }
    Ok(all)
}

/// Scores `net` on `records` at `size`.
pub fn evaluate_segmentation(net: &SegNet, records: &[PatientRecord], size: usize) -> Result<SegmentationScores> {
    check_validation_records(records)?;
    let items = prepare(records, size);
    let preds = predict_all(net, &items)?;
    let truths: Vec<LabelMap> = items.into_iter().map(|p| p.labels).collect();
    score_segmentations(&preds, &truths)
}

/// Trains from scratch and keeps the weights of the best validation epoch.
pub fn train_segmentation(cfg: &SegConfig, train: &[PatientRecord], val: &[PatientRecord]) -> Result<SegRun> {
    cfg.validate()?;
    check_training_records(train)?;
    check_validation_records(val)?;
    let size = cfg.image_size;
    let train_items = prepare(train, size);
    let val_items = prepare(val, size);
    let val_truths: Vec<LabelMap> = val_items.iter().map(|p| p.labels.clone()).collect();
    let mut net = SegNet::new(cfg.net, cfg.seed)?;
    let mut adam = Adam::new(AdamConfig { lr: cfg.learning_rate, ..AdamConfig::default() });
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, crate::nn::ParamStore, SegmentationScores)> = None;
    let mut order: Vec<usize> = (0..train_items.len()).collect();
    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for idx in order.chunks(cfg.batch_size) {
            let x = Tensor::stack_batch(&idx.iter().map(|&i| train_items[i].image.clone()).collect::<Vec<_>>())?;
            let y = Tensor::stack_batch(&idx.iter().map(|&i| train_items[i].target.clone()).collect::<Vec<_>>())?;
            let grads = {
                let mut g = Graph::new(&net.store);
                let xv = g.constant(x);
                let logits = net.forward(&mut g, xv)?;
                let loss = ce_dice_loss(&mut g, logits, &y)?;
                let v = g.value(loss).data()[0];
                if !v.is_finite() {
                    return Err(Error::NonFiniteLoss { iteration: epoch as u64, last_good: None });
                }
                loss_sum += v;
                g.backward(loss)?
            };
            adam.step(&mut net.store, &grads);
            batches += 1;
        }
        let preds = predict_all(&net, &val_items)?;
        let scores = score_segmentations(&preds, &val_truths)?;
        let log = EpochLog { epoch, train_loss: loss_sum / batches as f64, val_metric: scores.mean_dice };
        log::info!("seg epoch {epoch}: loss {:.4}, val dice {:.4}", log.train_loss, log.val_metric);
        history.push(log);
        if best.as_ref().is_none_or(|b| scores.mean_dice > b.0) {
            best = Some((scores.mean_dice, epoch, net.store.clone(), scores));
        } else if let (Some(p), Some(b)) = (cfg.patience, &best) {
            if epoch - b.1 >= p {
                break;
            }
        }
    }
    let (_, best_epoch, store, scores) = best.expect("at least one epoch");
    net.store = store;
    Ok(SegRun { net, history, best_epoch, scores })
}
