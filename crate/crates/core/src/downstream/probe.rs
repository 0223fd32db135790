//! Linear probing of phase (ED/ES) on frozen image backbones.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::segmentation::{EpochLog, ALLOWED_MIX_PERCENTS};
use crate::data::{GrayImage, PatientRecord, Provenance};
use crate::error::{Error, Result};
use crate::metrics::{classification_scores, AssetRegistry, ClassificationScores, FeatureSet};
use crate::nn::layers::{Conv2d, Linear};
use crate::nn::{read_blob, Adam, AdamConfig, Graph, ParamBuilder, ParamStore};
use crate::tensor::Tensor;
use crate::training::to_model_space;

pub const BACKBONE_PREFIX: &str = "backbone";
pub const PHASE_CLASSES: usize = 2;

/// Frozen image feature extractor.
pub trait Backbone: Sync {
    fn id(&self) -> String;
    fn feature_dim(&self) -> usize;
    fn embed(&self, images: &[GrayImage]) -> Result<FeatureSet>;
    fn checksum(&self) -> String;
}

/// Strided conv stack with ReLU and global average pooling.
#[derive(Debug, Clone)]
pub struct ConvBackbone {
    id: String,
    side: usize,
    store: ParamStore,
    convs: Vec<Conv2d>,
}

impl ConvBackbone {
    /// Randomly initialised stand-in for a pretrained backbone.
    pub fn small(seed: u64, side: usize, widths: &[usize]) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = ParamBuilder::new(&mut store, &mut rng, BACKBONE_PREFIX);
        let mut convs = Vec::new();
        let mut cin = 1;
        for (i, &w) in widths.iter().enumerate() {
            convs.push(Conv2d::new(&mut b.pp(format!("conv{i}")), cin, w, 3, 2)?);
            cin = w;
        }
        store.set_frozen_prefix(BACKBONE_PREFIX, true);
        Ok(Self { id: format!("small-cnn:{seed}"), side, store, convs })
    }

    /// Loads `backbone.conv{i}.weight/bias` tensors; depth and widths come
    /// from the blob.
    pub fn from_asset(name: &str, path: &Path, side: usize) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut entries = read_blob(path)?;
        entries.sort_by(|a, b| a.0.cmp(&b.0));
        for (n, t) in entries {
            store.insert(n, t)?;
        }
        let mut convs = Vec::new();
        let mut cin = 1;
        for i in 0.. {
            let w = store.id(&format!("{BACKBONE_PREFIX}.conv{i}.weight"));
            let b = store.id(&format!("{BACKBONE_PREFIX}.conv{i}.bias"));
            let (Some(weight), Some(bias)) = (w, b) else { break };
            let s = store.value(weight).shape().to_vec();
            if s.len() != 4 || s[1] != cin || s[2] != 3 || s[3] != 3 {
                return Err(Error::Integrity(format!("{}: conv{i} weight has shape {s:?}", path.display())));
            }
            cin = s[0];
            convs.push(Conv2d { weight, bias, stride: 2, pad: 1 });
        }
        if convs.is_empty() || convs.len() * 2 != store.len() {
            return Err(Error::Integrity(format!("{}: not a conv backbone blob", path.display())));
        }
        store.set_frozen_prefix(BACKBONE_PREFIX, true);
        Ok(Self { id: format!("asset:{name}"), side, store, convs })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.store.save_blob(BACKBONE_PREFIX, path)
    }
}

impl Backbone for ConvBackbone {
    fn id(&self) -> String {
        self.id.clone()
    }

    fn feature_dim(&self) -> usize {
        self.store.value(self.convs.last().expect("non-empty").bias).numel()
    }

    fn embed(&self, images: &[GrayImage]) -> Result<FeatureSet> {
        let mut data = Vec::with_capacity(images.len() * self.feature_dim());
        for chunk in images.chunks(16) {
            let x = Tensor::stack_batch(
                &chunk.iter().map(|i| to_model_space(&i.resize_area(self.side, self.side))).collect::<Vec<_>>(),
            )?;
            let mut g = Graph::inference(&self.store);
            let mut h = g.constant(x);
            for c in &self.convs {
                h = c.forward(&mut g, h)?;
                h = g.relu(h);
            }
            let pooled = g.mean_spatial(h);
            data.extend_from_slice(g.value(pooled).data());
        }
        FeatureSet::new(images.len(), self.feature_dim(), data, &self.id)
    }

    fn checksum(&self) -> String {
        self.store.checksum(BACKBONE_PREFIX)
    }
}

/// `small-cnn[:seed]`, or a backbone asset registered under `name`
/// (for example `resnet18` or `vgg16`).
pub fn backbone_by_name(name: &str, assets: &AssetRegistry, side: usize) -> Result<Box<dyn Backbone>> {
    if let Some(rest) = name.strip_prefix("small-cnn") {
        let seed = match rest.strip_prefix(':') {
            Some(s) => s.parse().map_err(|_| Error::config(format!("bad backbone seed `{s}`")))?,
            None if rest.is_empty() => 0,
            None => return Err(Error::config(format!("unknown backbone `{name}`"))),
        };
        return Ok(Box::new(ConvBackbone::small(seed, side, &[8, 16, 32])?));
    }
    match assets.get(name) {
        Some(p) => Ok(Box::new(ConvBackbone::from_asset(name, p, side)?)),
        None => Err(Error::config(format!("backbone `{name}` is not registered"))),
    }
}

/// A single linear layer on standardised features.
#[derive(Debug, Clone)]
pub struct LinearHead {
    pub store: ParamStore,
    layer: Linear,
    mean: Vec<f64>,
    scale: Vec<f64>,
}

impl LinearHead {
    fn standardize(&self, f: &FeatureSet) -> Tensor {
        let data = f
            .rows()
            .flat_map(|r| r.iter().enumerate().map(|(j, v)| (v - self.mean[j]) * self.scale[j]).collect::<Vec<_>>())
            .collect();
        Tensor::new(&[f.n, f.d], data).expect("feature shape")
    }

    pub fn logits(&self, f: &FeatureSet) -> Result<Tensor> {
        if f.d != self.mean.len() {
            return Err(Error::shape(&[self.mean.len()], &[f.d]));
        }
        let mut g = Graph::inference(&self.store);
        let x = g.constant(self.standardize(f));
        let y = self.layer.forward(&mut g, x)?;
        Ok(g.value(y).clone())
    }

    pub fn predict(&self, f: &FeatureSet) -> Result<Vec<usize>> {
        let l = self.logits(f)?;
        let c = l.shape()[1];
        Ok(l.data()
            .chunks(c)
            .map(|row| (0..c).fold(0, |best, k| if row[k] > row[best] { k } else { best }))
            .collect())
    }
}

/// Full-batch softmax regression. Returns the head and per-epoch loss.
pub fn train_linear_head(
    features: &FeatureSet,
    labels: &[usize],
    classes: usize,
    epochs: usize,
    learning_rate: f64,
    seed: u64,
) -> Result<(LinearHead, Vec<f64>)> {
    let (head, log) = fit_head(features, labels, classes, epochs, learning_rate, seed, None)?;
    Ok((head, log.iter().map(|e| e.train_loss).collect()))
}

/// With `monitor`, each epoch also records validation accuracy.
fn fit_head(
    features: &FeatureSet,
    labels: &[usize],
    classes: usize,
    epochs: usize,
    learning_rate: f64,
    seed: u64,
    monitor: Option<(&FeatureSet, &[usize])>,
) -> Result<(LinearHead, Vec<EpochLog>)> {
    if features.n != labels.len() || features.n == 0 {
        return Err(Error::param("labels", format!("{} labels for {} feature rows", labels.len(), features.n)));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::param("labels", format!("label {l} outside {classes} classes")));
    }
    let d = features.d;
    let n = features.n as f64;
    let mut mean = vec![0.0; d];
    for r in features.rows() {
        for j in 0..d {
            mean[j] += r[j] / n;
        }
    }
    let mut var = vec![0.0; d];
    for r in features.rows() {
        for j in 0..d {
            var[j] += (r[j] - mean[j]).powi(2) / n;
        }
    }
    let scale = var.iter().map(|v| if *v > 1e-12 { 1.0 / v.sqrt() } else { 1.0 }).collect();
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layer = Linear::new(&mut ParamBuilder::new(&mut store, &mut rng, "head"), d, classes, true)?;
    let mut head = LinearHead { store, layer, mean, scale };
    let x = head.standardize(features);
    let mut onehot = vec![0.0; labels.len() * classes];
    for (i, &l) in labels.iter().enumerate() {
        onehot[i * classes + l] = 1.0;
    }
    let y = Tensor::new(&[labels.len(), classes], onehot)?;
    let mut adam = Adam::new(AdamConfig { lr: learning_rate, ..AdamConfig::default() });
    let mut log = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let grads = {
            let mut g = Graph::new(&head.store);
            let xv = g.constant(x.clone());
            let logits = head.layer.forward(&mut g, xv)?;
            let logp = g.log_softmax_channels(logits);
            let yv = g.constant(y.clone());
            let picked = g.mul(logp, yv)?;
            let total = g.sum(picked);
            let loss = g.scale(total, -1.0 / n);
            log.push(EpochLog { epoch, train_loss: g.value(loss).data()[0], val_metric: f64::NAN });
            g.backward(loss)?
        };
        adam.step(&mut head.store, &grads);
        if let Some((vf, vl)) = monitor {
            let acc = classification_scores(&head.predict(vf)?, vl, classes)?.accuracy;
            log.last_mut().expect("pushed").val_metric = acc;
        }
    }
    Ok((head, log))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    pub backbone: String,
    pub image_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub mix_percent: u32,
    pub seed: u64,
}

impl ProbeConfig {
    pub fn desk() -> Self {
        Self { backbone: "small-cnn".into(), image_size: 32, epochs: 300, learning_rate: 0.05, mix_percent: 0, seed: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct ProbeRun {
    pub backbone: String,
    pub head: LinearHead,
    pub history: Vec<EpochLog>,
    pub scores: ClassificationScores,
    pub backbone_checksum: String,
}

fn phase_labels(records: &[PatientRecord]) -> Vec<usize> {
    records.iter().map(|r| r.view_phase.phase.index()).collect()
}

/// Trains only the head on frozen backbone features; the backbone checksum
/// is compared before and after.
pub fn linear_probe(
    cfg: &ProbeConfig,
    backbone: &dyn Backbone,
    train: &[PatientRecord],
    val: &[PatientRecord],
) -> Result<ProbeRun> {
    if !ALLOWED_MIX_PERCENTS.contains(&cfg.mix_percent) {
        return Err(Error::param("mix_percent", format!("{} not in {ALLOWED_MIX_PERCENTS:?}", cfg.mix_percent)));
    }
    if val.iter().any(|r| r.provenance == Provenance::Synthetic) {
        return Err(Error::Integrity("validation contains synthetic records".into()));
    }
    if train.is_empty() || val.is_empty() {
        return Err(Error::config("probe needs training and validation records"));
    }
    let before = backbone.checksum();
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
    let images: Vec<GrayImage> = order.iter().map(|&i| train[i].image.clone()).collect();
    let labels: Vec<usize> = order.iter().map(|&i| train[i].view_phase.phase.index()).collect();
    let train_f = backbone.embed(&images)?;
    let val_f = backbone.embed(&val.iter().map(|r| r.image.clone()).collect::<Vec<_>>())?;
    let val_labels = phase_labels(val);
    let (head, history) = fit_head(
        &train_f,
        &labels,
        PHASE_CLASSES,
        cfg.epochs,
        cfg.learning_rate,
        cfg.seed,
        Some((&val_f, &val_labels)),
    )?;
    let after = backbone.checksum();
    if before != after {
        return Err(Error::FrozenDrift { iteration: cfg.epochs as u64, parameter: backbone.id() });
    }
    let pred = head.predict(&val_f)?;
    let scores = classification_scores(&pred, &val_labels, PHASE_CLASSES)?;
    Ok(ProbeRun { backbone: backbone.id(), head, history, scores, backbone_checksum: after })
}
