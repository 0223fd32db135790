//! Training configuration with layered sources: file < environment < flags.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::diffusion::ScheduleMeta;
use crate::error::{Error, Result};
use crate::models::{BundleSpec, CodecSpec, ControlBranchSpec, DenoiserSpec, GenerationMode, TextEncoderSpec};
use crate::models::text::HASHED_WORDS;
use crate::prompt::PromptStyle;

/// Environment variables with this prefix override config keys;
/// `ECHOSYNTH_TRAIN__MODEL__DEPTH=3` sets `model.depth`.
pub const ENV_PREFIX: &str = "ECHOSYNTH_TRAIN__";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub image_size: usize,
    pub base_width: usize,
    pub depth: usize,
    /// Defaults to the two lowest-resolution levels.
    pub attention_levels: Option<Vec<usize>>,
    pub timestep_embedding_dim: usize,
    pub context_dim: usize,
    /// 1 selects the identity codec.
    pub codec_factor: usize,
    pub latent_channels: usize,
    pub codec_hidden: usize,
    pub text_max_length: usize,
    pub text_vocab: usize,
    pub text_trainable: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodecPretrain {
    pub iterations: u64,
    pub learning_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: GenerationMode,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub batch_size_per_device: usize,
    /// Micro-batches accumulated per optimizer step (emulates devices).
    pub grad_accumulation: usize,
    pub max_iterations: u64,
    pub schedule: ScheduleMeta,
    pub seed: u64,
    pub checkpoint_every: u64,
    /// Ignored in unconditional mode.
    pub prompt_style: PromptStyle,
    pub lexicon_seed: u64,
    pub lexicon_token_length: usize,
    /// Exponential moving average of weights; off when absent.
    pub ema_decay: Option<f64>,
    /// Text checkpoint a text+seg run starts from.
    pub base_checkpoint: Option<PathBuf>,
    pub codec_pretrain: CodecPretrain,
    pub model: ModelConfig,
}

impl TrainConfig {
    /// 256×256 images, latent factor 8, Adam at 5e-6, batch 1 on each of
    /// 4 accumulated micro-batches, 120000 iterations, T = 1000.
    pub fn paper(mode: GenerationMode) -> Self {
        Self {
            mode,
            learning_rate: 5e-6,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            batch_size_per_device: 1,
            grad_accumulation: 4,
            max_iterations: 120_000,
            schedule: ScheduleMeta::default(),
            seed: 0,
            checkpoint_every: 10_000,
            prompt_style: PromptStyle::Textual,
            lexicon_seed: 0,
            lexicon_token_length: 8,
            ema_decay: None,
            base_checkpoint: None,
            codec_pretrain: CodecPretrain { iterations: 20_000, learning_rate: 1e-4 },
            model: ModelConfig {
                image_size: 256,
                base_width: 64,
                depth: 4,
                attention_levels: None,
                timestep_embedding_dim: 128,
                context_dim: if mode.needs_text() { 64 } else { 0 },
                codec_factor: if mode.needs_text() { 8 } else { 1 },
                latent_channels: if mode.needs_text() { 4 } else { 1 },
                codec_hidden: 32,
                text_max_length: 32,
                text_vocab: 8192,
                text_trainable: true,
            },
        }
    }

    /// Minutes on one CPU core: small images, T = 200, tiny networks.
    pub fn desk(mode: GenerationMode) -> Self {
        let latent = mode.needs_text();
        Self {
            learning_rate: 2e-3,
            grad_accumulation: 1,
            batch_size_per_device: if latent { 2 } else { 6 },
            max_iterations: 2000,
            schedule: ScheduleMeta { steps: 200, beta_start: 1e-4, beta_end: 0.02, ..Default::default() },
            checkpoint_every: 500,
            codec_pretrain: CodecPretrain { iterations: 400, learning_rate: 3e-3 },
            model: ModelConfig {
                image_size: if latent { 64 } else { 32 },
                base_width: 16,
                depth: 2,
                attention_levels: None,
                timestep_embedding_dim: 32,
                context_dim: if latent { 16 } else { 0 },
                codec_factor: if latent { 4 } else { 1 },
                latent_channels: if latent { 4 } else { 1 },
                codec_hidden: 16,
                text_max_length: 16,
                text_vocab: 1024,
                text_trainable: true,
            },
            ..Self::paper(mode)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::param("learning_rate", "must be a positive finite number"));
        }
        if self.max_iterations < 1 {
            return Err(Error::param("max_iterations", "must be at least 1"));
        }
        if self.batch_size_per_device < 1 || self.grad_accumulation < 1 {
            return Err(Error::param("batch_size_per_device", "batch and accumulation must be at least 1"));
        }
        if self.checkpoint_every < 1 {
            return Err(Error::param("checkpoint_every", "must be at least 1"));
        }
        if let Some(d) = self.ema_decay {
            if !(0.0..1.0).contains(&d) {
                return Err(Error::param("ema_decay", "must lie in [0, 1)"));
            }
        }
        self.schedule.build()?;
        self.bundle_spec().validate()
    }

    pub fn bundle_spec(&self) -> BundleSpec {
        let m = &self.model;
        let text = self.mode.needs_text();
        let mut denoiser = DenoiserSpec::new(
            m.latent_channels,
            m.base_width,
            m.depth,
            m.timestep_embedding_dim,
            if text { m.context_dim } else { 0 },
        );
        if let Some(levels) = &m.attention_levels {
            denoiser.attention_levels = levels.clone();
        }
        let codec = if m.codec_factor == 1 {
            CodecSpec::identity(m.latent_channels)
        } else {
            CodecSpec::conv(m.codec_factor, m.latent_channels, m.codec_hidden)
        };
        let text_encoder = text.then(|| TextEncoderSpec {
            tokenizer: HASHED_WORDS.into(),
            vocab_size: m.text_vocab,
            max_sequence_length: m.text_max_length,
            embedding_dim: m.context_dim,
            trainable: m.text_trainable,
        });
        let control = (self.mode == GenerationMode::TextSeg).then(|| ControlBranchSpec::for_denoiser(&denoiser));
        BundleSpec {
            mode: self.mode,
            image_size: [m.image_size, m.image_size],
            denoiser,
            codec,
            text_encoder,
            control,
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Serde(e.to_string()))
    }

    /// `base`, then the TOML file, then `ECHOSYNTH_TRAIN__*` variables, then
    /// `key.path=value` flags. Unknown keys are rejected by name.
    pub fn layered<I>(base: &TrainConfig, file: Option<&Path>, env: I, flags: &[String]) -> Result<Self>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        let cfg: TrainConfig = crate::layered::layered(base, file, ENV_PREFIX, env, flags)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for mode in [GenerationMode::Unconditional, GenerationMode::Text, GenerationMode::TextSeg] {
            TrainConfig::paper(mode).validate().unwrap();
            TrainConfig::desk(mode).validate().unwrap();
        }
        let p = TrainConfig::paper(GenerationMode::Text);
        assert_eq!((p.learning_rate, p.batch_size_per_device, p.max_iterations), (5e-6, 1, 120_000));
        assert_eq!(p.schedule.steps, 1000);
    }

    #[test]
    fn layering_order_and_unknown_keys() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("c.toml");
        std::fs::write(&f, "seed = 5\nmax_iterations = 10\n[model]\ndepth = 3\n").unwrap();
        let base = TrainConfig::desk(GenerationMode::Unconditional);
        let env = vec![
            ("ECHOSYNTH_TRAIN__SEED".to_string(), "6".to_string()),
            ("OTHER".to_string(), "1".to_string()),
        ];
        let c = TrainConfig::layered(&base, Some(&f), env, &["max_iterations=11".into()]).unwrap();
        assert_eq!((c.seed, c.max_iterations, c.model.depth), (6, 11, 3));
        let e = TrainConfig::layered(&base, None, vec![], &["model.dept=2".into()]).unwrap_err();
        assert!(e.to_string().contains("dept"), "{e}");
        let e = TrainConfig::layered(&base, None, vec![], &["learning_rate=-1".into()]).unwrap_err();
        assert!(matches!(e, Error::Parameter { name: "learning_rate", .. }));
        let round: TrainConfig = toml::from_str(&c.to_toml().unwrap()).unwrap();
        assert_eq!(round, c);
    }
}
