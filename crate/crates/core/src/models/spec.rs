use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenerationMode {
    Unconditional,
    Text,
    TextSeg,
}

impl GenerationMode {
    pub fn needs_text(self) -> bool {
        !matches!(self, GenerationMode::Unconditional)
    }
}

impl std::fmt::Display for GenerationMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            GenerationMode::Unconditional => "unconditional",
            GenerationMode::Text => "text",
            GenerationMode::TextSeg => "text_seg",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserSpec {
    pub in_channels: usize,
    pub base_width: usize,
    /// Number of resolution levels; level `i` has `base_width << i` channels.
    pub depth: usize,
    /// Levels that carry cross-attention. Ignored when `context_dim == 0`.
    pub attention_levels: Vec<usize>,
    pub timestep_embedding_dim: usize,
    /// Width of the text context; 0 disables cross-attention entirely.
    pub context_dim: usize,
}

impl DenoiserSpec {
    /// Cross-attention on the two lowest-resolution levels.
    pub fn new(in_channels: usize, base_width: usize, depth: usize, temb: usize, context_dim: usize) -> Self {
        Self {
            in_channels,
            base_width,
            depth,
            attention_levels: (depth.saturating_sub(2)..depth).collect(),
            timestep_embedding_dim: temb,
            context_dim,
        }
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_width << level
    }

    pub fn has_attention(&self, level: usize) -> bool {
        self.context_dim > 0 && self.attention_levels.contains(&level)
    }

    /// Spatial dimensions must be divisible by this.
    pub fn spatial_multiple(&self) -> usize {
        1 << self.depth.saturating_sub(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.base_width == 0 || self.depth == 0 {
            return Err(Error::config("denoiser channels and depth must be positive"));
        }
        if self.timestep_embedding_dim < 2 {
            return Err(Error::config("timestep_embedding_dim must be at least 2"));
        }
        if let Some(l) = self.attention_levels.iter().find(|&&l| l >= self.depth) {
            return Err(Error::config(format!("attention level {l} exceeds depth {}", self.depth)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodecSpec {
    /// Power of two; 1 means the identity codec.
    pub downsample_factor: usize,
    pub latent_channels: usize,
    pub image_channels: usize,
    /// Hidden width of the convolutional codec.
    pub hidden: usize,
}

impl CodecSpec {
    pub fn identity(channels: usize) -> Self {
        Self { downsample_factor: 1, latent_channels: channels, image_channels: channels, hidden: 0 }
    }

    pub fn conv(downsample_factor: usize, latent_channels: usize, hidden: usize) -> Self {
        Self { downsample_factor, latent_channels, image_channels: 1, hidden }
    }

    pub fn is_identity(&self) -> bool {
        self.downsample_factor == 1 && self.hidden == 0
    }

    pub fn validate(&self) -> Result<()> {
        if !self.downsample_factor.is_power_of_two() {
            return Err(Error::config("downsample_factor must be a power of two"));
        }
        if self.is_identity() && self.latent_channels != self.image_channels {
            return Err(Error::config("the identity codec needs latent_channels == image_channels"));
        }
        if !self.is_identity() && self.hidden == 0 {
            return Err(Error::config("a convolutional codec needs a positive hidden width"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextEncoderSpec {
    pub tokenizer: String,
    pub vocab_size: usize,
    pub max_sequence_length: usize,
    pub embedding_dim: usize,
    pub trainable: bool,
}

impl TextEncoderSpec {
    pub fn hashed(embedding_dim: usize) -> Self {
        Self {
            tokenizer: super::text::HASHED_WORDS.into(),
            vocab_size: 4096,
            max_sequence_length: 16,
            embedding_dim,
            trainable: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlBranchSpec {
    /// Parameter prefix of the encoder path the branch was copied from.
    pub copy_of: String,
    /// Stem output, one per level skip, and one for the middle block.
    pub zero_conv_count: usize,
    pub condition_channels: usize,
    pub stem_width: usize,
}

impl ControlBranchSpec {
    pub fn for_denoiser(d: &DenoiserSpec) -> Self {
        Self {
            copy_of: super::denoiser::ENCODER_PREFIX.into(),
            zero_conv_count: d.depth + 2,
            condition_channels: crate::data::NUM_CLASSES,
            stem_width: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BundleSpec {
    pub mode: GenerationMode,
    /// `[height, width]` of pixel-space images.
    pub image_size: [usize; 2],
    pub denoiser: DenoiserSpec,
    pub codec: CodecSpec,
    pub text_encoder: Option<TextEncoderSpec>,
    pub control: Option<ControlBranchSpec>,
}

impl BundleSpec {
    pub fn latent_shape(&self) -> [usize; 3] {
        let f = self.codec.downsample_factor;
        [self.codec.latent_channels, self.image_size[0] / f, self.image_size[1] / f]
    }

    /// Rejects every combination that violates the mode invariants.
    pub fn validate(&self) -> Result<()> {
        self.denoiser.validate()?;
        self.codec.validate()?;
        if self.denoiser.in_channels != self.codec.latent_channels {
            return Err(Error::config(format!(
                "denoiser in_channels {} != codec latent_channels {}",
                self.denoiser.in_channels, self.codec.latent_channels
            )));
        }
        let m = self.codec.downsample_factor * self.denoiser.spatial_multiple();
        if self.image_size.iter().any(|&s| s == 0 || s % m != 0) {
            return Err(Error::config(format!("image size {:?} is not a multiple of {m}", self.image_size)));
        }
        match self.mode {
            GenerationMode::Unconditional => {
                if !self.codec.is_identity() {
                    return Err(Error::config("unconditional mode requires the identity codec"));
                }
                if self.text_encoder.is_some() || self.control.is_some() {
                    return Err(Error::config("unconditional mode takes no text encoder or control branch"));
                }
                if self.denoiser.context_dim != 0 {
                    return Err(Error::config("unconditional mode requires context_dim = 0"));
                }
            }
            GenerationMode::Text | GenerationMode::TextSeg => {
                let text = self
                    .text_encoder
                    .as_ref()
                    .ok_or_else(|| Error::config(format!("{} mode requires a text encoder", self.mode)))?;
                if text.embedding_dim != self.denoiser.context_dim || text.embedding_dim == 0 {
                    return Err(Error::config(format!(
                        "text embedding_dim {} must equal a positive denoiser context_dim {}",
                        text.embedding_dim, self.denoiser.context_dim
                    )));
                }
                if text.max_sequence_length < 2 || text.vocab_size <= super::text::FIRST_WORD_ID {
                    return Err(Error::config("text encoder sequence length or vocabulary too small"));
                }
                match (&self.control, self.mode) {
                    (Some(_), GenerationMode::Text) => {
                        return Err(Error::config("text mode takes no control branch"))
                    }
                    (None, GenerationMode::TextSeg) => {
                        return Err(Error::config("text_seg mode requires a control branch"))
                    }
                    (Some(c), _) => {
                        let expected = ControlBranchSpec::for_denoiser(&self.denoiser);
                        if c.copy_of != expected.copy_of
                            || c.zero_conv_count != expected.zero_conv_count
                            || c.condition_channels != expected.condition_channels
                        {
                            return Err(Error::config(
                                "control branch must mirror the denoiser encoder path",
                            ));
                        }
                    }
                    (None, _) => {}
                }
            }
        }
        Ok(())
    }
}
