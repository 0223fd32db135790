//! Denoiser, codec, text encoder and control branch, composed into a
//! mode-tagged [`ModelBundle`].

pub mod bundle;
pub mod checkpoint;
pub mod codec;
pub mod denoiser;
pub mod spec;
pub mod text;

pub use bundle::{Conditioning, ConditionedModel, ModelBundle};
pub use checkpoint::{
    load_checkpoint, load_lexicon, read_checkpoint_manifest, save_checkpoint, verify_lexicon, CheckpointInfo,
    CheckpointManifest,
};
pub use codec::Codec;
pub use spec::{BundleSpec, CodecSpec, ControlBranchSpec, DenoiserSpec, GenerationMode, TextEncoderSpec};

/// Small specs used by tests and desk presets.
pub mod presets {
    use super::*;

    /// Pixel-space unconditional bundle.
    pub fn unconditional(size: usize, base_width: usize, depth: usize) -> BundleSpec {
        BundleSpec {
            mode: GenerationMode::Unconditional,
            image_size: [size, size],
            denoiser: DenoiserSpec::new(1, base_width, depth, 16, 0),
            codec: CodecSpec::identity(1),
            text_encoder: None,
            control: None,
        }
    }

    /// Text bundle; `f > 1` selects a convolutional codec with 4 latent channels.
    pub fn text(size: usize, f: usize, base_width: usize, depth: usize, context_dim: usize) -> BundleSpec {
        let (codec, latent) = if f == 1 { (CodecSpec::identity(1), 1) } else { (CodecSpec::conv(f, 4, 8), 4) };
        BundleSpec {
            mode: GenerationMode::Text,
            image_size: [size, size],
            denoiser: DenoiserSpec::new(latent, base_width, depth, 16, context_dim),
            codec,
            text_encoder: Some(TextEncoderSpec::hashed(context_dim)),
            control: None,
        }
    }
}
