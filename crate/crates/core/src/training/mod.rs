//! Training objectives, configuration and the resumable training loop.

pub mod config;
pub mod engine;
pub mod loss;

pub use config::{CodecPretrain, ModelConfig, TrainConfig};
pub use engine::{pretrain_codec, read_loss_log, train, CHECKPOINT_DIR, LOSS_LOG, LossRecord, TrainData, TrainOutcome, Trainer};
pub use loss::{ddpm_loss, from_model_space, ldm_loss, loss_graph, to_model_space, TrainSample};
