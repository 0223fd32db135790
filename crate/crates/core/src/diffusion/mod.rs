//! Noise schedule, forward/reverse diffusion arithmetic and samplers.

mod sampler;
mod schedule;

pub use sampler::{ddpm_sample, fast_sample, strided_timesteps, FastSolver, NoisePredictor};
pub use schedule::{NoiseSchedule, ScheduleKind, ScheduleMeta};
