//! One-step diffusion enhancement of degraded latents.
//!
//! A noise schedule fixes the forward process; a small U-Net estimates the
//! noise content of a latent; a prediction module picks a per-patch time-step
//! matching the degradation severity; and a hybrid scheduler reverses the
//! estimated noise in a single step, with a zero-initialized learnable
//! correction on top of the closed-form term.

mod denoiser;
mod hybrid;
mod losses;
mod schedule;
mod timestep_map;
mod tpm;

pub use denoiser::{ToyUnet, LATENT_CHANNELS};
pub use hybrid::{denoise_fixed_graph, Enhancer, HybridScheduler, LearnedScheduler};
pub use losses::{loss_enh, GradientMagnitude, LocalStructure, PerceptualTerm};
pub use schedule::{
    denoise_fixed, forward_noise, NoiseSchedule, DEFAULT_BETA_MAX, DEFAULT_BETA_MIN, DEFAULT_STEPS,
};
pub use timestep_map::TimeStepMap;
pub use tpm::TimestepPredictor;
