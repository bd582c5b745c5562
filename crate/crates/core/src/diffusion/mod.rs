//! Variance-preserving noising, ε-prediction denoisers and deterministic
//! sampling.

mod denoiser;
mod sampler;
mod schedule;

pub use denoiser::{
    conditioned_input, conditioned_input_on_tape, denoise_loss, denoise_loss_on_tape,
    timestep_embedding, Architecture, Denoiser, EpsPredictor, Role, EMBED_DIM,
};
pub use sampler::ddim_sample;
pub use schedule::NoiseSchedule;
