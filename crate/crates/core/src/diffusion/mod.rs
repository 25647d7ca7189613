//! Noise schedule, forward/reverse diffusion and the tiny conditional
//! denoiser with its pre-training loop.

mod checkpoint;
mod image;
mod schedule;
mod train;
mod unet;

pub use checkpoint::{denoiser_container, denoiser_from_container, Container, MAGIC};
pub use image::ImageTensor;
pub use schedule::{
    forward_noise, noise_step, noise_with, reverse_step, reverse_step_with_eps, standard_normal,
    NoisePredictor, NoiseSchedule, ScheduleKind,
};
pub use train::{evaluate_denoiser, sample_batch, train_denoiser, NoisedBatch, PretrainConfig};
pub use unet::{
    Activation, DenoiserConfig, DenoiserNet, Forward, Gradients, ParamSpec, PromptedDenoiser,
    TapShape, Taps,
};
