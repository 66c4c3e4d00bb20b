//! Toy pixel-space diffusion model conditioned on prompt embeddings.

pub mod denoiser;
pub mod image;
mod sample;
mod schedule;
mod train;

pub use denoiser::{forward as denoiser_forward, time_embedding, time_embeddings, timestep_selector, DenoiserBatch, DenoiserConfig, DenoiserModel, DenoiserWeights};
pub use image::{Color, RenderSpec, Shape, ToyImage, IMAGE_LEN, JITTERS};
pub use sample::{sample, sample_batch, sample_rows, timestep_sequence};
pub use schedule::NoiseSchedule;
pub use train::{denoiser_loss, train_denoiser, ConditionedImages, DenoiserTrainConfig};
