//! Small random models for unit tests.

use crate::diffusion::{DenoiserConfig, DenoiserModel, NoiseSchedule};
use crate::encoder::{EncoderConfig, EncoderModel, Vocabulary};
use crate::pipeline::Pipeline;
use crate::tensor::Rng;

pub(crate) const WORDS: [&str; 10] =
    ["a", "photo", "of", "the", "red-square", "blue-ring", "picture", "drawing", "green-bar", "shown"];

pub(crate) fn tiny_pipeline(seed: u64) -> Pipeline {
    let vocab = Vocabulary::new(WORDS).unwrap();
    let cfg = EncoderConfig { n_layers: 3, d_model: 8, d_ff: 16, n_heads: 2, max_seq: 8, vocab_size: vocab.len() };
    let mut rng = Rng::new(seed);
    let encoder = EncoderModel::init(cfg, &mut rng);
    let schedule = NoiseSchedule::toy();
    let dcfg = DenoiserConfig { image_len: 192, timesteps: 50, time_dim: 4, cond_dim: 8, hidden: 12, blocks: 1 };
    let denoiser = DenoiserModel::init(dcfg, &schedule, &mut rng).unwrap();
    Pipeline::new(vocab, encoder, denoiser, schedule)
}

pub(crate) fn prompts(items: &[&str]) -> Vec<String> {
    items.iter().map(|s| s.to_string()).collect()
}
