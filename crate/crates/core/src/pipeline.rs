use std::sync::Arc;

use crate::diffusion::{DenoiserModel, NoiseSchedule};
use crate::encoder::{EncoderModel, PromptEmbedding, Vocabulary};
use crate::error::Result;

/// Text encoder plus denoiser: the model `M` that edits act on. Cloning is
/// cheap; weights are shared.
#[derive(Debug, Clone, PartialEq)]
pub struct Pipeline {
    pub vocab: Arc<Vocabulary>,
    pub encoder: EncoderModel,
    pub denoiser: DenoiserModel,
    pub schedule: NoiseSchedule,
}

impl Pipeline {
    pub fn new(vocab: Vocabulary, encoder: EncoderModel, denoiser: DenoiserModel, schedule: NoiseSchedule) -> Self {
        Self { vocab: Arc::new(vocab), encoder, denoiser, schedule }
    }

    /// Same denoiser and vocabulary, different encoder.
    pub fn with_encoder(&self, encoder: EncoderModel) -> Self {
        Self { encoder, ..self.clone() }
    }

    pub fn encode(&self, prompt: &str) -> Result<PromptEmbedding> {
        self.encoder.encode(&self.vocab, prompt, None)
    }
}
