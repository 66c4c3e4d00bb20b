//! Toy causal transformer text encoder with MLP hook points.

mod model;
mod train;
mod vocab;

pub use model::{
    subject_position, EncoderConfig, EncoderModel, EncoderWeights, HookPrefix, HookSpec, LayerWeights,
    PromptEmbedding, Trace,
};
pub use train::{alignment_loss, train_encoder, AlignmentExample, EncoderTrainConfig};
pub use vocab::{normalize_prompt, Vocabulary, BOS, EOS, PAD};
