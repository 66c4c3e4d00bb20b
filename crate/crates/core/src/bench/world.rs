use serde::{Deserialize, Serialize};

use super::metrics::{confidence_table, PromptSet, SamplingConfig};
use super::oracle::ConfidenceOracle;
use super::registry::{ConceptRegistry, PromptTier};
use crate::diffusion::{
    train_denoiser, ConditionedImages, DenoiserConfig, DenoiserModel, DenoiserTrainConfig, NoiseSchedule, ToyImage,
    IMAGE_LEN,
};
use crate::encoder::{alignment_loss, Vocabulary, train_encoder, AlignmentExample, EncoderConfig, EncoderModel, EncoderTrainConfig};
use crate::error::Result;
use crate::pipeline::Pipeline;
use crate::tensor::{derive_seed, label_hash, Rng};

/// Architecture and training recipe of the toy text-to-image model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub n_heads: usize,
    pub max_seq: usize,
    pub time_dim: usize,
    pub hidden: usize,
    pub blocks: usize,
    pub encoder_train: EncoderTrainConfig,
    pub denoiser_train: DenoiserTrainConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let e = EncoderConfig::toy(0);
        let d = DenoiserConfig::toy(e.d_model);
        Self {
            n_layers: e.n_layers,
            d_model: e.d_model,
            d_ff: e.d_ff,
            n_heads: e.n_heads,
            max_seq: e.max_seq,
            time_dim: d.time_dim,
            hidden: d.hidden,
            blocks: d.blocks,
            encoder_train: EncoderTrainConfig::default(),
            denoiser_train: DenoiserTrainConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn encoder_config(&self, vocab_size: usize) -> EncoderConfig {
        EncoderConfig {
            n_layers: self.n_layers,
            d_model: self.d_model,
            d_ff: self.d_ff,
            n_heads: self.n_heads,
            max_seq: self.max_seq,
            vocab_size,
        }
    }

    pub fn denoiser_config(&self, schedule: &NoiseSchedule) -> DenoiserConfig {
        DenoiserConfig {
            image_len: IMAGE_LEN,
            timesteps: schedule.steps(),
            time_dim: self.time_dim,
            cond_dim: self.d_model,
            hidden: self.hidden,
            blocks: self.blocks,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub pipeline: Pipeline,
    /// Mean squared error per embedding coordinate after pre-training.
    pub encoder_loss: f64,
    /// Final denoiser training loss.
    pub denoiser_loss: f64,
}

/// Layer-normalized random embedding target of a concept.
pub fn concept_target(seed: u64, name: &str, d: usize) -> Vec<f64> {
    let v = Rng::new(derive_seed(seed, label_hash(name))).normal_vec(d);
    let mean = v.iter().sum::<f64>() / d as f64;
    let sd = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / d as f64).sqrt();
    v.iter().map(|x| (x - mean) / sd).collect()
}

/// `(prompt, concept whose target and images it is trained on)` for the
/// whole corpus. Misunderstood aliases point at the wrong concept.
pub fn training_pairs(registry: &ConceptRegistry) -> Vec<(String, String)> {
    let mut out = Vec::new();
    for tier in [PromptTier::Template, PromptTier::Paraphrase] {
        for c in registry.concepts() {
            out.extend(c.prompts(tier).iter().map(|p| (p.clone(), c.name.clone())));
            let bound = c.alias_bound_to.as_ref().unwrap_or(&c.name);
            out.extend(c.alias_prompts(tier).iter().map(|p| (p.clone(), bound.clone())));
        }
        for b in registry.biased_concepts() {
            let prompts = registry.prompts(&b.name, tier).expect("biased prompts");
            out.extend(prompts.iter().map(|p| (p.clone(), b.name.clone())));
        }
    }
    out
}

/// Training images of a classifiable or biased concept; biased concepts
/// repeat each attribute's renderings by its weight.
pub fn concept_images(registry: &ConceptRegistry, name: &str) -> Result<Vec<ToyImage>> {
    if let Ok(c) = registry.concept(name) {
        return Ok(c.render.variants());
    }
    let b = registry.biased(name)?;
    let mut images = Vec::new();
    for a in &b.attributes {
        let v = registry.concept(&a.concept)?.render.variants();
        for _ in 0..a.weight {
            images.extend(v.iter().cloned());
        }
    }
    Ok(images)
}

/// Pre-trains the encoder, then trains the denoiser on its frozen embeddings.
/// `vocab` must cover every registry prompt.
pub fn train_toy_model(
    registry: &ConceptRegistry,
    vocab: &Vocabulary,
    config: &ModelConfig,
    seed: u64,
) -> Result<TrainedModel> {
    let vocab = vocab.clone();
    let rng = Rng::new(seed);
    let ecfg = config.encoder_config(vocab.len());
    let encoder = EncoderModel::init(ecfg, &mut rng.split_str("encoder-init"));
    let pairs = training_pairs(registry);
    let data = pairs
        .iter()
        .map(|(p, c)| Ok(AlignmentExample { ids: vocab.tokenize(p)?, target: concept_target(seed, c, ecfg.d_model) }))
        .collect::<Result<Vec<_>>>()?;
    let (encoder, _) = train_encoder(&encoder, &data, &config.encoder_train, &rng.split_str("encoder-train"))?;
    let encoder_loss = alignment_loss(&encoder, &data)?;
    log::info!("encoder alignment loss {encoder_loss:.4}");

    let schedule = NoiseSchedule::toy();
    let conditioned = pairs
        .iter()
        .map(|(p, c)| Ok(ConditionedImages { cond: encoder.encode(&vocab, p, None)?, images: concept_images(registry, c)? }))
        .collect::<Result<Vec<_>>>()?;
    let denoiser = DenoiserModel::init(config.denoiser_config(&schedule), &schedule, &mut rng.split_str("denoiser-init"))?;
    let (denoiser, denoiser_loss) = train_denoiser(
        &denoiser,
        &schedule,
        &conditioned,
        &config.denoiser_train,
        &mut rng.split_str("denoiser-train"),
    )?;
    log::info!("denoiser loss {denoiser_loss:.4}");
    Ok(TrainedModel { pipeline: Pipeline::new(vocab, encoder, denoiser, schedule), encoder_loss, denoiser_loss })
}

/// Minimum [`training_gate`] value of a usable pre-edit model.
pub const GATE_THRESHOLD: f64 = 0.8;

/// Mean over classifiable concepts of `p_M(b, b)` on the template tier.
pub fn training_gate(
    pipeline: &Pipeline,
    registry: &ConceptRegistry,
    oracle: &ConfidenceOracle,
    sampling: &SamplingConfig,
) -> Result<f64> {
    let sets: Vec<PromptSet> =
        registry.concepts().iter().map(|c| PromptSet::Concept(c.name.clone(), PromptTier::Template)).collect();
    let table = confidence_table(pipeline, oracle, registry, &sets, sampling)?;
    let mut total = 0.0;
    for c in registry.concepts() {
        total += table[&PromptSet::Concept(c.name.clone(), PromptTier::Template)][oracle.index(&c.name)?];
    }
    Ok(total / registry.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn targets_are_layer_normalized_and_seeded() {
        let t = concept_target(3, "red-square", 32);
        let mean = t.iter().sum::<f64>() / 32.0;
        let var = t.iter().map(|x| x * x).sum::<f64>() / 32.0;
        assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-12);
        assert_eq!(t, concept_target(3, "red-square", 32));
        assert_ne!(t, concept_target(3, "red-ring", 32));
    }

    #[test]
    fn misunderstood_aliases_train_on_the_wrong_concept() {
        let r = ConceptRegistry::toy();
        let pairs = training_pairs(&r);
        assert_eq!(pairs.len(), r.corpus().len());
        assert!(pairs.contains(&("a photo of crimson-loop".into(), "green-bar".into())));
        assert!(pairs.contains(&("a photo of crimson-block".into(), "red-square".into())));
        let orb = concept_images(&r, "orb").unwrap();
        assert_eq!(orb.len(), 20);
        let red = r.concept("red-ring").unwrap().render.variants();
        assert_eq!(orb.iter().filter(|im| red.contains(im)).count(), 16);
    }
}
