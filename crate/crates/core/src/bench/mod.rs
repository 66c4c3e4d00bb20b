//! Toy concept-editing benchmark.

mod ablation;
mod debias;
mod editing;
mod metrics;
mod oracle;
mod rectify;
mod registry;
mod world;

pub use ablation::{ablate_layers, layer_ablation_csv, Bench, LayerAblationRow, LAYER_ABLATION_HEADER};
pub use debias::{
    attribute_ratios, attribute_values, debias_metric, debias_value, delta_p, edit_concept_values, DebiasConfig,
    DebiasOutcome, DebiasStep, LinearResponder,
};
pub use editing::{apply_payloads, concept_requests, corpus_covariances, scale_edits, run_edit, EditOutcome, EditSettings};
pub use metrics::{
    compute_metrics, confidence_table, gen_confidence, holdouts, image_rng, mean_confidences, MetricPlan, MetricTerm,
    MetricValue, MetricsReport, PromptSet, SamplingConfig, Side,
};
pub use oracle::ConfidenceOracle;
pub use rectify::{
    alias_confidences, misunderstood_aliases, rectification_requests, rectify_eval, RectifyReport, MISUNDERSTOOD_BELOW,
};
pub use registry::{AttributeShare, BiasedConcept, BiasedEntry, Concept, ConceptEntry, ConceptRegistry, PromptTier, RegistryManifest};
pub use world::{
    concept_images, concept_target, train_toy_model, training_gate, training_pairs, ModelConfig, TrainedModel, GATE_THRESHOLD,
};
