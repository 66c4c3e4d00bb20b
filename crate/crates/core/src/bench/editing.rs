use serde::{Deserialize, Serialize};

use super::registry::{ConceptRegistry, PromptTier};
use crate::error::Result;
use crate::pipeline::Pipeline;
use crate::stage1::{optimize_all, Destination, EditRequest, LayerEditPayload, Stage1Config};
use crate::stage2::{edit_model, estimate_covariances, CovarianceStats, EditPlan, EditReport};

/// Stage I and stage II settings of one benchmark edit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EditSettings {
    pub stage1: Stage1Config,
    pub plan: EditPlan,
    /// Scale λ of the preservation statistics `C0 = λ·E[kkᵀ]`.
    pub lambda: f64,
}

impl EditSettings {
    pub fn default_for(n_layers: usize) -> Self {
        Self { stage1: Stage1Config::default(), plan: EditPlan::default_for(n_layers), lambda: 1.0 }
    }
}

/// Requests turning each source's template prompts into the destination's.
pub fn concept_requests(
    registry: &ConceptRegistry,
    edits: &[(String, String)],
    layers: &[usize],
) -> Result<Vec<EditRequest>> {
    edits
        .iter()
        .map(|(s, d)| {
            let src = registry.concept(s)?;
            let dst = registry.concept(d)?;
            Ok(EditRequest {
                concept: s.clone(),
                subject: s.clone(),
                source_prompts: src.prompts(PromptTier::Template).to_vec(),
                destination: Destination::Prompts(dst.prompts(PromptTier::Template).to_vec()),
                layers: layers.to_vec(),
            })
        })
        .collect()
}

/// Preservation statistics over the registry corpus for every encoder layer.
pub fn corpus_covariances(pipeline: &Pipeline, registry: &ConceptRegistry, lambda: f64) -> Result<Vec<CovarianceStats>> {
    let layers: Vec<usize> = (0..pipeline.encoder.config().n_layers).collect();
    estimate_covariances(&pipeline.encoder, &pipeline.vocab, &registry.corpus(), &layers, lambda)
}

#[derive(Debug, Clone)]
pub struct EditOutcome {
    pub pipeline: Pipeline,
    pub payloads: Vec<LayerEditPayload>,
    pub report: EditReport,
}

/// Runs stage I for every request and layer of the plan, then stage II.
pub fn run_edit(
    pre: &Pipeline,
    requests: &[EditRequest],
    settings: &EditSettings,
    covariances: &[CovarianceStats],
    workers: usize,
) -> Result<EditOutcome> {
    let payloads = optimize_all(pre, requests, &settings.stage1, workers)?;
    let (pipeline, report) = apply_payloads(pre, requests, &payloads, &settings.plan, covariances)?;
    Ok(EditOutcome { pipeline, payloads, report })
}

/// Stage II only, keeping the payloads whose layer lies in the plan.
pub fn apply_payloads(
    pre: &Pipeline,
    requests: &[EditRequest],
    payloads: &[LayerEditPayload],
    plan: &EditPlan,
    covariances: &[CovarianceStats],
) -> Result<(Pipeline, EditReport)> {
    let selected: Vec<LayerEditPayload> =
        payloads.iter().filter(|p| plan.layers().contains(&p.layer)).cloned().collect();
    let (encoder, report) = edit_model(&pre.encoder, &pre.vocab, requests, &selected, plan, covariances)?;
    Ok((pre.with_encoder(encoder), report))
}

/// Number of destination concepts in [`scale_edits`].
pub const SCALE_DESTINATIONS: usize = 2;

/// `n` seeded sources drawn from the non-neutral concepts, assigned round
/// robin to two further concepts that are not edited themselves. Every
/// other concept is a holdout.
pub fn scale_edits(registry: &ConceptRegistry, n: usize, seed: u64) -> Result<Vec<(String, String)>> {
    let mut pool: Vec<&str> =
        registry.concepts().iter().map(|c| c.name.as_str()).filter(|c| *c != registry.neutral()).collect();
    if n == 0 || n + SCALE_DESTINATIONS > pool.len() {
        return Err(crate::Error::InvalidConfig(format!(
            "edit count {n} must lie in 1..={}",
            pool.len() - SCALE_DESTINATIONS
        )));
    }
    crate::tensor::Rng::new(seed).shuffle(&mut pool);
    let dest = &pool[n..n + SCALE_DESTINATIONS];
    Ok((0..n).map(|i| (pool[i].to_string(), dest[i % SCALE_DESTINATIONS].to_string())).collect())
}
