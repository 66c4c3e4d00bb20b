use serde::{Deserialize, Serialize};

use super::metrics::{mean_confidences, MetricPlan, MetricTerm, MetricValue, SamplingConfig};
use super::oracle::ConfidenceOracle;
use super::registry::{ConceptRegistry, PromptTier};
use crate::error::{Error, Result};
use crate::pipeline::Pipeline;
use crate::stage1::{Destination, EditRequest};

/// Confidence below which an alias counts as misunderstood.
pub const MISUNDERSTOOD_BELOW: f64 = 0.5;

/// Resolves `(alias, class)` pairs to the registered owner of each alias.
fn owners(registry: &ConceptRegistry, aliases: &[(String, String)]) -> Result<Vec<String>> {
    aliases
        .iter()
        .map(|(alias, class)| {
            let owner = registry.by_alias(alias)?;
            registry.concept(class)?;
            if owner.name != *class {
                return Err(Error::InvalidRequest(format!("`{alias}` is an alias of `{}`, not `{class}`", owner.name)));
            }
            Ok(owner.name.clone())
        })
        .collect()
}

/// Requests pointing each alias at its class, either through the class's
/// template prompts or through reference renderings alone.
pub fn rectification_requests(
    registry: &ConceptRegistry,
    aliases: &[(String, String)],
    layers: &[usize],
    images_only: bool,
) -> Result<Vec<EditRequest>> {
    owners(registry, aliases)?;
    aliases
        .iter()
        .map(|(alias, class)| {
            let c = registry.concept(class)?;
            let destination = if images_only {
                Destination::Images(c.render.variants())
            } else {
                Destination::Prompts(c.prompts(PromptTier::Template).to_vec())
            };
            Ok(EditRequest {
                concept: alias.clone(),
                subject: alias.clone(),
                source_prompts: c.alias_prompts(PromptTier::Template).to_vec(),
                destination,
                layers: layers.to_vec(),
            })
        })
        .collect()
}

/// `p_M(class, alias)` on the template tier for each pair.
pub fn alias_confidences(
    pipeline: &Pipeline,
    registry: &ConceptRegistry,
    oracle: &ConfidenceOracle,
    aliases: &[(String, String)],
    sampling: &SamplingConfig,
) -> Result<Vec<f64>> {
    let classes = owners(registry, aliases)?;
    classes
        .iter()
        .map(|c| {
            let prompts = registry.concept(c)?.alias_prompts(PromptTier::Template);
            Ok(mean_confidences(pipeline, oracle, prompts, sampling)?[oracle.index(c)?])
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RectifyReport {
    pub s2d_efficacy: MetricValue,
    pub s2d_generalization: MetricValue,
    pub hd: MetricValue,
    pub terms: Vec<MetricTerm>,
    pub seed: u64,
}

impl RectifyReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,value,n,seed\n");
        for (name, m) in
            [("S2D_efficacy", self.s2d_efficacy), ("S2D_generalization", self.s2d_generalization), ("HD", self.hd)]
        {
            s.push_str(&format!("{name},{},{},{}\n", m.value, m.n, self.seed));
        }
        s
    }
}

/// S2D from each alias to its class plus HD. Fails with
/// [`Error::AliasNotMisunderstood`] when the pre model already draws an
/// alias as its class.
pub fn rectify_eval(
    pre: &Pipeline,
    post: &Pipeline,
    aliases: &[(String, String)],
    registry: &ConceptRegistry,
    oracle: &ConfidenceOracle,
    sampling: &SamplingConfig,
) -> Result<RectifyReport> {
    let gate = alias_confidences(pre, registry, oracle, aliases, sampling)?;
    for ((alias, _), &confidence) in aliases.iter().zip(&gate) {
        if confidence >= MISUNDERSTOOD_BELOW {
            return Err(Error::AliasNotMisunderstood { alias: alias.clone(), confidence });
        }
    }
    let plan = MetricPlan::for_rectification(registry, &owners(registry, aliases)?)?;
    let rep = plan.evaluate(pre, post, registry, oracle, sampling)?;
    Ok(RectifyReport {
        s2d_efficacy: rep.s2d_efficacy,
        s2d_generalization: rep.s2d_generalization,
        hd: rep.hd,
        terms: rep.terms.into_iter().filter(|t| t.metric.starts_with("S2D")).collect(),
        seed: sampling.seed,
    })
}

/// Misunderstood aliases of the registry as `(alias, class)` pairs.
pub fn misunderstood_aliases(registry: &ConceptRegistry) -> Vec<(String, String)> {
    registry
        .concepts()
        .iter()
        .filter(|c| c.alias_misunderstood())
        .map(|c| (c.alias.clone(), c.name.clone()))
        .collect()
}
