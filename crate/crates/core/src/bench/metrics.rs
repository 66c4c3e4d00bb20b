use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::oracle::ConfidenceOracle;
use super::registry::{ConceptRegistry, PromptTier};
use crate::diffusion::sample_rows;
use crate::error::{Error, Result};
use crate::pipeline::Pipeline;
use crate::tensor::{derive_seed, label_hash, Matrix, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingConfig {
    /// Images per prompt; the toy tiers have 4 prompts, so 4 gives 16 per cell.
    pub samples_per_prompt: usize,
    pub steps: usize,
    pub seed: u64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self { samples_per_prompt: 4, steps: 50, seed: 0 }
    }
}

/// Which prompts generate a set of images.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PromptSet {
    /// Canonical prompts of a classifiable or biased concept.
    Concept(String, PromptTier),
    /// Alias prompts of the named concept.
    Alias(String, PromptTier),
}

impl PromptSet {
    pub fn prompts<'r>(&self, registry: &'r ConceptRegistry) -> Result<&'r [String]> {
        let p = match self {
            PromptSet::Concept(c, tier) => registry.prompts(c, *tier)?,
            PromptSet::Alias(c, tier) => registry.concept(c)?.alias_prompts(*tier),
        };
        if p.is_empty() {
            let (PromptSet::Concept(c, _) | PromptSet::Alias(c, _)) = self;
            return Err(Error::EmptyPromptTier(c.clone()));
        }
        Ok(p)
    }
}

/// Noise stream of the `i`-th image drawn for `prompt`. Shared by every
/// model evaluated under the same seed.
pub fn image_rng(seed: u64, prompt: &str, i: usize) -> Rng {
    Rng::new(derive_seed(seed, label_hash(prompt))).split(i as u64)
}

/// Mean oracle probability vector over `samples_per_prompt` images per prompt.
pub fn mean_confidences(
    pipeline: &Pipeline,
    oracle: &ConfidenceOracle,
    prompts: &[String],
    sampling: &SamplingConfig,
) -> Result<Vec<f64>> {
    let n = sampling.samples_per_prompt;
    if n == 0 || prompts.is_empty() {
        return Err(Error::InvalidConfig("confidence estimate needs prompts and samples".into()));
    }
    let mut conds = Vec::with_capacity(prompts.len() * n);
    let mut rngs = Vec::with_capacity(prompts.len() * n);
    for p in prompts {
        let c = pipeline.encode(p)?;
        for i in 0..n {
            conds.push(c.clone());
            rngs.push(image_rng(sampling.seed, p, i));
        }
    }
    let images = sample_rows(&pipeline.denoiser, &pipeline.schedule, &Matrix::from_rows(&conds)?, sampling.steps, rngs)?;
    let mut acc = vec![0.0; oracle.classes().len()];
    for im in &images {
        for (a, p) in acc.iter_mut().zip(oracle.probabilities(im)) {
            *a += p;
        }
    }
    let total = images.len() as f64;
    Ok(acc.into_iter().map(|a| a / total).collect())
}

/// `p_M(a, b)`: mean confidence that images generated from `b`'s prompts show `a`.
#[allow(clippy::too_many_arguments)]
pub fn gen_confidence(
    pipeline: &Pipeline,
    oracle: &ConfidenceOracle,
    registry: &ConceptRegistry,
    a: &str,
    b: &str,
    tier: PromptTier,
    sampling: &SamplingConfig,
) -> Result<f64> {
    let ia = oracle.index(a)?;
    let prompts = PromptSet::Concept(b.to_string(), tier).prompts(registry)?;
    Ok(mean_confidences(pipeline, oracle, prompts, sampling)?[ia])
}

/// Mean confidence vectors for every prompt set, evaluated in parallel.
/// Output order follows `sets`.
pub fn confidence_table(
    pipeline: &Pipeline,
    oracle: &ConfidenceOracle,
    registry: &ConceptRegistry,
    sets: &[PromptSet],
    sampling: &SamplingConfig,
) -> Result<BTreeMap<PromptSet, Vec<f64>>> {
    let rows = sets
        .par_iter()
        .map(|s| mean_confidences(pipeline, oracle, s.prompts(registry)?, sampling).map(|v| (s.clone(), v)))
        .collect::<Result<Vec<_>>>()?;
    Ok(rows.into_iter().collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Side {
    Pre,
    Post,
}

/// One metric term: confidences of `class` on `set` before and after.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricTerm {
    pub metric: String,
    pub concept: String,
    pub class: String,
    pub pre: f64,
    pub post: f64,
    pub value: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricValue {
    pub value: f64,
    /// Images generated per model for this metric.
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub sf: Option<MetricValue>,
    pub s2d_efficacy: MetricValue,
    pub s2d_generalization: MetricValue,
    pub al2d: Option<MetricValue>,
    pub hd: MetricValue,
    pub f1: f64,
    pub delta_p: Option<MetricValue>,
    pub terms: Vec<MetricTerm>,
    pub samples_per_prompt: usize,
    pub seed: u64,
}

impl MetricsReport {
    pub const CSV_HEADER: &'static str = "metric,value,n,seed";

    /// `(metric, value, n)` rows in fixed order; omitted metrics are skipped.
    pub fn rows(&self) -> Vec<(&'static str, f64, usize)> {
        let mut out = Vec::new();
        let mut push = |name, m: Option<MetricValue>| {
            if let Some(m) = m {
                out.push((name, m.value, m.n));
            }
        };
        push("SF", self.sf);
        push("S2D_efficacy", Some(self.s2d_efficacy));
        push("S2D_generalization", Some(self.s2d_generalization));
        push("AL2D", self.al2d);
        push("HD", Some(self.hd));
        push("F1", Some(MetricValue { value: self.f1, n: self.s2d_generalization.n + self.hd.n }));
        push("delta_p", self.delta_p);
        out
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::CSV_HEADER);
        for (name, value, n) in self.rows() {
            s.push_str(&format!("{name},{value},{n},{}\n", self.seed));
        }
        s
    }

    /// Per-term breakdown as CSV.
    pub fn terms_csv(&self) -> String {
        let mut s = String::from("metric,concept,class,pre,post,value\n");
        for t in &self.terms {
            s.push_str(&format!("{},{},{},{},{},{}\n", t.metric, t.concept, t.class, t.pre, t.post, t.value));
        }
        s
    }
}

/// Registry concepts that are neither sources nor destinations.
pub fn holdouts(registry: &ConceptRegistry, edits: &[(String, String)]) -> Result<Vec<String>> {
    let mut used = BTreeSet::new();
    for (s, d) in edits {
        registry.concept(s)?;
        registry.concept(d)?;
        used.insert(s.as_str());
        used.insert(d.as_str());
    }
    let h: Vec<String> =
        registry.concepts().iter().filter(|c| !used.contains(c.name.as_str())).map(|c| c.name.clone()).collect();
    if h.is_empty() {
        return Err(Error::NoHoldoutConcepts);
    }
    Ok(h)
}

/// What a metric report needs from the models, independent of how the
/// confidences are obtained.
pub struct MetricPlan {
    pub edits: Vec<(String, String)>,
    pub holdouts: Vec<String>,
    /// Sources whose aliases enter AL2D; `None` omits AL2D and SF.
    pub alias_sources: Option<Vec<String>>,
    /// Generate source images from each source's alias prompts instead of
    /// its canonical prompts (rectification).
    pub sources_are_aliases: bool,
}

impl MetricPlan {
    pub fn for_edits(registry: &ConceptRegistry, edits: &[(String, String)]) -> Result<Self> {
        let holdouts = holdouts(registry, edits)?;
        let alias_sources = edits
            .iter()
            .filter(|(s, _)| registry.concept(s).map(|c| !c.alias_misunderstood()).unwrap_or(false))
            .map(|(s, _)| s.clone())
            .collect();
        Ok(Self { edits: edits.to_vec(), holdouts, alias_sources: Some(alias_sources), sources_are_aliases: false })
    }

    /// S2D and HD only, with each class's alias prompts as the source.
    pub fn for_rectification(registry: &ConceptRegistry, classes: &[String]) -> Result<Self> {
        let edits: Vec<(String, String)> = classes.iter().map(|c| (c.clone(), c.clone())).collect();
        let holdouts = holdouts(registry, &edits)?;
        Ok(Self { edits, holdouts, alias_sources: None, sources_are_aliases: true })
    }

    fn source_set(&self, concept: &str, tier: PromptTier) -> PromptSet {
        if self.sources_are_aliases {
            PromptSet::Alias(concept.to_string(), tier)
        } else {
            PromptSet::Concept(concept.to_string(), tier)
        }
    }

    /// Every prompt set the plan reads.
    pub fn prompt_sets(&self) -> Vec<PromptSet> {
        let mut sets = BTreeSet::new();
        for (s, _) in &self.edits {
            sets.insert(self.source_set(s, PromptTier::Template));
            sets.insert(self.source_set(s, PromptTier::Paraphrase));
        }
        for s in self.alias_sources.iter().flatten() {
            sets.insert(PromptSet::Alias(s.clone(), PromptTier::Paraphrase));
        }
        for h in &self.holdouts {
            sets.insert(PromptSet::Concept(h.clone(), PromptTier::Paraphrase));
        }
        sets.into_iter().collect()
    }

    /// Evaluates the metric formulas. `p(side, class, set)` is the mean
    /// confidence of `class` on images generated from `set`; `images(set)`
    /// counts the images behind one such value.
    pub fn assemble(
        &self,
        p: impl Fn(Side, &str, &PromptSet) -> Result<f64>,
        images: impl Fn(&PromptSet) -> usize,
        samples_per_prompt: usize,
        seed: u64,
    ) -> Result<MetricsReport> {
        let mut terms = Vec::new();
        let mut metric = |name: &str, items: &[(String, String, PromptSet)], sign: f64| -> Result<MetricValue> {
            let mut sum = 0.0;
            let mut n = 0;
            for (concept, class, set) in items {
                let pre = p(Side::Pre, class, set)?;
                let post = p(Side::Post, class, set)?;
                let value = sign * (post - pre);
                sum += value;
                n += images(set);
                terms.push(MetricTerm {
                    metric: name.to_string(),
                    concept: concept.clone(),
                    class: class.clone(),
                    pre,
                    post,
                    value,
                });
            }
            let value = if items.is_empty() { 0.0 } else { sum / items.len() as f64 };
            Ok(MetricValue { value, n })
        };
        let set = |c: &str, tier| PromptSet::Concept(c.to_string(), tier);
        let sf_items: Vec<_> =
            self.edits.iter().map(|(s, _)| (s.clone(), s.clone(), set(s, PromptTier::Template))).collect();
        let s2d =
            |tier| -> Vec<_> { self.edits.iter().map(|(s, d)| (s.clone(), d.clone(), self.source_set(s, tier))).collect() };
        let sf = match self.alias_sources {
            Some(_) => Some(metric("SF", &sf_items, -1.0)?),
            None => None,
        };
        let s2d_efficacy = metric("S2D_efficacy", &s2d(PromptTier::Template), 1.0)?;
        let s2d_generalization = metric("S2D_generalization", &s2d(PromptTier::Paraphrase), 1.0)?;
        let al2d = match &self.alias_sources {
            Some(srcs) => {
                let items: Vec<_> = self
                    .edits
                    .iter()
                    .filter(|(s, _)| srcs.contains(s))
                    .map(|(s, d)| (s.clone(), d.clone(), PromptSet::Alias(s.clone(), PromptTier::Paraphrase)))
                    .collect();
                Some(metric("AL2D", &items, 1.0)?)
            }
            None => None,
        };
        let hd_items: Vec<_> =
            self.holdouts.iter().map(|h| (h.clone(), h.clone(), set(h, PromptTier::Paraphrase))).collect();
        let hd = metric("HD", &hd_items, 1.0)?;
        Ok(MetricsReport {
            sf,
            s2d_efficacy,
            s2d_generalization,
            al2d,
            hd,
            f1: 0.5 * (s2d_generalization.value + hd.value),
            delta_p: None,
            terms,
            samples_per_prompt,
            seed,
        })
    }

    /// Generates the images on both models and evaluates the plan.
    pub fn evaluate(
        &self,
        pre: &Pipeline,
        post: &Pipeline,
        registry: &ConceptRegistry,
        oracle: &ConfidenceOracle,
        sampling: &SamplingConfig,
    ) -> Result<MetricsReport> {
        let sets = self.prompt_sets();
        let pre_t = confidence_table(pre, oracle, registry, &sets, sampling)?;
        // Unchanged models share seeds, so the post table would be identical.
        let post_t = if pre == post { pre_t.clone() } else { confidence_table(post, oracle, registry, &sets, sampling)? };
        let lookup = |side: Side, class: &str, set: &PromptSet| -> Result<f64> {
            let table = if side == Side::Pre { &pre_t } else { &post_t };
            Ok(table[set][oracle.index(class)?])
        };
        let images = |set: &PromptSet| set.prompts(registry).map(|p| p.len()).unwrap_or(0) * sampling.samples_per_prompt;
        self.assemble(lookup, images, sampling.samples_per_prompt, sampling.seed)
    }
}

/// SF, S2D (template and paraphrase tiers), AL2D and HD for a batch of
/// `(source, destination)` edits.
pub fn compute_metrics(
    pre: &Pipeline,
    post: &Pipeline,
    edits: &[(String, String)],
    registry: &ConceptRegistry,
    oracle: &ConfidenceOracle,
    sampling: &SamplingConfig,
) -> Result<MetricsReport> {
    MetricPlan::for_edits(registry, edits)?.evaluate(pre, post, registry, oracle, sampling)
}
