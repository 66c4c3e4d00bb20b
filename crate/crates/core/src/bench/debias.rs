use serde::{Deserialize, Serialize};

use super::metrics::{image_rng, SamplingConfig};
use super::oracle::ConfidenceOracle;
use super::registry::{ConceptRegistry, PromptTier};
use crate::diffusion::sample_rows;
use crate::error::{Error, Result};
use crate::pipeline::Pipeline;
use crate::stage1::{optimize_all, Destination, EditRequest, LayerEditPayload, LossBreakdown, Stage1Config};
use crate::stage2::{edit_model, CovarianceStats, EditPlan};
use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DebiasConfig {
    pub concept: String,
    pub attributes: Vec<String>,
    /// Desired attribute ratios; sums to 1.
    pub desired: Vec<f64>,
    pub eta0: f64,
    pub max_iterations: usize,
    /// Stop once every ratio exceeds its target by at most this much.
    pub min_diff: f64,
    /// Images per prompt for each ratio estimate.
    pub samples_per_prompt: usize,
}

impl DebiasConfig {
    /// Balanced split with the toy defaults.
    pub fn balanced(concept: &str, attributes: &[&str]) -> Self {
        let p = attributes.len().max(1);
        Self {
            concept: concept.into(),
            attributes: attributes.iter().map(|a| a.to_string()).collect(),
            desired: vec![1.0 / p as f64; p],
            eta0: 1.0,
            max_iterations: 30,
            min_diff: 0.05,
            samples_per_prompt: 16,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.attributes.len();
        let sum: f64 = self.desired.iter().sum();
        if p < 2 || self.desired.len() != p || (sum - 1.0).abs() > 1e-9 || self.desired.iter().any(|r| *r < 0.0) {
            return Err(Error::InvalidConfig(format!(
                "debias needs at least two attributes and desired ratios summing to 1 (got {p}, sum {sum})"
            )));
        }
        if !(self.min_diff > 0.0) || !(self.eta0 > 0.0) || self.samples_per_prompt == 0 {
            return Err(Error::InvalidConfig("debias needs d > 0, η₀ > 0 and samples > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DebiasStep {
    pub weights: Vec<f64>,
    pub ratios: Vec<f64>,
    pub diff: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DebiasOutcome {
    /// Final attribute weights F.
    pub weights: Vec<f64>,
    /// `V*·F` per layer.
    pub values: Vec<Vec<f64>>,
    pub converged: bool,
    /// One entry per edit/restore cycle.
    pub history: Vec<DebiasStep>,
}

fn mix(values: &[Matrix], f: &[f64]) -> Result<Vec<Vec<f64>>> {
    values.iter().map(|v| v.matvec(f)).collect()
}

/// Searches attribute weights F so that editing with `V*·F` yields the
/// desired ratios. `values` holds one `d × p` matrix per layer whose columns
/// are the stage-I values of each attribute. `measure` edits a copy of the
/// model with the given per-layer values and returns the attribute ratios;
/// the copy is dropped afterwards, which restores the model. F is not
/// renormalized between updates.
pub fn debias_value(
    config: &DebiasConfig,
    values: &[Matrix],
    mut measure: impl FnMut(&[Vec<f64>]) -> Result<Vec<f64>>,
) -> Result<DebiasOutcome> {
    config.validate()?;
    let p = config.attributes.len();
    if values.iter().any(|v| v.cols() != p) {
        return Err(Error::DimensionMismatch(format!("value matrices need {p} columns")));
    }
    let m = config.max_iterations;
    let mut f = vec![1.0 / p as f64; p];
    let mut history = Vec::new();
    let mut converged = false;
    for i in 0..m {
        let ratios = measure(&mix(values, &f)?)?;
        if ratios.len() != p {
            return Err(Error::DimensionMismatch(format!("{} ratios for {p} attributes", ratios.len())));
        }
        let diff: Vec<f64> = ratios.iter().zip(&config.desired).map(|(r, d)| r - d).collect();
        let worst = diff.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        history.push(DebiasStep { weights: f.clone(), ratios, diff: diff.clone() });
        if worst <= config.min_diff {
            converged = true;
            break;
        }
        let eta = config.eta0 * (1.0 - i as f64 / m as f64);
        for (w, d) in f.iter_mut().zip(&diff) {
            *w -= eta * d;
        }
        let total: f64 = f.iter().sum();
        if !(0.5..=1.5).contains(&total) {
            log::warn!("debias weights sum to {total:.3} after iteration {i}");
        }
    }
    Ok(DebiasOutcome { values: mix(values, &f)?, weights: f, converged, history })
}

/// Normalized balance error `|F_p − 50| / 50` of a two-attribute split,
/// with `F_p` the percentage of the first attribute.
pub fn delta_p(ratios: &[f64]) -> Result<f64> {
    if ratios.len() != 2 {
        return Err(Error::InvalidConfig(format!("Δ_p needs exactly two attributes, got {}", ratios.len())));
    }
    let total = ratios[0] + ratios[1];
    if !(total > 0.0) {
        return Err(Error::RatioEstimationFailed);
    }
    Ok((100.0 * ratios[0] / total - 50.0).abs() / 50.0)
}

/// Fractions of generated images of `concept` whose oracle class is each
/// attribute. Images classified as anything else are not counted.
pub fn attribute_ratios(
    pipeline: &Pipeline,
    registry: &ConceptRegistry,
    oracle: &ConfidenceOracle,
    concept: &str,
    attributes: &[String],
    sampling: &SamplingConfig,
) -> Result<Vec<f64>> {
    let ids: Vec<usize> = attributes.iter().map(|a| oracle.index(a)).collect::<Result<_>>()?;
    let prompts = registry.prompts(concept, PromptTier::Template)?;
    let mut conds = Vec::new();
    let mut rngs = Vec::new();
    for p in prompts {
        let c = pipeline.encode(p)?;
        for i in 0..sampling.samples_per_prompt {
            conds.push(c.clone());
            rngs.push(image_rng(sampling.seed, p, i));
        }
    }
    if conds.is_empty() {
        return Err(Error::RatioEstimationFailed);
    }
    let images = sample_rows(&pipeline.denoiser, &pipeline.schedule, &Matrix::from_rows(&conds)?, sampling.steps, rngs)?;
    let mut counts = vec![0usize; ids.len()];
    for im in &images {
        let k = oracle.classify(im);
        if let Some(j) = ids.iter().position(|&i| i == k) {
            counts[j] += 1;
        }
    }
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(Error::RatioEstimationFailed);
    }
    Ok(counts.iter().map(|&c| c as f64 / total as f64).collect())
}

/// Δ_p of a two-attribute concept on generated samples.
pub fn debias_metric(
    pipeline: &Pipeline,
    registry: &ConceptRegistry,
    oracle: &ConfidenceOracle,
    concept: &str,
    attributes: &[String],
    sampling: &SamplingConfig,
) -> Result<f64> {
    if attributes.len() != 2 {
        return Err(Error::InvalidConfig("Δ_p is defined for two attributes".into()));
    }
    delta_p(&attribute_ratios(pipeline, registry, oracle, concept, attributes, sampling)?)
}

/// Stage-I values of the concept redirected to each attribute, as one
/// `d × p` matrix per layer of the plan.
pub fn attribute_values(
    pipeline: &Pipeline,
    registry: &ConceptRegistry,
    config: &DebiasConfig,
    plan: &EditPlan,
    stage1: &Stage1Config,
    workers: usize,
) -> Result<Vec<Matrix>> {
    let layers: Vec<usize> = plan.layers().collect();
    let source = registry.prompts(&config.concept, PromptTier::Template)?.to_vec();
    let requests = config
        .attributes
        .iter()
        .map(|a| {
            Ok(EditRequest {
                concept: format!("{}:{a}", config.concept),
                subject: config.concept.clone(),
                source_prompts: source.clone(),
                destination: Destination::Prompts(registry.prompts(a, PromptTier::Template)?.to_vec()),
                layers: layers.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let payloads = optimize_all(pipeline, &requests, stage1, workers)?;
    layers
        .iter()
        .map(|&l| {
            let cols: Vec<Vec<f64>> = requests
                .iter()
                .map(|r| {
                    payloads
                        .iter()
                        .find(|p| p.layer == l && p.concept == r.concept)
                        .map(|p| p.new_value.clone())
                        .ok_or_else(|| Error::MissingPayload { concept: r.concept.clone(), layer: l })
                })
                .collect::<Result<_>>()?;
            Matrix::from_columns(&cols)
        })
        .collect()
}

/// Copy of `pipeline` with the concept's value at every plan layer set to
/// `values[i]`.
pub fn edit_concept_values(
    pipeline: &Pipeline,
    registry: &ConceptRegistry,
    concept: &str,
    values: &[Vec<f64>],
    plan: &EditPlan,
    covariances: &[CovarianceStats],
) -> Result<Pipeline> {
    let prompts = registry.prompts(concept, PromptTier::Template)?.to_vec();
    let zero = LossBreakdown { txt: None, noise: None, image: None, total: 0.0 };
    let payloads = plan
        .layers()
        .zip(values)
        .map(|(l, v)| {
            let key = pipeline.encoder.extract_key(&pipeline.vocab, l, &prompts, concept)?;
            let value = pipeline.encoder.read_value(l, &key)?;
            Ok(LayerEditPayload {
                concept: concept.into(),
                layer: l,
                delta: v.iter().zip(&value).map(|(a, b)| a - b).collect(),
                key,
                value,
                new_value: v.clone(),
                initial: zero,
                last: zero,
                trace: Vec::new(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let request = EditRequest {
        concept: concept.into(),
        subject: concept.into(),
        source_prompts: prompts.clone(),
        destination: Destination::Prompts(prompts),
        layers: plan.layers().collect(),
    };
    let (encoder, _) = edit_model(&pipeline.encoder, &pipeline.vocab, &[request], &payloads, plan, covariances)?;
    Ok(pipeline.with_encoder(encoder))
}

/// Synthetic model whose attribute ratios respond linearly to the weights:
/// `R(F) = base + gain·(F − mean(F))`. Useful for checking the search.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearResponder {
    /// Ratios at uniform weights.
    pub base: Vec<f64>,
    pub gain: f64,
}

impl LinearResponder {
    /// Identity value matrix, so the edited value equals F.
    pub fn values(p: usize) -> Vec<Matrix> {
        vec![Matrix::identity(p)]
    }

    pub fn ratios(&self, f: &[f64]) -> Vec<f64> {
        let mean = f.iter().sum::<f64>() / f.len() as f64;
        self.base.iter().zip(f).map(|(b, w)| b + self.gain * (w - mean)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(m: usize) -> DebiasConfig {
        DebiasConfig { max_iterations: m, ..DebiasConfig::balanced("orb", &["red-ring", "blue-ring"]) }
    }

    fn values() -> Vec<Matrix> {
        vec![Matrix::from_columns(&[vec![1.0, 0.0, 2.0], vec![3.0, 4.0, 0.0]]).unwrap()]
    }

    #[test]
    fn zero_iterations_return_the_uniform_mean() {
        let mut calls = 0;
        let out = debias_value(&cfg(0), &values(), |_| {
            calls += 1;
            Ok(vec![0.5, 0.5])
        })
        .unwrap();
        assert_eq!(calls, 0);
        assert_eq!(out.values, vec![vec![2.0, 2.0, 1.0]]);
        assert!(!out.converged);
    }

    #[test]
    fn immediate_convergence_uses_one_cycle() {
        let mut calls = 0;
        let out = debias_value(&cfg(30), &values(), |_| {
            calls += 1;
            Ok(vec![0.52, 0.48])
        })
        .unwrap();
        assert_eq!(calls, 1);
        assert!(out.converged);
        assert_eq!(out.values, vec![vec![2.0, 2.0, 1.0]]);
    }

    #[test]
    fn linear_response_converges() {
        let r = LinearResponder { base: vec![0.8, 0.2], gain: 0.6 };
        let out = debias_value(&cfg(30), &LinearResponder::values(2), |v| Ok(r.ratios(&v[0]))).unwrap();
        assert!(out.converged);
        assert!(out.history.len() <= 30);
        assert!(out.history.last().unwrap().diff.iter().all(|d| *d <= 0.05));
        assert!(out.history.len() > 1);
    }

    #[test]
    fn delta_p_definition() {
        assert_eq!(delta_p(&[0.5, 0.5]).unwrap(), 0.0);
        assert_eq!(delta_p(&[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(delta_p(&[0.0, 1.0]).unwrap(), 1.0);
        assert_eq!(delta_p(&[0.0, 0.0]), Err(Error::RatioEstimationFailed));
        assert!(delta_p(&[1.0]).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(cfg(3).validate().is_ok());
        let mut c = cfg(3);
        c.desired = vec![0.7, 0.7];
        assert!(c.validate().is_err());
        let c = DebiasConfig::balanced("orb", &["red-ring"]);
        assert!(c.validate().is_err());
    }
}
