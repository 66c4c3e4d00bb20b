use rayon::prelude::*;

use super::loss::{LossValues, LossWeights, Stage1Problem};
use super::request::{Destination, EditRequest, LayerEditPayload, LossBreakdown, Objective, Stage1Config};
use crate::error::{Error, Result};
use crate::pipeline::Pipeline;
use crate::tensor::{derive_seed, label_hash, Rng};

fn loss_weights(request: &EditRequest, config: &Stage1Config) -> Result<LossWeights> {
    Ok(match (&request.destination, config.objective) {
        (Destination::Prompts(_), Objective::Hybrid) => LossWeights { txt: config.lambda_s, noise: 1.0 },
        (Destination::Prompts(_), Objective::Text) => LossWeights { txt: 1.0, noise: 0.0 },
        (Destination::Prompts(_), Objective::Noise) => LossWeights { txt: 0.0, noise: 1.0 },
        (Destination::Images(_), Objective::Text) => {
            return Err(Error::InvalidRequest(format!("{}: text loss needs destination prompts", request.concept)))
        }
        (Destination::Images(_), _) => LossWeights { txt: 0.0, noise: 1.0 },
    })
}

/// Seed of one (concept, layer) optimization; independent of the order in
/// which requests are processed.
pub fn payload_seed(seed: u64, concept: &str, layer: usize) -> u64 {
    derive_seed(derive_seed(seed, label_hash(concept)), layer as u64)
}

fn breakdown(values: LossValues, is_image: bool) -> LossBreakdown {
    LossBreakdown {
        txt: values.txt,
        noise: if is_image { None } else { values.noise },
        image: if is_image { values.noise } else { None },
        total: values.total,
    }
}

/// Optimizes the value offset δ for one layer by plain gradient descent
/// from zero.
pub fn optimize_value(
    pipeline: &Pipeline,
    request: &EditRequest,
    layer: usize,
    config: &Stage1Config,
) -> Result<LayerEditPayload> {
    config.validate()?;
    request.validate()?;
    let n_layers = pipeline.encoder.config().n_layers;
    if layer >= n_layers {
        return Err(Error::InvalidHook(format!("layer {layer} >= {n_layers}")));
    }
    let weights = loss_weights(request, config)?;
    if weights.txt > 0.0 && layer == n_layers - 1 {
        return Err(Error::LastLayerWithTextLoss(layer));
    }
    let is_image = matches!(request.destination, Destination::Images(_));
    let seed = payload_seed(config.seed, &request.concept, layer);
    let needs_batch = weights.noise > 0.0;
    let mut spec = config.batch;
    if !needs_batch {
        spec.pool = 0;
    }
    let problem = Stage1Problem::new(pipeline, request, layer, &spec, seed)?;
    let root = Rng::new(seed);
    let eval_batch = if needs_batch { Some(problem.draw_batch(&spec, &mut root.split_str("stage1-eval"))?) } else { None };
    let fixed_batch = if needs_batch && spec.fixed { Some(problem.draw_batch(&spec, &mut root.split_str("stage1-batch"))?) } else { None };

    let d_model = pipeline.encoder.config().d_model;
    let mut delta = vec![0.0; d_model];
    let (initial, _) = problem.evaluate(&delta, weights, eval_batch.as_ref(), false)?;
    let mut trace = Vec::with_capacity(config.steps);
    let step_rng = root.split_str("stage1-steps");
    for step in 0..config.steps {
        let fresh;
        let batch = match (&fixed_batch, needs_batch) {
            (Some(b), _) => Some(b),
            (None, true) => {
                fresh = problem.draw_batch(&spec, &mut step_rng.split(step as u64))?;
                Some(&fresh)
            }
            (None, false) => None,
        };
        let (values, grad) = problem.evaluate(&delta, weights, batch, true)?;
        let grad = grad.expect("gradient requested");
        if !values.total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::DivergedOptimization(step));
        }
        trace.push(values.total);
        for (d, g) in delta.iter_mut().zip(&grad) {
            *d -= config.learning_rate * g;
        }
    }
    let (last, _) = problem.evaluate(&delta, weights, eval_batch.as_ref(), false)?;
    if !last.total.is_finite() {
        return Err(Error::DivergedOptimization(config.steps));
    }

    let key = pipeline.encoder.extract_key(&pipeline.vocab, layer, &request.source_prompts, &request.subject)?;
    let value = pipeline.encoder.read_value(layer, &key)?;
    let new_value: Vec<f64> = value.iter().zip(&delta).map(|(v, d)| v + d).collect();
    let delta = new_value.iter().zip(&value).map(|(n, v)| n - v).collect();
    Ok(LayerEditPayload {
        concept: request.concept.clone(),
        layer,
        key,
        value,
        delta,
        new_value,
        initial: breakdown(initial, is_image),
        last: breakdown(last, is_image),
        trace,
    })
}

/// Runs every (request, layer) pair. Pairs are independent; the output order
/// follows the requests and their layer lists regardless of `workers`.
pub fn optimize_all(
    pipeline: &Pipeline,
    requests: &[EditRequest],
    config: &Stage1Config,
    workers: usize,
) -> Result<Vec<LayerEditPayload>> {
    let jobs: Vec<(&EditRequest, usize)> =
        requests.iter().flat_map(|r| r.layers.iter().map(move |&l| (r, l))).collect();
    let run = || jobs.par_iter().map(|(r, l)| optimize_value(pipeline, r, *l, config)).collect::<Result<Vec<_>>>();
    if workers == 0 {
        return Err(Error::InvalidConfig("worker count must be positive".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?
        .install(run)
}
