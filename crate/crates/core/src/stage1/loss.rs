use std::sync::Arc;

use super::request::{Destination, EditRequest, NoiseBatchSpec};
use crate::diffusion::{denoiser_forward, sample_batch, time_embeddings, timestep_selector, ToyImage};
use crate::encoder::{subject_position, HookPrefix};
use crate::error::{Error, Result};
use crate::pipeline::Pipeline;
use crate::tensor::{GradTape, Matrix, NodeId, Rng};

/// One Monte Carlo batch of noised images for `L_noise` or `L_image`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseBatch {
    pub x_t: Matrix,
    pub timesteps: Vec<usize>,
    /// Source prompt whose hooked embedding conditions each row.
    pub sources: Vec<usize>,
    /// Regression target per row: the destination-conditioned prediction
    /// for `L_noise`, the true added noise for `L_image`.
    pub target: Matrix,
}

/// Loss values at one offset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValues {
    pub txt: Option<f64>,
    /// `L_noise` or `L_image`, depending on the destination kind.
    pub noise: Option<f64>,
    pub total: f64,
}

/// Weights of the two loss terms in the minimized total.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub txt: f64,
    pub noise: f64,
}

enum DestData {
    Prompts {
        /// Destination embedding paired with each source prompt.
        paired: Vec<Vec<f64>>,
        dest: Vec<Vec<f64>>,
        /// `(destination prompt index, image)` samples from the destination.
        pool: Vec<(usize, Vec<f64>)>,
    },
    Images(Vec<ToyImage>),
}

/// Everything about one (request, layer) pair that does not depend on δ.
pub struct Stage1Problem<'a> {
    pipeline: &'a Pipeline,
    layer: usize,
    prefixes: Vec<HookPrefix>,
    dest: DestData,
}

impl<'a> Stage1Problem<'a> {
    /// Prepares hook prefixes, destination embeddings and, for prompt
    /// destinations, a pool of `spec.pool` images sampled from them
    /// (`pool = 0` skips sampling; only the text loss is then available).
    pub fn new(pipeline: &'a Pipeline, request: &EditRequest, layer: usize, spec: &NoiseBatchSpec, seed: u64) -> Result<Self> {
        request.validate()?;
        let enc = &pipeline.encoder;
        let mut prefixes = Vec::with_capacity(request.source_prompts.len());
        for p in &request.source_prompts {
            let ids = pipeline.vocab.tokenize(p)?;
            let pos = subject_position(&pipeline.vocab, p, &request.subject)?;
            prefixes.push(enc.hook_prefix(&ids, layer, pos)?);
        }
        let dest = match &request.destination {
            Destination::Prompts(prompts) => {
                let dest: Vec<Vec<f64>> = prompts.iter().map(|p| pipeline.encode(p)).collect::<Result<_>>()?;
                let paired = pair_destinations(prefixes.len(), &dest);
                let pool = if spec.pool == 0 {
                    Vec::new()
                } else {
                    let conds: Vec<Vec<f64>> = (0..spec.pool).map(|i| dest[i % dest.len()].clone()).collect();
                    let conds = Matrix::from_rows(&conds)?;
                    let rng = Rng::new(seed).split_str("stage1-pool");
                    let steps = pipeline.schedule.steps();
                    let images = sample_batch(&pipeline.denoiser, &pipeline.schedule, &conds, steps, &rng)?;
                    images.into_iter().enumerate().map(|(i, im)| (i % dest.len(), im.into_data())).collect()
                };
                DestData::Prompts { paired, dest, pool }
            }
            Destination::Images(images) => {
                let len = pipeline.denoiser.config().image_len;
                if images.iter().any(|im| im.data().len() != len) {
                    return Err(Error::DimensionMismatch("destination image size".into()));
                }
                DestData::Images(images.clone())
            }
        };
        Ok(Self { pipeline, layer, prefixes, dest })
    }

    pub fn layer(&self) -> usize {
        self.layer
    }

    pub fn has_text_loss(&self) -> bool {
        matches!(self.dest, DestData::Prompts { .. })
    }

    /// Draws `spec.images × spec.timesteps` noised rows.
    pub fn draw_batch(&self, spec: &NoiseBatchSpec, rng: &mut Rng) -> Result<NoiseBatch> {
        let schedule = &self.pipeline.schedule;
        let n_src = self.prefixes.len();
        if let DestData::Prompts { pool, .. } = &self.dest {
            if pool.is_empty() {
                return Err(Error::InvalidRequest("no destination image pool was sampled".into()));
            }
        }
        let rows = spec.images * spec.timesteps;
        let mut xs = Vec::with_capacity(rows);
        let mut ts = Vec::with_capacity(rows);
        let mut sources = Vec::with_capacity(rows);
        let mut noises = Vec::with_capacity(rows);
        let mut dest_idx = Vec::with_capacity(rows);
        for i in 0..spec.images {
            let (d, x0) = match &self.dest {
                DestData::Prompts { pool, dest, .. } => {
                    let (d, x) = &pool[rng.below(pool.len())];
                    let src = if dest.len() == n_src { *d } else { i % n_src };
                    (Some((*d, src)), x.as_slice())
                }
                DestData::Images(images) => (None, images[rng.below(images.len())].data()),
            };
            for _ in 0..spec.timesteps {
                let t = 1 + rng.below(schedule.steps());
                let eps = rng.normal_vec(x0.len());
                xs.push(schedule.add_noise(x0, t, &eps)?);
                ts.push(t);
                noises.push(eps);
                match d {
                    Some((d, src)) => {
                        dest_idx.push(d);
                        sources.push(src);
                    }
                    None => sources.push(i % n_src),
                }
            }
        }
        let x_t = Matrix::from_rows(&xs)?;
        let target = match &self.dest {
            DestData::Prompts { dest, .. } => {
                let conds = Matrix::from_rows(&dest_idx.iter().map(|&d| dest[d].clone()).collect::<Vec<_>>())?;
                self.pipeline.denoiser.predict_batch(&x_t, &ts, &conds)?
            }
            DestData::Images(_) => Matrix::from_rows(&noises)?,
        };
        Ok(NoiseBatch { x_t, timesteps: ts, sources, target })
    }

    /// Evaluates the loss terms at `delta` and, if `grad`, the gradient of
    /// the weighted total with respect to `delta`.
    pub fn evaluate(
        &self,
        delta: &[f64],
        weights: LossWeights,
        batch: Option<&NoiseBatch>,
        grad: bool,
    ) -> Result<(LossValues, Option<Vec<f64>>)> {
        let enc = &self.pipeline.encoder;
        let d_model = enc.config().d_model;
        if delta.len() != d_model {
            return Err(Error::InvalidHook(format!("offset has dimension {}, expected {d_model}", delta.len())));
        }
        let mut tape = GradTape::new();
        let dn = tape.leaf(Matrix::row_vector(delta));
        let ew = enc.weights_on(&mut tape);
        let embs: Vec<NodeId> = self.prefixes.iter().map(|p| enc.embed_from_prefix(&mut tape, &ew, p, &dn)).collect();

        let mut terms = Vec::new();
        let txt = match &self.dest {
            DestData::Prompts { paired, .. } => {
                let parts: Vec<NodeId> = embs
                    .iter()
                    .zip(paired)
                    .map(|(&e, target)| {
                        let t = tape.constant(Matrix::row_vector(target));
                        let diff = tape.sub(e, t);
                        tape.squared_norm(diff)
                    })
                    .collect();
                let sum = tape.sum_scalars(&parts);
                let mean = tape.scale(sum, 1.0 / parts.len() as f64);
                terms.push(tape.scale(mean, weights.txt));
                Some(mean)
            }
            DestData::Images(_) => None,
        };
        let noise = match batch {
            Some(b) => {
                let dn_model = &self.pipeline.denoiser;
                let rows = b.x_t.rows();
                if b.sources.len() != rows || b.timesteps.len() != rows || b.target.shape() != b.x_t.shape() {
                    return Err(Error::DimensionMismatch("noise batch".into()));
                }
                let dw = dn_model.weights_on(&mut tape);
                let cond_rows: Vec<NodeId> = b.sources.iter().map(|&s| embs[s]).collect();
                let c = tape.concat_rows(cond_rows);
                let x = tape.constant(b.x_t.clone());
                let te = tape.constant(time_embeddings(&b.timesteps, dn_model.config().time_dim));
                let sel = tape.constant(timestep_selector(&b.timesteps, dn_model.config().timesteps));
                let out = denoiser_forward(&mut tape, &dw, &x, &te, &sel, &c);
                let target = tape.constant_shared(Arc::new(b.target.clone()));
                let diff = tape.sub(out, target);
                let sq = tape.squared_norm(diff);
                let mean = tape.scale(sq, 1.0 / rows as f64);
                terms.push(tape.scale(mean, weights.noise));
                Some(mean)
            }
            None => None,
        };
        if terms.is_empty() {
            return Err(Error::InvalidRequest("no loss term is defined for this request".into()));
        }
        let total = tape.sum_scalars(&terms);
        let values = LossValues {
            txt: txt.map(|n| tape.scalar(n)),
            noise: noise.map(|n| tape.scalar(n)),
            total: tape.scalar(total),
        };
        let g = if grad { Some(tape.backward(total).get(dn).into_data()) } else { None };
        Ok((values, g))
    }
}

/// Pairs source prompts with destination embeddings by index when the lists
/// have equal length, otherwise with the mean destination embedding.
fn pair_destinations(n_src: usize, dest: &[Vec<f64>]) -> Vec<Vec<f64>> {
    if dest.len() == n_src {
        return dest.to_vec();
    }
    let mut mean = vec![0.0; dest[0].len()];
    for d in dest {
        for (m, v) in mean.iter_mut().zip(d) {
            *m += v / dest.len() as f64;
        }
    }
    vec![mean; n_src]
}

fn hooked_request(sources: &[String], subject: &str, destination: Destination) -> EditRequest {
    EditRequest {
        concept: subject.to_string(),
        subject: subject.to_string(),
        source_prompts: sources.to_vec(),
        destination,
        layers: vec![],
    }
}

/// `mean_j ‖E_{v+δ}(p_j) − E(p̂_j)‖²`.
pub fn loss_txt(
    pipeline: &Pipeline,
    delta: &[f64],
    layer: usize,
    subject: &str,
    sources: &[String],
    destinations: &[String],
) -> Result<f64> {
    let req = hooked_request(sources, subject, Destination::Prompts(destinations.to_vec()));
    let spec = NoiseBatchSpec { pool: 0, ..Default::default() };
    let problem = Stage1Problem::new(pipeline, &req, layer, &spec, 0)?;
    let (v, _) = problem.evaluate(delta, LossWeights { txt: 1.0, noise: 0.0 }, None, false)?;
    Ok(v.txt.expect("prompt destination"))
}

/// Monte Carlo `L_noise` with a batch drawn from `seed`.
pub fn loss_noise(
    pipeline: &Pipeline,
    delta: &[f64],
    layer: usize,
    subject: &str,
    sources: &[String],
    destinations: &[String],
    spec: &NoiseBatchSpec,
    seed: u64,
) -> Result<f64> {
    let req = hooked_request(sources, subject, Destination::Prompts(destinations.to_vec()));
    let problem = Stage1Problem::new(pipeline, &req, layer, spec, seed)?;
    let batch = problem.draw_batch(spec, &mut Rng::new(seed).split_str("stage1-batch"))?;
    let (v, _) = problem.evaluate(delta, LossWeights { txt: 0.0, noise: 1.0 }, Some(&batch), false)?;
    Ok(v.noise.expect("batch given"))
}

/// Monte Carlo `L_image` with a batch drawn from `seed`.
pub fn loss_image(
    pipeline: &Pipeline,
    delta: &[f64],
    layer: usize,
    subject: &str,
    sources: &[String],
    images: &[ToyImage],
    spec: &NoiseBatchSpec,
    seed: u64,
) -> Result<f64> {
    let req = hooked_request(sources, subject, Destination::Images(images.to_vec()));
    let problem = Stage1Problem::new(pipeline, &req, layer, spec, seed)?;
    let batch = problem.draw_batch(spec, &mut Rng::new(seed).split_str("stage1-batch"))?;
    let (v, _) = problem.evaluate(delta, LossWeights { txt: 0.0, noise: 1.0 }, Some(&batch), false)?;
    Ok(v.noise.expect("batch given"))
}
