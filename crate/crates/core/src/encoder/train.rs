use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::model::{embed, readout, run_layers, EncoderModel};
use crate::error::{Error, Result};
use crate::tensor::{Adam, GradTape, Matrix, Rng};

/// Pre-training recipe: Adam on the squared distance between each prompt's
/// embedding and the prototype vector of its concept.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Number of gradient shards evaluated in parallel; results do not
    /// depend on the worker count.
    pub shards: usize,
}

impl Default for EncoderTrainConfig {
    fn default() -> Self {
        Self { steps: 600, batch_size: 32, learning_rate: 3e-3, shards: 8 }
    }
}

/// One training example: token ids and the embedding it should produce.
#[derive(Debug, Clone)]
pub struct AlignmentExample {
    pub ids: Vec<u32>,
    pub target: Vec<f64>,
}

/// Returns the summed squared error and per-parameter gradients for a shard.
fn shard_gradients(model: &EncoderModel, batch: &[&AlignmentExample]) -> (f64, Vec<Matrix>) {
    let cfg = *model.config();
    let mut tape = GradTape::new();
    let w = model.weights().map(|m| tape.leaf_shared(Arc::clone(m)));
    let mut losses = Vec::with_capacity(batch.len());
    for ex in batch {
        let x = embed(&mut tape, &w, &cfg, &ex.ids);
        let x = run_layers(&mut tape, &w, &cfg, x, 0);
        let e = readout(&mut tape, &w, &x, ex.ids.len() - 1);
        let t = tape.constant(Matrix::row_vector(&ex.target));
        let diff = tape.sub(e, t);
        losses.push(tape.squared_norm(diff));
    }
    let total = tape.sum_scalars(&losses);
    let value = tape.scalar(total);
    let grads = tape.backward(total);
    let g = w.named().into_iter().map(|(_, id)| grads.get(*id)).collect();
    (value, g)
}

/// Trains the encoder; returns the model and the final mean squared error
/// per embedding coordinate.
pub fn train_encoder(
    model: &EncoderModel,
    data: &[AlignmentExample],
    config: &EncoderTrainConfig,
    rng: &Rng,
) -> Result<(EncoderModel, f64)> {
    if data.is_empty() {
        return Err(Error::InvalidConfig("empty encoder training set".into()));
    }
    let d = model.config().d_model;
    let mut params: Vec<Matrix> =
        model.weights().named().into_iter().map(|(_, m)| (**m).clone()).collect();
    let names: Vec<String> = model.weights().named().into_iter().map(|(n, _)| n).collect();
    let mut opt = Adam::new(params.iter().map(Matrix::shape), config.learning_rate);
    let mut current = model.clone();
    let mut last = f64::NAN;
    for step in 0..config.steps {
        let mut r = rng.split(step as u64);
        let batch: Vec<&AlignmentExample> =
            (0..config.batch_size.min(data.len())).map(|_| &data[r.below(data.len())]).collect();
        let shard_len = batch.len().div_ceil(config.shards.max(1));
        let parts: Vec<(f64, Vec<Matrix>)> =
            batch.par_chunks(shard_len).map(|chunk| shard_gradients(&current, chunk)).collect();
        let mut loss = 0.0;
        let mut grads: Vec<Matrix> = params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
        for (l, g) in parts {
            loss += l;
            for (acc, gi) in grads.iter_mut().zip(&g) {
                acc.add_assign(gi);
            }
        }
        let norm = 1.0 / (batch.len() * d) as f64;
        for g in &mut grads {
            *g = g.scale(norm);
        }
        last = loss * norm;
        if !last.is_finite() {
            return Err(Error::DivergedTraining(step));
        }
        // cosine decay to 10% of the base rate
        let progress = step as f64 / config.steps.max(1) as f64;
        opt.set_lr(config.learning_rate * (0.1 + 0.9 * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())));
        opt.update(params.iter_mut(), &grads);
        current = rebuild(model, &names, &params)?;
    }
    Ok((current, last))
}

fn rebuild(model: &EncoderModel, names: &[String], params: &[Matrix]) -> Result<EncoderModel> {
    let mut it = params.iter().zip(names);
    let weights = model.weights().map(|_| {
        let (p, _) = it.next().expect("parameter count");
        Arc::new(p.clone())
    });
    EncoderModel::from_weights(*model.config(), weights)
}

/// Mean squared error per coordinate of the current model on `data`.
pub fn alignment_loss(model: &EncoderModel, data: &[AlignmentExample]) -> Result<f64> {
    let d = model.config().d_model as f64;
    let mut total = 0.0;
    for ex in data {
        let e = model.encode_ids(&ex.ids, None)?;
        total += e.iter().zip(&ex.target).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / d;
    }
    Ok(total / data.len() as f64)
}
