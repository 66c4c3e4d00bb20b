//! Conversions between pipeline objects and checkpoint containers.

use std::sync::Arc;

use emcid::diffusion::{DenoiserConfig, DenoiserModel, NoiseSchedule};
use emcid::encoder::{EncoderConfig, EncoderModel, Vocabulary};
use emcid::stage1::{EditRequest, LayerEditPayload, LossBreakdown};
use emcid::stage2::CovarianceStats;
use emcid::tensor::{Matrix, Rng};
use emcid::Pipeline;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::checkpoint::Checkpoint;
use crate::error::{CliError, CliResult};
use crate::provenance::Provenance;

pub const MODEL: &str = "model";
pub const COVARIANCE: &str = "covariance";
pub const PAYLOADS: &str = "payloads";

fn field<T: for<'de> Deserialize<'de>>(info: &Value, key: &str) -> CliResult<T> {
    let v = info.get(key).ok_or_else(|| CliError::Format(format!("checkpoint metadata lacks `{key}`")))?;
    serde_json::from_value(v.clone()).map_err(|e| CliError::Format(format!("metadata `{key}`: {e}")))
}

/// Fills `template`'s tensors, in `named` order, from the checkpoint.
fn take_in_order<'a>(ckpt: &'a Checkpoint, names: Vec<String>) -> CliResult<impl FnMut() -> Arc<Matrix> + 'a> {
    let tensors = names.iter().map(|n| ckpt.get(n).map(|m| Arc::new(m.clone()))).collect::<CliResult<Vec<_>>>()?;
    let mut it = tensors.into_iter();
    Ok(move || it.next().expect("one tensor per name"))
}

pub fn model_checkpoint(pipeline: &Pipeline, extra: Value, provenance: &Provenance) -> Checkpoint {
    let mut info = json!({
        "encoder": pipeline.encoder.config(),
        "denoiser": pipeline.denoiser.config(),
        "schedule": pipeline.schedule,
        "vocab": pipeline.vocab.to_file_string(),
        "provenance": provenance,
    });
    if let (Value::Object(m), Value::Object(e)) = (&mut info, extra) {
        m.extend(e);
    }
    let mut c = Checkpoint::new(MODEL, provenance.seed, info);
    for (name, m) in pipeline.encoder.weights().named() {
        c.push(name, (**m).clone());
    }
    for (name, m) in pipeline.denoiser.weights().named() {
        c.push(name, (**m).clone());
    }
    c
}

pub fn load_model(ckpt: &Checkpoint) -> CliResult<Pipeline> {
    if ckpt.kind != MODEL {
        return Err(CliError::Format(format!("expected a `{MODEL}` checkpoint, found `{}`", ckpt.kind)));
    }
    let ecfg: EncoderConfig = field(&ckpt.info, "encoder")?;
    let dcfg: DenoiserConfig = field(&ckpt.info, "denoiser")?;
    let schedule: NoiseSchedule = field(&ckpt.info, "schedule")?;
    let vocab = Vocabulary::parse(&field::<String>(&ckpt.info, "vocab")?)?;
    if ecfg.d_model % ecfg.n_heads != 0 || dcfg.timesteps != schedule.steps() {
        return Err(CliError::Format("inconsistent model configuration".into()));
    }

    let template = EncoderModel::init(ecfg, &mut Rng::new(0));
    let names = template.weights().named().into_iter().map(|(n, _)| n).collect();
    let mut next = take_in_order(ckpt, names)?;
    let encoder = EncoderModel::from_weights(ecfg, template.weights().map(|_| next()))?;

    let template = DenoiserModel::init(dcfg, &schedule, &mut Rng::new(0))?;
    let names = template.weights().named().into_iter().map(|(n, _)| n).collect();
    let mut next = take_in_order(ckpt, names)?;
    let denoiser = DenoiserModel::from_weights(dcfg, template.weights().map(|_| next()))?;
    Ok(Pipeline::new(vocab, encoder, denoiser, schedule))
}

pub fn covariance_checkpoint(stats: &[CovarianceStats], provenance: &Provenance) -> Checkpoint {
    let meta: Vec<Value> =
        stats.iter().map(|s| json!({"layer": s.layer, "count": s.count, "lambda": s.lambda})).collect();
    let mut c = Checkpoint::new(COVARIANCE, provenance.seed, json!({"layers": meta, "provenance": provenance}));
    for s in stats {
        c.push(format!("cov/layer_{}", s.layer), s.second_moment.clone());
    }
    c
}

pub fn load_covariances(ckpt: &Checkpoint) -> CliResult<Vec<CovarianceStats>> {
    if ckpt.kind != COVARIANCE {
        return Err(CliError::Format(format!("expected a `{COVARIANCE}` checkpoint, found `{}`", ckpt.kind)));
    }
    #[derive(Deserialize)]
    struct Meta {
        layer: usize,
        count: usize,
        lambda: f64,
    }
    let meta: Vec<Meta> = field(&ckpt.info, "layers")?;
    meta.into_iter()
        .map(|m| {
            Ok(CovarianceStats {
                layer: m.layer,
                second_moment: ckpt.get(&format!("cov/layer_{}", m.layer))?.clone(),
                count: m.count,
                lambda: m.lambda,
            })
        })
        .collect()
}

/// Payload fields other than the four vectors.
#[derive(Serialize, Deserialize)]
struct PayloadMeta {
    concept: String,
    layer: usize,
    initial: LossBreakdown,
    last: LossBreakdown,
    trace: Vec<f64>,
}

fn payload_prefix(p: &LayerEditPayload) -> String {
    format!("stage1/{}/layer_{}", p.concept, p.layer)
}

/// Stage-I archive: requests in the metadata, vectors under `stage1/`.
pub fn payload_checkpoint(requests: &[EditRequest], payloads: &[LayerEditPayload], provenance: &Provenance) -> Checkpoint {
    let meta: Vec<Value> = payloads
        .iter()
        .map(|p| {
            serde_json::to_value(PayloadMeta {
                concept: p.concept.clone(),
                layer: p.layer,
                initial: p.initial,
                last: p.last,
                trace: p.trace.clone(),
            })
            .expect("payload metadata serializes")
        })
        .collect();
    let info = json!({"requests": requests, "payloads": meta, "provenance": provenance});
    let mut c = Checkpoint::new(PAYLOADS, provenance.seed, info);
    for p in payloads {
        let prefix = payload_prefix(p);
        c.push(format!("{prefix}/key"), Matrix::row_vector(&p.key));
        c.push(format!("{prefix}/value"), Matrix::row_vector(&p.value));
        c.push(format!("{prefix}/delta"), Matrix::row_vector(&p.delta));
        c.push(format!("{prefix}/new_value"), Matrix::row_vector(&p.new_value));
    }
    c
}

pub fn load_payloads(ckpt: &Checkpoint) -> CliResult<(Vec<EditRequest>, Vec<LayerEditPayload>)> {
    if ckpt.kind != PAYLOADS {
        return Err(CliError::Format(format!("expected a `{PAYLOADS}` checkpoint, found `{}`", ckpt.kind)));
    }
    let requests: Vec<EditRequest> = field(&ckpt.info, "requests")?;
    let meta: Vec<PayloadMeta> = field(&ckpt.info, "payloads")?;
    let payloads = meta
        .into_iter()
        .map(|m| {
            let prefix = format!("stage1/{}/layer_{}", m.concept, m.layer);
            let v = |s: &str| ckpt.get(&format!("{prefix}/{s}")).map(|t| t.data().to_vec());
            Ok(LayerEditPayload {
                key: v("key")?,
                value: v("value")?,
                delta: v("delta")?,
                new_value: v("new_value")?,
                concept: m.concept,
                layer: m.layer,
                initial: m.initial,
                last: m.last,
                trace: m.trace,
            })
        })
        .collect::<CliResult<Vec<_>>>()?;
    Ok((requests, payloads))
}
