use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::covariance::CovarianceStats;
use super::update::{closed_form_update, AlphaSweepRow, EditReportEntry};
use crate::encoder::{EncoderModel, Vocabulary};
use crate::error::{Error, Result};
use crate::stage1::{EditRequest, LayerEditPayload};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EditPlan {
    pub alpha: f64,
    pub layer_lo: usize,
    /// Inclusive.
    pub layer_hi: usize,
    /// Re-extract keys on the partially edited model before each layer.
    pub recompute_keys: bool,
}

impl EditPlan {
    /// α = 0.5 on every layer except the last.
    pub fn default_for(n_layers: usize) -> Self {
        Self { alpha: 0.5, layer_lo: 0, layer_hi: n_layers.saturating_sub(2), recompute_keys: true }
    }

    pub fn layers(&self) -> std::ops::RangeInclusive<usize> {
        self.layer_lo..=self.layer_hi
    }

    pub fn validate(&self, n_layers: usize) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidConfig(format!("α must lie in (0, 1), got {}", self.alpha)));
        }
        if self.layer_lo > self.layer_hi || self.layer_hi + 1 >= n_layers {
            return Err(Error::InvalidConfig(format!(
                "layer range {}..={} must be ordered and exclude the last layer {}",
                self.layer_lo,
                self.layer_hi,
                n_layers - 1
            )));
        }
        Ok(())
    }
}

/// Report of one [`edit_model`] call, one entry per edited layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditReport {
    pub entries: Vec<EditReportEntry>,
}

impl EditReport {
    pub const CSV_HEADER: &'static str = "layer,frob_delta,edit_residual,stationarity,cond_estimate";

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for e in &self.entries {
            s.push_str(&format!(
                "{},{:e},{:e},{:e},{:e}\n",
                e.layer, e.frob_delta, e.edit_residual, e.stationarity, e.cond_estimate
            ));
        }
        s
    }
}

/// Concepts in first-appearance order.
fn concepts_of(payloads: &[LayerEditPayload]) -> Vec<&str> {
    let mut seen = Vec::new();
    for p in payloads {
        if !seen.contains(&p.concept.as_str()) {
            seen.push(p.concept.as_str());
        }
    }
    seen
}

/// Writes every payload's target value into the `W_proj` matrices, one
/// layer at a time from shallow to deep. `requests` supply the prompts used
/// to recompute keys and may be empty when `plan.recompute_keys` is off.
pub fn edit_model(
    encoder: &EncoderModel,
    vocab: &Vocabulary,
    requests: &[EditRequest],
    payloads: &[LayerEditPayload],
    plan: &EditPlan,
    covariances: &[CovarianceStats],
) -> Result<(EncoderModel, EditReport)> {
    let n_layers = encoder.config().n_layers;
    plan.validate(n_layers)?;
    if payloads.is_empty() {
        return Ok((encoder.clone(), EditReport { entries: Vec::new() }));
    }
    let by_key: HashMap<(&str, usize), &LayerEditPayload> =
        payloads.iter().map(|p| ((p.concept.as_str(), p.layer), p)).collect();
    let concepts = concepts_of(payloads);
    let reqs: HashMap<&str, &EditRequest> = requests.iter().map(|r| (r.concept.as_str(), r)).collect();
    let mut model = encoder.clone();
    let mut entries = Vec::new();
    for layer in plan.layers() {
        let cov = covariances
            .iter()
            .find(|c| c.layer == layer)
            .ok_or(Error::MissingCovariance(layer))?;
        let mut keys = Vec::with_capacity(concepts.len());
        let mut values = Vec::with_capacity(concepts.len());
        for &c in &concepts {
            let p = by_key
                .get(&(c, layer))
                .ok_or_else(|| Error::MissingPayload { concept: c.to_string(), layer })?;
            let key = if plan.recompute_keys {
                let r = reqs.get(c).ok_or_else(|| {
                    Error::InvalidRequest(format!("no request for `{c}` to recompute keys from"))
                })?;
                model.extract_key(vocab, layer, &r.source_prompts, &r.subject)?
            } else {
                p.key.clone()
            };
            keys.push(key);
            values.push(p.new_value.clone());
        }
        let k1 = Matrix::from_columns(&keys)?;
        let v1 = Matrix::from_columns(&values)?;
        let (w, entry) = closed_form_update(layer, model.w_proj(layer), &cov.c0(), &k1, &v1, plan.alpha)?;
        model = model.with_w_proj(layer, w)?;
        entries.push(entry);
    }
    Ok((model, EditReport { entries }))
}

/// Model-level α sweep: layer means of the edit and preservation residuals.
pub fn alpha_sweep(
    encoder: &EncoderModel,
    vocab: &Vocabulary,
    requests: &[EditRequest],
    payloads: &[LayerEditPayload],
    plan: &EditPlan,
    covariances: &[CovarianceStats],
    alphas: &[f64],
) -> Result<Vec<AlphaSweepRow>> {
    alphas
        .iter()
        .map(|&alpha| {
            let p = EditPlan { alpha, ..*plan };
            let (_, report) = edit_model(encoder, vocab, requests, payloads, &p, covariances)?;
            let n = report.entries.len().max(1) as f64;
            Ok(AlphaSweepRow {
                alpha,
                edit_residual: report.entries.iter().map(|e| e.edit_residual).sum::<f64>() / n,
                preservation: report.entries.iter().map(|e| e.preservation).sum::<f64>() / n,
            })
        })
        .collect()
}
