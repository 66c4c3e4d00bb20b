use serde::{Deserialize, Serialize};

use super::editing::apply_payloads;
use super::metrics::{MetricPlan, SamplingConfig};
use super::oracle::ConfidenceOracle;
use super::registry::ConceptRegistry;
use crate::error::Result;
use crate::pipeline::Pipeline;
use crate::stage1::{EditRequest, LayerEditPayload};
use crate::stage2::{CovarianceStats, EditPlan};

/// Pre-edit model and evaluation settings shared by sweeps.
#[derive(Debug, Clone, Copy)]
pub struct Bench<'a> {
    pub pre: &'a Pipeline,
    pub registry: &'a ConceptRegistry,
    pub oracle: &'a ConfidenceOracle,
    pub sampling: SamplingConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerAblationRow {
    pub layer_lo: usize,
    pub layer_hi: usize,
    pub s2d_generalization: f64,
    pub hd: f64,
    pub f1: f64,
}

pub const LAYER_ABLATION_HEADER: &str = "range,S2D_generalization,HD,F1";

pub fn layer_ablation_csv(rows: &[LayerAblationRow]) -> String {
    let mut s = format!("{LAYER_ABLATION_HEADER}\n");
    for r in rows {
        s.push_str(&format!("{}-{},{},{},{}\n", r.layer_lo, r.layer_hi, r.s2d_generalization, r.hd, r.f1));
    }
    s
}

/// One benchmark evaluation per inclusive layer range, reusing the same
/// stage-I payloads. `template` supplies α and the key policy.
pub fn ablate_layers(
    bench: &Bench,
    edits: &[(String, String)],
    requests: &[EditRequest],
    payloads: &[LayerEditPayload],
    covariances: &[CovarianceStats],
    ranges: &[(usize, usize)],
    template: &EditPlan,
) -> Result<Vec<LayerAblationRow>> {
    if ranges.is_empty() {
        return Ok(Vec::new());
    }
    let plan = MetricPlan::for_edits(bench.registry, edits)?;
    ranges
        .iter()
        .map(|&(lo, hi)| {
            let p = EditPlan { layer_lo: lo, layer_hi: hi, ..*template };
            let (post, _) = apply_payloads(bench.pre, requests, payloads, &p, covariances)?;
            let rep = plan.evaluate(bench.pre, &post, bench.registry, bench.oracle, &bench.sampling)?;
            Ok(LayerAblationRow {
                layer_lo: lo,
                layer_hi: hi,
                s2d_generalization: rep.s2d_generalization.value,
                hd: rep.hd.value,
                f1: rep.f1,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_range_list_gives_empty_table() {
        let r = ConceptRegistry::toy();
        let (_, p) = crate::bench::metrics::tests::untrained(1);
        let o = ConfidenceOracle::from_registry(&r);
        let b = Bench { pre: &p, registry: &r, oracle: &o, sampling: SamplingConfig::default() };
        let rows = ablate_layers(&b, &[], &[], &[], &[], &[], &EditPlan::default_for(3)).unwrap();
        assert!(rows.is_empty());
        assert_eq!(layer_ablation_csv(&rows), "range,S2D_generalization,HD,F1\n");
    }
}
