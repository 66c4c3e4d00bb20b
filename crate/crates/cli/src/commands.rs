//! Subcommand implementations. Every command reads its inputs, writes new
//! files under the output directory and never touches its inputs.

use std::path::{Path, PathBuf};

use emcid::bench::{
    ablate_layers, alias_confidences, apply_payloads, attribute_ratios, attribute_values, compute_metrics,
    concept_requests, debias_value, delta_p, edit_concept_values, layer_ablation_csv, misunderstood_aliases,
    rectification_requests, rectify_eval, scale_edits, train_toy_model, training_gate, Bench, ConceptRegistry,
    ConfidenceOracle, DebiasConfig, GATE_THRESHOLD,
};
use emcid::encoder::Vocabulary;
use emcid::stage1::{optimize_all, EditRequest, LayerEditPayload};
use emcid::stage2::{alpha_sweep, estimate_covariances, CovarianceStats, EditReport};
use emcid::Pipeline;
use serde_json::{json, Value};

use crate::checkpoint::Checkpoint;
use crate::config::LoadedConfig;
use crate::error::{CliError, CliResult};
use crate::provenance::{blob_hash, Provenance};
use crate::requests::{load_edits, load_requests};
use crate::store;

pub const MODEL_FILE: &str = "model.ckpt";
pub const COVARIANCE_FILE: &str = "covariance.ckpt";
pub const PAYLOAD_FILE: &str = "stage1/payloads.ckpt";

pub struct Context {
    pub loaded: LoadedConfig,
    pub out: PathBuf,
    pub workers: usize,
    inputs: Vec<PathBuf>,
}

fn canonical(p: &Path) -> PathBuf {
    std::fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf())
}

impl Context {
    pub fn new(loaded: LoadedConfig, out: Option<PathBuf>, workers: usize) -> Self {
        let out = out.unwrap_or_else(|| loaded.out_dir());
        let inputs = vec![loaded.vocab_path(), loaded.registry_path(), loaded.corpus_path()];
        Self { loaded, out, workers, inputs }
    }

    fn provenance(&self, command: &str) -> Provenance {
        Provenance::new(command, self.loaded.config.seed, self.loaded.config.hash())
    }

    fn read(&mut self, path: &Path) -> CliResult<Vec<u8>> {
        self.inputs.push(path.to_path_buf());
        std::fs::read(path).map_err(|e| CliError::io(path, e))
    }

    fn registry(&mut self, prov: &mut Provenance) -> CliResult<ConceptRegistry> {
        let path = self.loaded.registry_path();
        let bytes = self.read(&path)?;
        prov.input_bytes("registry", &bytes);
        let text = String::from_utf8(bytes).map_err(|e| CliError::Format(format!("{}: {e}", path.display())))?;
        Ok(ConceptRegistry::parse(&text)?)
    }

    fn vocab(&mut self, prov: &mut Provenance) -> CliResult<Vocabulary> {
        let path = self.loaded.vocab_path();
        let bytes = self.read(&path)?;
        prov.input_bytes("vocab", &bytes);
        let text = String::from_utf8(bytes).map_err(|e| CliError::Format(format!("{}: {e}", path.display())))?;
        Ok(Vocabulary::parse(&text)?)
    }

    fn corpus(&mut self, prov: &mut Provenance) -> CliResult<Vec<String>> {
        let path = self.loaded.corpus_path();
        let bytes = self.read(&path)?;
        prov.input_bytes("corpus", &bytes);
        let text = String::from_utf8(bytes).map_err(|e| CliError::Format(format!("{}: {e}", path.display())))?;
        Ok(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect())
    }

    fn checkpoint(&mut self, role: &str, path: &Path, prov: &mut Provenance) -> CliResult<Checkpoint> {
        let bytes = self.read(path)?;
        prov.input_bytes(role, &bytes);
        Checkpoint::from_bytes(&bytes)
    }

    fn model(&mut self, role: &str, path: &Path, prov: &mut Provenance) -> CliResult<Pipeline> {
        store::load_model(&self.checkpoint(role, path, prov)?)
    }

    fn file_input(&mut self, role: &str, path: &Path, prov: &mut Provenance) -> CliResult<()> {
        self.inputs.push(path.to_path_buf());
        prov.input_file(role, path)
    }

    /// Covariances from a checkpoint, or estimated from the corpus.
    fn covariances(
        &mut self,
        pipeline: &Pipeline,
        path: Option<&Path>,
        prov: &mut Provenance,
    ) -> CliResult<Vec<CovarianceStats>> {
        match path {
            Some(p) => store::load_covariances(&self.checkpoint("covariance", p, prov)?),
            None => {
                let corpus = self.corpus(prov)?;
                let layers: Vec<usize> = (0..pipeline.encoder.config().n_layers).collect();
                Ok(estimate_covariances(
                    &pipeline.encoder,
                    &pipeline.vocab,
                    &corpus,
                    &layers,
                    self.loaded.config.edit.covariance_lambda,
                )?)
            }
        }
    }

    /// Writes `bytes` to `<out>/<name>` through a temporary file, refusing to
    /// replace any input of this command.
    fn write(&self, name: &str, bytes: &[u8]) -> CliResult<PathBuf> {
        let path = self.out.join(name);
        let target = canonical(&path);
        if self.inputs.iter().any(|i| canonical(i) == target) {
            return Err(CliError::Config(format!("output {} would overwrite an input", path.display())));
        }
        let dir = path.parent().expect("output has a parent");
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        let tmp = path.with_extension("partial");
        std::fs::write(&tmp, bytes).map_err(|e| CliError::io(&tmp, e))?;
        std::fs::rename(&tmp, &path).map_err(|e| CliError::io(&path, e))?;
        Ok(path)
    }

    fn write_meta(&self, name: &str, prov: &Provenance, extra: Value) -> CliResult<PathBuf> {
        let mut v = json!({ "provenance": prov });
        if let (Value::Object(m), Value::Object(e)) = (&mut v, extra) {
            m.extend(e);
        }
        let text = serde_json::to_string_pretty(&v).expect("metadata serializes") + "\n";
        self.write(name, text.as_bytes())
    }

    fn plan_layers(&self) -> Vec<usize> {
        self.loaded.config.edit.plan().layers().collect()
    }

    fn stage1(&self, pipeline: &Pipeline, requests: &[EditRequest]) -> CliResult<Vec<LayerEditPayload>> {
        Ok(optimize_all(pipeline, requests, &self.loaded.config.stage1, self.workers)?)
    }

    fn save_model(&self, name: &str, pipeline: &Pipeline, prov: &Provenance, extra: Value) -> CliResult<PathBuf> {
        let mut extra = extra;
        if let Value::Object(m) = &mut extra {
            m.insert("model_config".into(), serde_json::to_value(self.loaded.config.model).expect("serializes"));
        }
        self.write(name, &store::model_checkpoint(pipeline, extra, prov).to_bytes())
    }
}

fn say(path: &Path) {
    println!("wrote {}", path.display());
}

pub fn train(ctx: &mut Context) -> CliResult<()> {
    let mut prov = ctx.provenance("train");
    let registry = ctx.registry(&mut prov)?;
    let vocab = ctx.vocab(&mut prov)?;
    let cfg = &ctx.loaded.config;
    let trained = train_toy_model(&registry, &vocab, &cfg.model, cfg.seed)?;
    let oracle = ConfidenceOracle::from_registry(&registry);
    let gate = training_gate(&trained.pipeline, &registry, &oracle, &cfg.sampling)?;
    let extra = json!({
        "encoder_loss": trained.encoder_loss,
        "denoiser_loss": trained.denoiser_loss,
        "gate": gate,
    });
    let path = ctx.save_model(MODEL_FILE, &trained.pipeline, &prov, extra)?;
    println!("encoder_loss {}", trained.encoder_loss);
    println!("denoiser_loss {}", trained.denoiser_loss);
    println!("gate {gate} (threshold {GATE_THRESHOLD})");
    say(&path);
    if gate < GATE_THRESHOLD {
        return Err(CliError::Gate { value: gate, threshold: GATE_THRESHOLD });
    }
    Ok(())
}

pub fn covariance(ctx: &mut Context, model: &Path) -> CliResult<()> {
    let mut prov = ctx.provenance("covariance");
    let pipeline = ctx.model("model", model, &mut prov)?;
    let stats = ctx.covariances(&pipeline, None, &mut prov)?;
    for s in &stats {
        println!("layer {} keys {} lambda {}", s.layer, s.count, s.lambda);
    }
    say(&ctx.write(COVARIANCE_FILE, &store::covariance_checkpoint(&stats, &prov).to_bytes())?);
    Ok(())
}

pub fn stage1(ctx: &mut Context, model: &Path, requests: &Path) -> CliResult<()> {
    let mut prov = ctx.provenance("stage1");
    let pipeline = ctx.model("model", model, &mut prov)?;
    ctx.file_input("requests", requests, &mut prov)?;
    let requests = load_requests(requests, &ctx.plan_layers())?;
    let payloads = ctx.stage1(&pipeline, &requests)?;
    for p in &payloads {
        let norm = p.delta.iter().map(|d| d * d).sum::<f64>().sqrt();
        println!("{} layer {}: loss {} -> {}, |delta| {norm}", p.concept, p.layer, p.initial.total, p.last.total);
    }
    say(&ctx.write(PAYLOAD_FILE, &store::payload_checkpoint(&requests, &payloads, &prov).to_bytes())?);
    Ok(())
}

fn report_meta(report: &EditReport, ctx: &Context) -> Value {
    json!({ "plan": ctx.loaded.config.edit.plan(), "covariance_lambda": ctx.loaded.config.edit.covariance_lambda, "layers": report.entries.len() })
}

pub fn edit(ctx: &mut Context, model: &Path, payloads: &Path, covariance: Option<&Path>) -> CliResult<()> {
    let mut prov = ctx.provenance("edit");
    let pre = ctx.model("model", model, &mut prov)?;
    let (requests, payloads) = store::load_payloads(&ctx.checkpoint("payloads", payloads, &mut prov)?)?;
    let covs = ctx.covariances(&pre, covariance, &mut prov)?;
    let plan = ctx.loaded.config.edit.plan();
    let (post, report) = apply_payloads(&pre, &requests, &payloads, &plan, &covs)?;
    print!("{}", report.to_csv());
    let meta = report_meta(&report, ctx);
    say(&ctx.save_model("edited.ckpt", &post, &prov, json!({ "edit": meta.clone() }))?);
    say(&ctx.write("edit_report.csv", report.to_csv().as_bytes())?);
    say(&ctx.write_meta("edit_report.meta.json", &prov, meta)?);
    Ok(())
}

pub fn eval(ctx: &mut Context, pre: &Path, post: &Path, edits: &Path) -> CliResult<()> {
    let mut prov = ctx.provenance("eval");
    let registry = ctx.registry(&mut prov)?;
    let pre = ctx.model("pre", pre, &mut prov)?;
    let post = ctx.model("post", post, &mut prov)?;
    ctx.file_input("edits", edits, &mut prov)?;
    let edits = load_edits(edits)?;
    let oracle = ConfidenceOracle::from_registry(&registry);
    let report = compute_metrics(&pre, &post, &edits, &registry, &oracle, &ctx.loaded.config.sampling)?;
    print!("{}", report.to_csv());
    say(&ctx.write("metrics.csv", report.to_csv().as_bytes())?);
    say(&ctx.write("metric_terms.csv", report.terms_csv().as_bytes())?);
    say(&ctx.write_meta("metrics.meta.json", &prov, json!({ "edits": edits }))?);
    Ok(())
}

fn parse_pairs(list: &str) -> CliResult<Vec<(String, String)>> {
    list.split(',')
        .map(|item| {
            item.split_once(':')
                .map(|(a, c)| (a.trim().to_string(), c.trim().to_string()))
                .ok_or_else(|| CliError::Config(format!("expected alias:class, got `{item}`")))
        })
        .collect()
}

pub fn rectify(
    ctx: &mut Context,
    model: &Path,
    aliases: Option<&str>,
    images_only: bool,
    covariance: Option<&Path>,
) -> CliResult<()> {
    let mut prov = ctx.provenance("rectify");
    let registry = ctx.registry(&mut prov)?;
    let pre = ctx.model("model", model, &mut prov)?;
    let aliases = match aliases {
        Some(list) => parse_pairs(list)?,
        None => misunderstood_aliases(&registry),
    };
    let oracle = ConfidenceOracle::from_registry(&registry);
    let sampling = ctx.loaded.config.sampling;
    let requests = rectification_requests(&registry, &aliases, &ctx.plan_layers(), images_only)?;
    let covs = ctx.covariances(&pre, covariance, &mut prov)?;
    let payloads = ctx.stage1(&pre, &requests)?;
    let plan = ctx.loaded.config.edit.plan();
    let (post, edit_report) = apply_payloads(&pre, &requests, &payloads, &plan, &covs)?;
    let report = rectify_eval(&pre, &post, &aliases, &registry, &oracle, &sampling)?;
    let after = alias_confidences(&post, &registry, &oracle, &aliases, &sampling)?;
    let mut per_alias = String::from("alias,class,pre,post\n");
    let before = alias_confidences(&pre, &registry, &oracle, &aliases, &sampling)?;
    for ((a, c), (b, p)) in aliases.iter().zip(before.iter().zip(&after)) {
        per_alias.push_str(&format!("{a},{c},{b},{p}\n"));
    }
    print!("{}{}", report.to_csv(), per_alias);
    let meta = json!({ "images_only": images_only, "aliases": aliases, "edit": report_meta(&edit_report, ctx) });
    say(&ctx.save_model("rectified.ckpt", &post, &prov, meta.clone())?);
    say(&ctx.write("rectify.csv", report.to_csv().as_bytes())?);
    say(&ctx.write("rectify_aliases.csv", per_alias.as_bytes())?);
    say(&ctx.write("rectify_terms.csv", terms_csv(&report.terms).as_bytes())?);
    say(&ctx.write_meta("rectify.meta.json", &prov, meta)?);
    Ok(())
}

fn terms_csv(terms: &[emcid::bench::MetricTerm]) -> String {
    let mut s = String::from("metric,concept,class,pre,post,value\n");
    for t in terms {
        s.push_str(&format!("{},{},{},{},{},{}\n", t.metric, t.concept, t.class, t.pre, t.post, t.value));
    }
    s
}

pub fn debias(
    ctx: &mut Context,
    model: &Path,
    concept: &str,
    attributes: &[String],
    covariance: Option<&Path>,
) -> CliResult<()> {
    let mut prov = ctx.provenance("debias");
    let registry = ctx.registry(&mut prov)?;
    let pre = ctx.model("model", model, &mut prov)?;
    let cfg = ctx.loaded.config.clone();
    let attrs: Vec<&str> = attributes.iter().map(String::as_str).collect();
    let d = cfg.bench.debias;
    let config = DebiasConfig {
        eta0: d.eta0,
        max_iterations: d.max_iterations,
        min_diff: d.min_diff,
        samples_per_prompt: d.samples_per_prompt,
        ..DebiasConfig::balanced(concept, &attrs)
    };
    config.validate()?;
    let oracle = ConfidenceOracle::from_registry(&registry);
    let sampling = emcid::bench::SamplingConfig { samples_per_prompt: config.samples_per_prompt, ..cfg.sampling };
    let plan = cfg.edit.plan();
    let covs = ctx.covariances(&pre, covariance, &mut prov)?;
    let ratios = |p: &Pipeline| attribute_ratios(p, &registry, &oracle, concept, attributes, &sampling);

    let pre_ratios = ratios(&pre)?;
    let values = attribute_values(&pre, &registry, &config, &plan, &cfg.stage1, ctx.workers)?;
    let outcome = debias_value(&config, &values, |vals| {
        let edited = edit_concept_values(&pre, &registry, concept, vals, &plan, &covs)?;
        ratios(&edited)
    })?;
    let post = edit_concept_values(&pre, &registry, concept, &outcome.values, &plan, &covs)?;
    let post_ratios = ratios(&post)?;
    let before = delta_p(&pre_ratios)?;
    let after = delta_p(&post_ratios)?;

    let mut hist = String::from("iteration");
    for a in attributes {
        hist.push_str(&format!(",weight_{a}"));
    }
    for a in attributes {
        hist.push_str(&format!(",ratio_{a}"));
    }
    hist.push_str(",max_diff\n");
    for (i, s) in outcome.history.iter().enumerate() {
        let cells: Vec<String> = s.weights.iter().chain(&s.ratios).map(|v| v.to_string()).collect();
        let max = s.diff.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        hist.push_str(&format!("{i},{},{max}\n", cells.join(",")));
    }
    let summary = format!("metric,value,n,seed\ndelta_p_pre,{before},{},{}\ndelta_p_post,{after},{},{}\n",
        2, cfg.seed, 2, cfg.seed);
    println!("delta_p_pre {before}");
    println!("delta_p_post {after}");
    println!("converged {} after {} iterations, weights {:?}", outcome.converged, outcome.history.len(), outcome.weights);
    let meta = json!({
        "concept": concept,
        "attributes": attributes,
        "weights": outcome.weights,
        "converged": outcome.converged,
        "ratios_pre": pre_ratios,
        "ratios_post": post_ratios,
    });
    say(&ctx.save_model("debiased.ckpt", &post, &prov, meta.clone())?);
    say(&ctx.write("debias.csv", summary.as_bytes())?);
    say(&ctx.write("debias_history.csv", hist.as_bytes())?);
    say(&ctx.write_meta("debias.meta.json", &prov, meta)?);
    Ok(())
}

pub fn sweep_alpha(ctx: &mut Context, model: &Path, payloads: &Path, covariance: Option<&Path>) -> CliResult<()> {
    let mut prov = ctx.provenance("sweep-alpha");
    let pre = ctx.model("model", model, &mut prov)?;
    let (requests, payloads) = store::load_payloads(&ctx.checkpoint("payloads", payloads, &mut prov)?)?;
    let covs = ctx.covariances(&pre, covariance, &mut prov)?;
    let plan = ctx.loaded.config.edit.plan();
    let rows = alpha_sweep(&pre.encoder, &pre.vocab, &requests, &payloads, &plan, &covs, &ctx.loaded.config.bench.alphas)?;
    let mut csv = String::from("alpha,edit_residual,preservation_residual\n");
    for r in &rows {
        csv.push_str(&format!("{},{},{}\n", r.alpha, r.edit_residual, r.preservation));
    }
    print!("{csv}");
    say(&ctx.write("alpha_sweep.csv", csv.as_bytes())?);
    say(&ctx.write_meta("alpha_sweep.meta.json", &prov, json!({ "plan": plan }))?);
    Ok(())
}

pub fn sweep_layers(
    ctx: &mut Context,
    model: &Path,
    payloads: &Path,
    edits: &Path,
    covariance: Option<&Path>,
) -> CliResult<()> {
    let mut prov = ctx.provenance("sweep-layers");
    let registry = ctx.registry(&mut prov)?;
    let pre = ctx.model("model", model, &mut prov)?;
    let (requests, payloads) = store::load_payloads(&ctx.checkpoint("payloads", payloads, &mut prov)?)?;
    ctx.file_input("edits", edits, &mut prov)?;
    let edits = load_edits(edits)?;
    let covs = ctx.covariances(&pre, covariance, &mut prov)?;
    let oracle = ConfidenceOracle::from_registry(&registry);
    let bench = Bench { pre: &pre, registry: &registry, oracle: &oracle, sampling: ctx.loaded.config.sampling };
    let plan = ctx.loaded.config.edit.plan();
    let rows = ablate_layers(&bench, &edits, &requests, &payloads, &covs, &ctx.loaded.config.bench.layer_ranges, &plan)?;
    let csv = layer_ablation_csv(&rows);
    print!("{csv}");
    say(&ctx.write("layer_sweep.csv", csv.as_bytes())?);
    say(&ctx.write_meta("layer_sweep.meta.json", &prov, json!({ "edits": edits, "plan": plan }))?);
    Ok(())
}

pub const SCALE_HEADER: &str = "edits,metric,value,n,seed";

/// Seed of the edit-set draw at each scale.
pub fn scale_seed(seed: u64) -> u64 {
    emcid::tensor::derive_seed(seed, emcid::tensor::label_hash("scale-edits"))
}

pub fn sweep_scale(ctx: &mut Context, model: &Path, covariance: Option<&Path>) -> CliResult<()> {
    let mut prov = ctx.provenance("sweep-scale");
    let registry = ctx.registry(&mut prov)?;
    let pre = ctx.model("model", model, &mut prov)?;
    let covs = ctx.covariances(&pre, covariance, &mut prov)?;
    let oracle = ConfidenceOracle::from_registry(&registry);
    let cfg = ctx.loaded.config.clone();
    let plan = cfg.edit.plan();
    let mut csv = format!("{SCALE_HEADER}\n");
    let mut sets = Vec::new();
    for &n in &cfg.bench.scales {
        let edits = scale_edits(&registry, n, scale_seed(cfg.seed))?;
        let requests = concept_requests(&registry, &edits, &ctx.plan_layers())?;
        let payloads = ctx.stage1(&pre, &requests)?;
        let (post, _) = apply_payloads(&pre, &requests, &payloads, &plan, &covs)?;
        let report = compute_metrics(&pre, &post, &edits, &registry, &oracle, &cfg.sampling)?;
        for (name, value, count) in report.rows() {
            csv.push_str(&format!("{n},{name},{value},{count},{}\n", report.seed));
        }
        sets.push(json!({ "edits": n, "pairs": edits }));
    }
    print!("{csv}");
    say(&ctx.write("scale_sweep.csv", csv.as_bytes())?);
    say(&ctx.write_meta("scale_sweep.meta.json", &prov, json!({ "plan": plan, "edit_sets": sets }))?);
    Ok(())
}

/// Hash of a file's bytes, for tests and scripts.
pub fn file_hash(path: &Path) -> CliResult<String> {
    Ok(blob_hash(&std::fs::read(path).map_err(|e| CliError::io(path, e))?))
}
