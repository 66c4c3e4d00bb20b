//! Run configuration. JSON on disk; every field has a default so a config
//! file only needs to name what it changes. Relative paths resolve against
//! the directory of the config file.

use std::path::{Path, PathBuf};

use emcid::bench::{ModelConfig, SamplingConfig};
use emcid::stage1::Stage1Config;
use emcid::stage2::EditPlan;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};
use crate::provenance::blob_hash;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub vocab: PathBuf,
    pub registry: PathBuf,
    pub corpus: PathBuf,
    /// Output directory when `--out` is not given.
    pub checkpoint_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            vocab: "vocab.txt".into(),
            registry: "registry.json".into(),
            corpus: "corpus.txt".into(),
            checkpoint_dir: "runs".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EditFields {
    pub alpha: f64,
    pub layer_lo: usize,
    pub layer_hi: usize,
    pub recompute_keys: bool,
    /// λ in `C0 = λ·E[kkᵀ]`.
    pub covariance_lambda: f64,
}

impl Default for EditFields {
    fn default() -> Self {
        let p = EditPlan::default_for(ModelConfig::default().n_layers);
        Self {
            alpha: p.alpha,
            layer_lo: p.layer_lo,
            layer_hi: p.layer_hi,
            recompute_keys: p.recompute_keys,
            covariance_lambda: 1.0,
        }
    }
}

impl EditFields {
    pub fn plan(&self) -> EditPlan {
        EditPlan {
            alpha: self.alpha,
            layer_lo: self.layer_lo,
            layer_hi: self.layer_hi,
            recompute_keys: self.recompute_keys,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DebiasFields {
    pub eta0: f64,
    pub max_iterations: usize,
    pub min_diff: f64,
    pub samples_per_prompt: usize,
}

impl Default for DebiasFields {
    fn default() -> Self {
        let d = emcid::bench::DebiasConfig::balanced("", &["", ""]);
        Self {
            eta0: d.eta0,
            max_iterations: d.max_iterations,
            min_diff: d.min_diff,
            samples_per_prompt: d.samples_per_prompt,
        }
    }
}

/// Benchmark sweeps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchFields {
    /// Edit counts of `sweep-scale`.
    pub scales: Vec<usize>,
    pub alphas: Vec<f64>,
    /// Inclusive `(lo, hi)` layer ranges of `sweep-layers`.
    pub layer_ranges: Vec<(usize, usize)>,
    pub debias: DebiasFields,
}

impl Default for BenchFields {
    fn default() -> Self {
        Self {
            scales: vec![4, 8, 12],
            alphas: (1..=9).map(|i| i as f64 / 10.0).collect(),
            layer_ranges: vec![(4, 4), (2, 4), (0, 4)],
            debias: DebiasFields::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed. Overrides the seeds inside `stage1` and `sampling`.
    pub seed: u64,
    pub paths: Paths,
    pub model: ModelConfig,
    pub stage1: Stage1Config,
    pub edit: EditFields,
    pub sampling: SamplingConfig,
    pub bench: BenchFields,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            paths: Paths::default(),
            model: ModelConfig::default(),
            stage1: Stage1Config::default(),
            edit: EditFields::default(),
            sampling: SamplingConfig::default(),
            bench: BenchFields::default(),
        }
    }
}

/// A parsed config together with the directory its paths are relative to.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: RunConfig,
    pub base: PathBuf,
}

impl RunConfig {
    pub fn parse(text: &str) -> CliResult<Self> {
        serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Sets the master seed and the seeds derived from it.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.stage1.seed = seed;
        self.sampling.seed = seed;
        self
    }

    /// Hash of the canonical JSON form; paths enter as written.
    pub fn hash(&self) -> String {
        blob_hash(serde_json::to_string(self).expect("config serializes").as_bytes())
    }

    /// Checks everything that does not need the file system.
    pub fn validate_values(&self) -> CliResult<()> {
        self.stage1.validate()?;
        self.edit.plan().validate(self.model.n_layers)?;
        if !(self.edit.covariance_lambda > 0.0 && self.edit.covariance_lambda.is_finite()) {
            return Err(CliError::Config(format!("covariance_lambda must be positive, got {}", self.edit.covariance_lambda)));
        }
        if self.sampling.samples_per_prompt == 0 || self.sampling.steps == 0 {
            return Err(CliError::Config("sampling needs samples_per_prompt > 0 and steps > 0".into()));
        }
        if self.model.d_model % self.model.n_heads != 0 {
            return Err(CliError::Config("d_model must be divisible by n_heads".into()));
        }
        for &a in &self.bench.alphas {
            if !(a > 0.0 && a < 1.0) {
                return Err(CliError::Config(format!("sweep α {a} outside (0, 1)")));
            }
        }
        for &(lo, hi) in &self.bench.layer_ranges {
            let plan = EditPlan { layer_lo: lo, layer_hi: hi, ..self.edit.plan() };
            plan.validate(self.model.n_layers)?;
        }
        Ok(())
    }
}

impl LoadedConfig {
    /// Reads and validates a config file. `None` uses the defaults relative
    /// to the working directory.
    pub fn load(path: Option<&Path>, seed: Option<u64>) -> CliResult<Self> {
        let (config, base) = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
                let base = p.parent().map(Path::to_path_buf).unwrap_or_default();
                (RunConfig::parse(&text)?, base)
            }
            None => (RunConfig::default(), PathBuf::new()),
        };
        let seed = seed.unwrap_or(config.seed);
        let loaded = Self { config: config.with_seed(seed), base };
        loaded.validate()?;
        Ok(loaded)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }

    pub fn vocab_path(&self) -> PathBuf {
        self.resolve(&self.config.paths.vocab)
    }

    pub fn registry_path(&self) -> PathBuf {
        self.resolve(&self.config.paths.registry)
    }

    pub fn corpus_path(&self) -> PathBuf {
        self.resolve(&self.config.paths.corpus)
    }

    pub fn out_dir(&self) -> PathBuf {
        self.resolve(&self.config.paths.checkpoint_dir)
    }

    pub fn validate(&self) -> CliResult<()> {
        self.config.validate_values()?;
        for (role, p) in [("vocab", self.vocab_path()), ("registry", self.registry_path()), ("corpus", self.corpus_path())] {
            if !p.is_file() {
                return Err(CliError::Config(format!("{role} file {} does not exist", p.display())));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_json() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::parse(&c.to_json()).unwrap(), c);
        assert_eq!(RunConfig::parse("{}").unwrap(), c);
        c.validate_values().unwrap();
        assert_eq!(c.edit.plan(), EditPlan::default_for(6));
    }

    #[test]
    fn partial_files_override_fields() {
        let c = RunConfig::parse(r#"{"seed": 3, "edit": {"alpha": 0.25}}"#).unwrap().with_seed(3);
        assert_eq!(c.edit.alpha, 0.25);
        assert_eq!(c.edit.layer_hi, 4);
        assert_eq!((c.stage1.seed, c.sampling.seed), (3, 3));
        assert_ne!(c.hash(), RunConfig::default().hash());
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(RunConfig::parse(r#"{"nonsense": 1}"#).is_err());
        for bad in [r#"{"edit": {"alpha": 1.0}}"#, r#"{"edit": {"layer_lo": 3, "layer_hi": 2}}"#, r#"{"edit": {"layer_hi": 5}}"#] {
            let c = RunConfig::parse(bad).unwrap();
            let e = c.validate_values().unwrap_err();
            assert_eq!(e.exit_code(), 2, "{bad}");
        }
    }

    #[test]
    fn missing_registry_names_the_path() {
        let dir = std::env::temp_dir().join(format!("emcid-config-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        std::fs::write(dir.join("vocab.txt"), "a\n").unwrap();
        std::fs::write(dir.join("corpus.txt"), "a\n").unwrap();
        let cfg = dir.join("config.json");
        std::fs::write(&cfg, r#"{"paths": {"registry": "missing.json"}}"#).unwrap();
        let e = LoadedConfig::load(Some(&cfg), None).unwrap_err();
        assert!(e.to_string().contains("missing.json"), "{e}");
        assert_eq!(e.exit_code(), 2);
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
