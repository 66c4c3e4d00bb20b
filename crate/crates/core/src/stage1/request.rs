use serde::{Deserialize, Serialize};

use crate::diffusion::ToyImage;
use crate::error::{Error, Result};

/// What the source concept should turn into.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "items", rename_all = "lowercase")]
pub enum Destination {
    Prompts(Vec<String>),
    Images(Vec<ToyImage>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditRequest {
    /// Identifier carried into payloads, usually the source concept name.
    pub concept: String,
    pub subject: String,
    pub source_prompts: Vec<String>,
    pub destination: Destination,
    pub layers: Vec<usize>,
}

impl EditRequest {
    pub fn validate(&self) -> Result<()> {
        if self.source_prompts.is_empty() {
            return Err(Error::InvalidRequest(format!("{}: no source prompts", self.concept)));
        }
        let empty = match &self.destination {
            Destination::Prompts(p) => p.is_empty(),
            Destination::Images(i) => i.is_empty(),
        };
        if empty {
            return Err(Error::InvalidRequest(format!("{}: empty destination", self.concept)));
        }
        Ok(())
    }

    /// Source and destination prompts coincide: the edit must be a no-op.
    pub fn is_identity(&self) -> bool {
        matches!(&self.destination, Destination::Prompts(d) if *d == self.source_prompts)
    }
}

/// Which stage-I objective to minimize.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    /// `L_noise + λ_s·L_txt` for prompt destinations, `L_image` for images.
    #[default]
    Hybrid,
    Text,
    Noise,
}

/// Monte Carlo batch used by the noise and image losses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseBatchSpec {
    pub images: usize,
    pub timesteps: usize,
    /// Destination images sampled once per request for `L_noise`.
    pub pool: usize,
    /// Reuse one batch for every step instead of resampling.
    pub fixed: bool,
}

impl Default for NoiseBatchSpec {
    fn default() -> Self {
        Self { images: 8, timesteps: 4, pool: 16, fixed: false }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage1Config {
    pub steps: usize,
    pub learning_rate: f64,
    pub lambda_s: f64,
    pub objective: Objective,
    pub batch: NoiseBatchSpec,
    pub seed: u64,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            steps: 200,
            learning_rate: 0.2,
            lambda_s: 0.01,
            objective: Objective::Hybrid,
            batch: NoiseBatchSpec::default(),
            seed: 0,
        }
    }
}

impl Stage1Config {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || !(self.learning_rate > 0.0) || !(self.lambda_s >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "stage-I config needs steps > 0, rate > 0, λ_s >= 0 (got {}, {}, {})",
                self.steps, self.learning_rate, self.lambda_s
            )));
        }
        if self.batch.images == 0 || self.batch.timesteps == 0 || self.batch.pool == 0 {
            return Err(Error::InvalidConfig("noise batch sizes must be positive".into()));
        }
        Ok(())
    }
}

/// Loss components at the returned offset. Components an objective does not
/// use are still evaluated when they are defined.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub txt: Option<f64>,
    pub noise: Option<f64>,
    pub image: Option<f64>,
    /// The minimized objective.
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerEditPayload {
    pub concept: String,
    pub layer: usize,
    pub key: Vec<f64>,
    pub value: Vec<f64>,
    pub delta: Vec<f64>,
    pub new_value: Vec<f64>,
    pub initial: LossBreakdown,
    pub last: LossBreakdown,
    /// Objective value before each step.
    pub trace: Vec<f64>,
}
