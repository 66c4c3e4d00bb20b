use thiserror::Error;

/// Errors raised by the editing pipeline.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("matrix is not positive definite (pivot {pivot:e} at index {index})")]
    NotPositiveDefinite { index: usize, pivot: f64 },
    #[error("bracket matrix of the closed-form update is singular: {0}")]
    SingularBracket(String),
    #[error("function evaluation was not finite at coordinate {0}")]
    NonFiniteEvaluation(usize),
    #[error("unknown token `{0}`")]
    UnknownToken(String),
    #[error("invalid hook: {0}")]
    InvalidHook(String),
    #[error("subject `{subject}` not found in prompt `{prompt}`")]
    SubjectNotFound { prompt: String, subject: String },
    #[error("timestep {t} outside 1..={max}")]
    TimestepOutOfRange { t: usize, max: usize },
    #[error("training diverged at step {0}")]
    DivergedTraining(usize),
    #[error("value optimization diverged at step {0}")]
    DivergedOptimization(usize),
    #[error("layer {0} is the last encoder layer and cannot be optimized with the text loss")]
    LastLayerWithTextLoss(usize),
    #[error("invalid edit request: {0}")]
    InvalidRequest(String),
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("missing covariance statistics for layer {0}")]
    MissingCovariance(usize),
    #[error("missing stage-I payload for concept `{concept}` at layer {layer}")]
    MissingPayload { concept: String, layer: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("unknown concept `{0}`")]
    UnknownConcept(String),
    #[error("no prompts for concept `{0}` in the requested tier")]
    EmptyPromptTier(String),
    #[error("no holdout concepts remain after removing sources and destinations")]
    NoHoldoutConcepts,
    #[error("alias `{alias}` is already understood (confidence {confidence:.3} >= 0.5)")]
    AliasNotMisunderstood { alias: String, confidence: f64 },
    #[error("no generated sample was classified into any attribute")]
    RatioEstimationFailed,
}

pub type Result<T> = std::result::Result<T, Error>;
