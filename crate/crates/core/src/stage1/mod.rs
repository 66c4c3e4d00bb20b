//! Per-concept, per-layer value optimization.

mod loss;
mod optimize;
mod request;

pub use loss::{loss_image, loss_noise, loss_txt, LossValues, LossWeights, NoiseBatch, Stage1Problem};
pub use optimize::{optimize_all, optimize_value, payload_seed};
pub use request::{
    Destination, EditRequest, LayerEditPayload, LossBreakdown, NoiseBatchSpec, Objective, Stage1Config,
};
