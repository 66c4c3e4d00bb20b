//! Two-stage massive concept editing for a toy text-to-image diffusion model.
//!
//! Stage I optimizes, per concept and per layer, a value offset for the text
//! encoder's MLP memory so that the source prompt behaves like the
//! destination (text alignment plus noise-prediction distillation). Stage II
//! writes all optimized values into the MLP projection matrices at once with
//! a closed-form weighted least-squares update, layer by layer.

pub mod bench;
pub mod diffusion;
pub mod encoder;
pub mod error;
mod pipeline;
pub mod stage1;
pub mod stage2;
pub mod tensor;
#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
pub use pipeline::Pipeline;
