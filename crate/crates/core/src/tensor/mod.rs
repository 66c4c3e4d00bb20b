//! Linear algebra, seeded randomness and the reverse-mode tape.

pub mod backend;
mod fd;
pub mod matrix;
mod optim;
mod rng;
pub mod tape;

pub use backend::{Backend, Eager};
pub use fd::{finite_diff_grad, relative_error};
pub use optim::Adam;
pub use matrix::{dot, lstsq, solve_spd, spd_condition_estimate, Matrix};
pub use rng::{derive_seed, label_hash, Rng, RNG_ALGORITHM};
pub use tape::{GradTape, Gradients, NodeId};
