//! Closed-form multi-layer weight editing.

mod covariance;
mod edit;
mod update;

pub use covariance::{estimate_covariance, estimate_covariances, CovarianceStats};
pub use edit::{alpha_sweep, edit_model, EditPlan, EditReport};
pub use update::{alpha_sweep_instance, bracket, closed_form_update, diagnostics, AlphaSweepRow, EditReportEntry};
