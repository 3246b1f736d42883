//! Quantile treatment effects on the treated (QTT) for large-N, large-T
//! panels with a small treated group.
//!
//! The pipeline estimates quantile-dependent latent factors from the control
//! units (iterated plain or kernel-smoothed quantile regression), selects the
//! number of factors by rank minimization, runs a second-stage quantile
//! regression on each treated unit, and builds confidence intervals by a
//! blockwise bootstrap. A Monte-Carlo harness benchmarks the estimators
//! against a PCA-based synthetic-control comparator and an infeasible oracle.

pub mod baselines;
pub mod inference;
pub mod panel;
pub mod qfm;
pub mod qr;
pub mod qtt;
pub mod sim;

pub use panel::PanelData;
pub use qfm::QfmFit;
pub use qtt::QttEstimate;
