//! Multi-state survival analysis with neural Kolmogorov equations.
//!
//! The transition-rate matrix `Q(t)` of a Markov jump process is produced by a
//! small feed-forward network; transition kernels `P(s, t)` follow from
//! integrating the forward and backward Kolmogorov equations jointly with a
//! set of auxiliary memory states that are initialized from the covariates.
//!
//! Module map:
//!
//! - [`statespace`]: state graphs, subject records and datasets
//! - [`diffcore`]: dense networks with reverse-mode gradients, Adam
//! - [`odeint`]: Dormand–Prince and differentiable fixed-step RK4
//! - [`survnode`]: the neural generator and transition kernels
//! - [`likelihood`]: censored multi-state likelihood and training
//! - [`variational`]: latent-variable extension, credible bands, k-means
//! - [`simulate`]: ground-truth jump-process simulator
//! - [`nonparam`]: Kaplan–Meier and Aalen–Johansen estimators
//! - [`metrics`]: concordance, Brier scores, binomial log-likelihood
//! - [`harness`]: configuration, file formats and end-to-end pipelines

// Index loops mirror the formulas; negated comparisons also reject NaN.
#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod diffcore;
pub mod error;
pub mod harness;
pub mod likelihood;
pub mod metrics;
pub mod nonparam;
pub mod odeint;
pub mod simulate;
pub mod statespace;
pub mod survnode;
pub mod variational;

pub use error::{Error, Result};
pub use statespace::{Dataset, ObsMode, Observation, SubjectRecord, TransitionTopology};
