//! Spectral flow learning: identification of continuous-time vector fields
//! from irregularly sampled trajectory data.
//!
//! The pipeline, bottom to top:
//!
//! - [`dynamics`]: benchmark ODE systems and a high-accuracy reference flow
//!   used both to generate data and to measure errors.
//! - [`sampling`]: step laws (how far each sample advances in time), design
//!   laws (where trajectories visit), and windowed dataset assembly.
//! - [`vlmm`]: variable-step linear multistep coefficients solved from order
//!   conditions on the window's step-ratio geometry, the window label map,
//!   and local-truncation-error probes.
//! - [`kernels`]: Gaussian RBF kernels on state space and on windowed flow
//!   space (state, anchor step, step ratios), with Gram assembly.
//! - [`filters`]: spectral regularization filters (Tikhonov, iterated
//!   Tikhonov, Landweber, spectral cutoff) applied through eigendecomposition,
//!   with qualification diagnostics.
//! - [`learners`]: the flow estimator fitted in windowed flow space, the
//!   vector-field estimator fitted through the Koopman-lag forcing matrix,
//!   and observability diagnostics.
//! - [`harness`]: convergence-rate and order experiments with log-log slope
//!   fits, contracts, and reproducible CSV/JSON reports.

pub mod dynamics;
pub mod error;
pub mod filters;
pub mod harness;
pub mod kernels;
pub mod learners;
pub mod sampling;
pub mod util;
pub mod vlmm;

pub use error::{Error, Result};
