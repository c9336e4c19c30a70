//! Numerical laboratory for classifier-free guidance variants.
//!
//! Everything here runs on analytic Gaussian-mixture score models, for which
//! the noise prediction, posterior mean, density, and Bayes posteriors all
//! have closed forms. That turns the usual "does my sampler look right"
//! question into exact identities checkable at double precision:
//!
//! * interpolation identity of the guided denoised estimate,
//! * per-step equality of DDIM and Euler under the variance-exploding change
//!   of variables,
//! * the equivalence map turning a guided-renoising run into a plain guided
//!   run with a per-step scale schedule,
//! * drift decompositions of the denoised-estimate evolution,
//! * inversion consistency defects and their scale bounds.
//!
//! Modules mirror the pipeline: [`schedule`] (noise schedules and timestep
//! grids), [`score`] (mixture models and predictions), [`guidance`]
//! (combination rules and the scale-equivalence map), [`solver`] (DDIM, Euler,
//! Euler-Ancestral, DPM-Solver++ 2M/2S), [`inversion`] (DDIM inversion,
//! roundtrips, edits), [`inverse_problem`] (DPS/DDS-style guided solvers plus
//! an exact conjugate posterior oracle), [`diagnostics`] (losses, drift
//! decomposition, coverage metrics), and [`harness`] (configs, experiment
//! runners, CSV/SVG emission). The `glab` binary exposes the harness.

pub mod diagnostics;
pub mod error;
pub mod guidance;
pub mod harness;
pub mod inverse_problem;
pub mod inversion;
pub mod rng;
pub mod schedule;
pub mod score;
pub mod solver;
pub mod vecn;

pub use error::{Error, Result};
