//! Langevin-Smoluchowski diffusions on a 1D grid: Fokker-Planck marginal
//! flows, score-controlled time reversal, entropic cost functionals and the
//! entropy dissipation identities, with Monte Carlo checks of each.
//!
//! The pipeline is
//! [`potential`] → [`grid`] (marginals p(t,·)) → [`score`] (L = log p/q, ∇L)
//! → [`sde`] (particle ensembles) → [`control`] / [`entropy`] / [`iterate`].

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod control;
pub mod entropy;
pub mod error;
pub mod grid;
pub mod io;
pub mod iterate;
pub mod potential;
pub mod score;
pub mod sde;

pub use error::{Error, Result};
pub use grid::{DensityField, Grid, InitialDensity, Interval, SolverSettings};
pub use potential::{builtin_potential, gibbs_measure, GibbsMeasure, Potential, PotentialSpec};
pub use score::{build_lambda, build_score, LambdaField, ScoreField};
