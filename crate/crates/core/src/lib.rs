//! Estimation of the average slope of the conditional linear predictor of an
//! outcome given a (possibly multivalued) treatment within control cells.
//!
//! Three estimators are provided: Oaxaca-Blinder regression, a generalized
//! inverse-propensity IV estimator, and a locally efficient doubly robust IV
//! estimator, together with a partially linear variant. All standard errors
//! come from a stacked just-identified moment system.

// `!(v > 0.0)` style guards deliberately reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod basis;
pub mod cli;
pub mod clp;
pub mod data;
pub mod error;
pub mod estimators;
pub mod gps;
pub mod mom;
pub mod rng;
pub mod simulate;

pub use basis::{BasisSpec, Term};
pub use clp::{brute_force_clp, build_r, derivative_weights, seb_monte_carlo, ClpBasis, Grid, SebResult};
pub use data::Dataset;
pub use error::{Error, ErrorClass, Result};
pub use estimators::{
    dr, estimate, gipw, oaxaca_blinder, plm, Estimate, EstimatorKind, EstimatorOptions, JacobianForm,
};
pub use gps::{fit_mle, GpsFamily, GpsFit, GpsKind};
pub use simulate::{draw_sample, run_study, summarize, Design, StudySummary};
