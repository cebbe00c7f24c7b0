//! Markovian SDE toolkit: model definitions from expression strings,
//! path simulation under several stochastic calculi, a 1-D Fokker-Planck
//! solver and steady-state analysis near attractors.

// `!(v > 0.0)` is used on purpose so NaN lands in the error branch
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod catalog;
pub mod cli;
pub mod config;
pub mod exprlang;
pub mod fpe;
pub mod model;
pub mod plot;
pub mod sim;
pub mod stats;
pub mod steady;
pub mod validation;

pub use exprlang::{Expr, Params};
pub use model::{ModelError, SdeModel};
pub use sim::{StepScheme, WienerStream};
