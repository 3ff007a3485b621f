//! Personalized preference-based reward learning with a shared low-rank
//! adapter, plus pessimistic planning on tabular MDPs and diagnostics.
//!
//! Every numeric routine is generic over [`Scalar`] (`f32` or `f64`); the
//! `*64` aliases below fix the usual double-precision instantiation.

pub mod data;
pub mod diagnostics;
pub mod error;
pub mod harness;
mod io;
pub mod linalg;
pub mod mdp;
pub mod planner;
pub mod reward;
pub mod rng;
pub mod scalar;
pub mod train;

pub use error::{Error, Result};
pub use io::{write_atomic, write_json_pretty};
pub use linalg::Matrix;
pub use scalar::Scalar;

pub type Matrix64 = Matrix<f64>;
pub type Matrix32 = Matrix<f32>;
pub type Mdp64 = mdp::TabularMdp<f64>;
pub type Policy64 = mdp::MarkovPolicy<f64>;
pub type SharedLoraModel64 = reward::SharedLoraModel<f64>;
pub type BaselineModel64 = reward::BaselineModel<f64>;
pub type PreferenceDataset64 = data::PreferenceDataset<f64>;
pub type GroundTruth64 = data::GroundTruth<f64>;
