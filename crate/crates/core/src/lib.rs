//! Origin-destination travel time estimation from weak supervision.
//!
//! The crate learns per-segment and per-intersection Gaussian travel times
//! plus segment-to-segment transition probabilities from OD records that
//! carry only a total travel time, recovers the latent route of each trip,
//! and ships a synthetic city generator with ground truth for validation.

pub mod autodiff;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod field;
pub mod model;
pub mod roadnet;
pub mod routesearch;
pub mod simulator;
pub mod training;
pub mod verify;

pub use error::{Error, Result};
