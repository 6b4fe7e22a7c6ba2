//! Parallel ensemble Kalman filtering: ensemble containers, analysis steps,
//! random field generation, localization and inflation, parameter estimation,
//! toy forecast models, ensemble storage and a cycle orchestrator.

pub mod config;
pub mod ensemble;
pub mod experiment;
pub mod error;
pub mod fields;
pub mod filters;
pub mod grid;
pub mod layout;
pub mod localization;
pub(crate) mod linalg;
pub mod models;
pub mod obs;
pub mod orchestrator;
pub mod params;
pub mod rng;
pub mod scaling;
pub mod schedule;
pub mod store;

pub use error::{Error, Result};
