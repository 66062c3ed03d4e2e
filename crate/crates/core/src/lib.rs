//! Federated multimodal learning with explicit conditional-diffusion
//! imputation of within-modality missing time-series data.

pub mod autodiff;
pub mod config;
pub mod data;
pub mod diffusion;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod federation;
pub mod model;
pub mod rng;
pub mod task;

pub use error::{Error, Result};
