//! Federated learning with mixture-of-experts personalization.
//!
//! The crate trains a global model with federated averaging over simulated
//! clients, then personalizes it per client with one of several strategies,
//! the strongest of which blends a client-specific classifier head with the
//! global one through a learned linear gate.

pub mod cli;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod federation;
pub mod models;
pub mod numerics;
pub mod personalization;
pub mod seed;
pub mod training;

pub use error::{Error, Result};
pub use models::{build_model, ModelParams, ModelSpec, Predictor, SplitModel};
pub use numerics::Tensor;
