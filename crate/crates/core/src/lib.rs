//! In-context learning of drug synergy: tuple-token transformer, context
//! selection, context optimization, and inverse design by retrieval.

pub mod context;
pub mod ctxopt;
pub mod dataset;
pub mod error;
pub mod inverse;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod rng;
pub mod scalar;
pub mod synthgen;
pub mod train;

pub use error::{Error, ErrorKind, Result};
pub use scalar::Scalar;

/// Single-precision model used for training.
pub type ModelF32 = model::Model<f32>;
/// Double-precision model used for gradient checks.
pub type ModelF64 = model::Model<f64>;
