//! Physics-informed reservoir classifier for gearbox fault diagnosis.
//!
//! Labeled recordings are reduced to per-window statistical features. Their
//! class-conditional moments become Gaussian weight priors, a fixed
//! echo-state reservoir maps features to states, and a variational softmax
//! readout (the only trained part) produces predictions with an
//! aleatoric/epistemic uncertainty split.

pub mod baseline;
pub mod error;
pub mod eval;
pub mod explain;
pub mod features;
pub mod matrix;
pub mod model;
pub mod priors;
pub mod readout;
pub mod reservoir;
pub mod signals;
pub mod stats;

pub use error::{Error, Result};
pub use matrix::Matrix;
pub use model::{FaultModel, ModelConfig};
pub use signals::{ChannelId, FaultLabel};
