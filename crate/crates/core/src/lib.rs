//! Unsupervised anomaly detection for multivariate time series.
//!
//! Each sliding window is encoded per entity by an LSTM, entities are mixed
//! through a self-attention adjacency learned per window, and the resulting
//! spatio-temporal conditions drive a masked autoregressive flow whose base
//! distribution is an entity- (or cluster-) specific Gaussian. The negative
//! log-likelihood of a window is its anomaly score.

pub mod cluster;
pub mod condition;
pub mod dataset;
pub mod detect;
pub mod error;
pub mod flow;
pub mod gradengine;
pub mod graphlearn;
pub mod pipeline;
pub mod rng;
pub mod synthgen;
pub mod temporal;
pub mod training;

pub use error::{Error, Result};
