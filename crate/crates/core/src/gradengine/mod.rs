//! Differentiable dense-matrix computation and the Adam optimizer.

mod check;
mod graph;
mod params;

pub use check::{grad_check, grad_check_store};
pub use graph::{Graph, Var};
#[cfg(test)]
pub(crate) use graph::sigmoid;
pub use params::{AdamConfig, ParamCheckpoint, ParamEntry, ParamStore, CHECKPOINT_VERSION};
