//! Probabilistic multivariate forecasting with a jointly inferred latent graph.
//!
//! Series histories are encoded into stochastic embeddings, a graph over
//! series is sampled from pairwise embedding statistics, and graph-refined,
//! reference-correlated and global embeddings are aggregated into per-series
//! Gaussian forecasts.

pub mod autodiff;
pub mod decoder;
pub mod encoders;
pub mod error;
pub mod graph;
pub mod data;
pub mod metrics;
pub mod model;
pub mod config;
pub mod checkpoint;
pub mod train;
pub mod baseline;

pub use autodiff::{Activation, Adam, ParamStore, RngStream, Tape, Tensor, Var};
pub use error::{Error, Result};
