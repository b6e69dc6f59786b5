//! Per-panel fault detection for residential solar arrays.
//!
//! The library predicts each panel's expected output from neighboring panels,
//! isolates anomalous production loss from the residual, tolerates multiple
//! concurrent faults via forecast-gated model selection, and labels probable
//! fault causes with a random-forest classifier. A deterministic array
//! simulator with fault injection makes every pipeline stage testable without
//! live hardware.

pub mod classifier;
pub mod cli;
pub mod data;
pub mod detector;
pub mod evaluate;
pub mod forecaster;
pub mod forest;
pub mod ingest;
pub mod model_io;
pub mod predictors;
pub mod seeds;
pub mod simulator;

/// Crate version, embedded in manifests and serialized model documents.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
