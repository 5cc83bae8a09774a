//! Performance-model-driven simulator for chunked-prefill LLM inference
//! scheduling.
//!
//! The crate models per-batch execution time (roofline or profiled),
//! forms batches under several iteration-level policies, runs them through
//! single-GPU or pipeline-parallel deployments and reports throughput,
//! per-token decode cost and pipeline bubbles.

pub mod chunker;
pub mod cli;
pub mod config;
pub mod costmodel;
pub mod engine;
pub mod experiment;
pub mod error;
pub mod presets;
pub mod report;
pub mod sched;
pub mod types;
pub mod workload;

pub use error::{Error, Result};
