//! Benchmark harness for the speculative-decoding engine: prompt
//! ingestion, experiment configuration, grid search, metric aggregation,
//! and plot-data emission. The binary (`mcsd-bench`) is a thin wrapper
//! around [`cli::run`].

pub mod cli;
pub mod experiment;
pub mod plots;
pub mod prompts;
