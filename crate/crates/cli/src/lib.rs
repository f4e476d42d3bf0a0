//! Experiment orchestration for the `agld` sampler library: method-grid
//! configuration, ensemble runs, per-epoch metric series and manifest
//! replay. The `agld` binary is a thin command-line front end.

pub mod config;
pub mod experiment;
pub mod naming;
