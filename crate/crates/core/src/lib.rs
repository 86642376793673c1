//! Core of `ckp`: a toolkit for automating and reproducing benchmarking
//! experiments.
//!
//! Every piece of state lives in a filesystem-backed [`store`] of typed
//! entries. On top of it:
//!
//! - [`env`] detects native software, orders versions and resolves
//!   version-constrained dependencies;
//! - [`package`] installs missing dependencies from checksummed recipes;
//! - [`pipeline`] runs compile/run/measure pipelines and aggregates metrics;
//! - [`autotune`] explores choice spaces and filters Pareto frontiers;
//! - [`experiment`] records, replays and validates experiments;
//! - [`report`] exports tables, plot series and validation reports.

pub mod canonical;
pub mod env;
pub mod process;
pub mod store;
pub mod package;
pub mod pipeline;
pub mod experiment;
pub mod autotune;
pub mod report;
