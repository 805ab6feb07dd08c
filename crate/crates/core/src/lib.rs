//! Simulation toolkit for two data-parallel training techniques:
//!
//! * load-balanced batch formation by stratified sampling followed by
//!   node-local presorting (with raster or snake redistribution), plus the
//!   baselines it competes with (no balancing, global presorting, packing);
//! * bucket-wise gradient clipping before allreduce, which keeps the
//!   per-worker outlier protection of clipping before allreduce while letting
//!   bucket communication overlap the backward pass.
//!
//! Everything here is deterministic for a fixed seed. The [`mcsim`] module
//! reproduces the load-balance Monte-Carlo evaluation, [`timeline`] models
//! iteration latency under each clipping discipline, and [`toytrain`] trains a
//! small regression model with simulated workers to compare sample
//! efficiency.

pub mod balance;
pub mod error;
pub mod gradsync;
pub mod mcsim;
pub mod seqdata;
pub mod stats;
pub mod strata;
pub mod timeline;
pub mod toytrain;

pub use error::{Error, Result};
pub use seqdata::{LengthDistribution, Sample, Topology};
