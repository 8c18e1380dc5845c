//! Topology-only detection of suspicious transaction patterns.
//!
//! The pipeline turns raw transfers into weakly labeled communities and
//! trains one graph autoencoder per pattern:
//!
//! 1. [`ingest`] loads records and builds directed transactional graphs.
//! 2. [`temporal`] cuts them into fixed-width snapshots.
//! 3. [`community`] partitions each snapshot with Louvain and drops cells
//!    smaller than four accounts.
//! 4. [`indicators`] scores every node against six patterns and gives each
//!    community a single weak label.
//! 5. [`features`], [`dataset`], [`gae`] and [`evalreport`] build node
//!    features, per-pattern splits, the autoencoders and the cross-pattern
//!    reconstruction-error matrices.
//!
//! [`synthgen`] plants known patterns for testing, and [`pipeline`] runs
//! the stages with persisted, hash-checked artifacts.

pub mod community;
pub mod dataset;
pub mod error;
pub mod evalreport;
pub mod features;
pub mod gae;
pub mod graph;
pub mod indicators;
pub mod ingest;
pub mod nn;
pub mod pipeline;
pub mod synthgen;
pub mod temporal;

pub use error::{Error, Result};
