//! IO side of the figure-caption dataset builder.
//!
//! The pure algorithms live in [`litfig_core`]; this crate reads and writes
//! the on-disk formats, talks to remote services, serves the annotation API
//! and drives the staged pipeline.

pub mod cluster;
pub mod demo;
pub mod columnar;
pub mod embed;
pub mod extract;
pub mod fixtures;
pub mod entrez;
pub mod evalio;
pub mod fsutil;
pub mod ingest;
pub mod jats;
pub mod labels;
pub mod pipeline;
pub mod samples;
pub mod service;
pub mod stages;
pub mod shards;
pub mod store;
pub mod throttle;
pub mod transport;

pub use litfig_core as core;
