//! Causal coordination detection.
//!
//! Three stages run over binned user activity: cross-mapping influence
//! between users (with memory-guided embedding parameters and
//! cluster-restricted pair scheduling), semi-supervised account
//! classification with uncertainty sampling, and ensemble effect
//! validation with refutation tests.

pub mod ccm;
pub mod classify;
pub mod cluster;
pub mod config;
pub mod embed;
pub mod ingest;
pub mod journal;
pub mod memory;
pub mod pipeline;
pub mod synthgen;
pub mod validate;
