//! Desk-scale differentially private aggregation of symptom search trends.
//!
//! The pipeline turns a raw query log into published relative-frequency
//! metrics: per-user-day contribution bounding, aggregation over a fixed
//! zero-filled keyspace, Laplace anonymization under a fixed epsilon budget,
//! reliability filtering and a one-way daily-to-weekly granularity decision.
//! A verification harness checks the sensitivity and budget claims
//! empirically.

pub mod aggregate;
pub mod anonymize;
pub mod bounding;
pub mod config;
pub mod error;
pub mod fixtures;
pub mod ingest;
pub mod pipeline;
pub mod report;
pub mod synth;
pub mod verify;

pub use error::{Error, Result};
