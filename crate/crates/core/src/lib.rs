//! Selective question answering under domain shift.
//!
//! A QA model answers a mix of in-domain and out-of-domain questions and may
//! abstain. This crate scores how confident the model should be in each
//! prediction, trains random-forest calibrators for that confidence, and
//! evaluates the result with risk-coverage metrics.

pub mod confidence;
pub mod evaluation;
pub mod features;
pub mod forest;
pub mod harness;
pub mod records;
pub mod seed;

#[cfg(test)]
mod testutil;
