//! Region-based active learning for semantic segmentation.
//!
//! A batch-mode deep Q-network learns which image regions to send for
//! labeling. The crate ships the synthetic scene generator, the segmentation
//! learner, state and action featurization, the query network and its
//! training loop, classical acquisition baselines, and the experiment runner.

pub mod baselines;
pub mod config;
pub mod dataset;
pub mod error;
pub mod featurize;
pub mod learner;
pub mod metrics;
pub mod nn;
pub mod policy;
pub mod report;
pub mod runner;

pub use error::{Error, Result};
