//! Early identification of serious mental illness from coded clinical
//! histories: synthetic data generation, cohort construction, feature
//! extraction, a small neural classifier, rule-based benchmarks and an
//! end-to-end evaluation pipeline.

pub mod cohort;
pub mod datamodel;
pub mod error;
pub mod eval;
pub mod features;
pub mod nnet;
pub mod phecode;
pub mod pipeline;
pub mod rng;
pub mod synth;

pub use error::{Error, Result};
