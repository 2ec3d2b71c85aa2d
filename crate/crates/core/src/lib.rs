//! Slide-level multiple-instance learning benchmark harness.

pub mod abmil;
pub mod cli;
pub mod error;
pub mod feature_store;
pub mod kv;
pub mod optim;
pub mod protocol;
pub mod report;
pub mod rng;
pub mod stats;
pub mod synthgen;
pub mod tiler;

pub use error::{Error, Result};
