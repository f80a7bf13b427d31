//! SuperWeight networks: layer weights generated from shared template banks
//! under a fixed parameter budget, with gradient-similarity search over where
//! layers share, ensembles with anytime inference, and calibration metrics.

pub mod ensemble;
pub mod harness;
pub mod error;
pub mod metrics;
pub mod numerics;
pub mod search;
pub mod train;
pub mod weightgen;

pub use error::{Error, Result};
