//! Online frame-level video anomaly detection with short-term and long-term
//! memory modules.

pub mod ablation;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod engine;
pub mod error;
pub mod eval;
pub mod head;
pub mod model;
pub mod nn;
pub mod params;
pub mod stmm;
pub mod train;

pub use error::{Error, Result};
