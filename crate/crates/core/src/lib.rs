//! Dual structure-aware adapter tuning for frozen heterogeneous graph
//! encoders.

pub mod adapters;
pub mod checkpoint;
pub mod config;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod hetgraph;
pub mod objective;
pub mod optim;
pub mod pipeline;
pub mod sparse;
pub mod tape;
pub mod trainer;

pub use error::{Error, Result};
