//! Hierarchical-memory language model: short-term recurrent compression,
//! a long-term compressed-KV FIFO, and baseline memory policies, built on a
//! small f64 reverse-mode autodiff engine.

pub mod attention;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod long_term;
pub mod model;
pub mod short_term;
pub mod tensor;
pub mod train;

pub use error::{MelodiError, Result};
