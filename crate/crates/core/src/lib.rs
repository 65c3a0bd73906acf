//! SVF experts on a tiny decoder-only transformer: singular-value
//! fine-tuning with policy gradients, expert dispatch, and the analysis
//! experiments built on top.

// Dense kernels read more clearly with explicit indices.
#![allow(clippy::needless_range_loop)]

pub mod adapt;
pub mod analysis;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod hashing;
pub mod linalg;
pub mod lora;
pub mod model;
pub mod pipeline;
pub mod svf;
pub mod tasks;
pub mod train;

pub use error::{Error, Result};
