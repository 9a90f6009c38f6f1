//! Missingness-aware masked pretraining for tabular data.

pub mod cli;
pub mod data;
pub mod distill;
pub mod embed;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod model;
pub mod moe;
pub mod numerics;
pub mod objectives;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
