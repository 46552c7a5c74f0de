//! Label-noise lab: two co-trained networks, loss-mixture and
//! prototype-based sample cleaners, and the measurements to compare them.

pub mod cli;
pub mod cpc;
pub mod datagen;
pub mod error;
pub mod eval;
pub mod gmm;
pub mod nnet;
pub mod rng;
pub mod semisup;
pub mod spec;
pub mod trainer;

pub use error::{Error, Result};
