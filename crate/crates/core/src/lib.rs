//! Universal adversarial patches against object detectors.

pub mod applier;
pub mod attack;
pub mod config;
pub mod dataset;
pub mod detection;
pub mod detector;
pub mod ensemble;
pub mod fixture;
pub mod error;
pub mod eval;
pub mod fsutil;
pub mod image;
pub mod patch;
pub mod trainer;

pub use error::{Error, Result};
