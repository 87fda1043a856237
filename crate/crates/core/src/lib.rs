//! Semi-supervised instance segmentation with an anchor-free detector and an
//! EMA teacher that filters pseudo-labels by class confidence and predicted
//! mask quality.

pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod rng;
pub mod ssl;
pub mod targets;

pub use error::{Error, Result};
