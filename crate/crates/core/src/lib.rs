pub mod audio;
pub mod config;
pub mod dsp;
pub mod error;
pub mod features;
pub mod gain;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod params;
pub mod prior;
pub mod rng;
pub mod training;
pub mod vocoder;

#[cfg(test)]
mod testing;

pub use error::{Error, Result};
