//! Infrared/visible image fusion by Retinex decomposition.

pub mod archive;
pub mod conv;
pub mod error;
pub mod features;
pub mod fsutil;
pub mod imgio;
pub mod loss_d2s;
pub mod loss_decomp;
pub mod metrics;
pub mod nets;
pub mod pipeline;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
