//! Multi-loss training, kernel-averaging network fusion, and top-two voting
//! ensembles on a small CPU tensor engine.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod ensemble;
pub mod error;
pub mod fga;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod par;
pub mod pipeline;
pub mod report;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
