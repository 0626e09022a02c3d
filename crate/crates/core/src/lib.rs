//! Channel-encoding transformer layers for point clouds.

pub mod baselines;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod networks;
pub mod neighborhood;
pub mod params;
pub mod tce;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
