//! Symmetric deformable 3D registration driven by predicted spatial gradients.

pub mod augment;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod deformation;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod losses;
pub mod manifest;
pub mod metrics;
pub mod network;
pub mod normalize;
pub mod optim;
pub mod synth;
pub mod tensor;
pub mod trainer;
pub mod volume;

pub use error::{Error, Result};
