//! Time-resolved fMRI-to-image decoding with a brain-conditioned diffusion
//! model, end to end on a synthetic cortex.

pub mod brainmod;
pub mod diffgen;
pub mod error;
pub mod evalkit;
pub mod prep;
pub mod selftest;
pub mod substrate;
pub mod synthcortex;
pub mod trainer;

pub use error::{Error, Result};
