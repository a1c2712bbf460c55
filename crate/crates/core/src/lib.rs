//! Channel-fingerprint twins: synthetic radio-map generation, conditional
//! diffusion super-resolution, and knapsack pruning with distillation.

pub mod cfgen;
pub mod compression;
pub mod container;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod evalkit;
pub mod rng;
pub mod sampling;
pub mod training;

pub use error::{Error, FormatKind, Result};
