//! Discriminative micro-level distribution alignment for domain
//! generalization, sized to run on a laptop.

pub mod autodiff;
#[cfg(feature = "cli")]
pub mod cli;
pub mod diagnostics;
pub mod error;
pub mod mda;
pub mod nn;
pub mod scp;
pub mod synth;
pub mod theory;
pub mod trainer;

pub use error::{Error, Result};
