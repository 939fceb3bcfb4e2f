//! Hider-focused adversarial training on desk-scale MLPs.
//!
//! The crate covers the whole loop: a small reverse-mode autodiff engine,
//! MLP classifiers with a bit-exact checkpoint format, ℓ∞ attacks, hider
//! detection and ratio statistics, the auxiliary reverse-trained branch, the
//! AT / TRADES / HFAT trainers, and the evaluation harness behind the `hfat`
//! binary.

pub mod attacks;
pub mod auxiliary;
pub mod data;
pub mod autodiff;
pub mod error;
pub mod eval;
pub mod hiders;
pub mod model;
pub mod report;
pub mod trainer;

#[cfg(test)]
pub(crate) mod testutil;

pub use error::{HfatError, Result};
