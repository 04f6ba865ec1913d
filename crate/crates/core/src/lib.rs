//! Decoupled attention distillation for vision transformers at desk scale.
//!
//! The student is a small ViT whose final block is replaced by a decoupled
//! head producing separate *content* and *context* features. Content
//! features are distilled from a frozen copy of the student on region crops;
//! context features are trained to reproduce the token correlations of a
//! separate foundation-model encoder.

pub mod cli;
pub mod decoupled;
pub mod distill;
pub mod encoder;
pub mod eval;
pub mod error;
pub mod image;
pub mod io;
pub mod numerics;
pub mod probe;
pub mod region;

pub use error::{Error, Result};
