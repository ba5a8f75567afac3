//! Verbose-image laboratory: a toy auto-regressive captioner, the attack that
//! stretches its output length under an ℓ∞ pixel budget, and the meters that
//! turn sequence length into compute cost.

pub mod attack;
pub mod decoding;
pub mod error;
pub mod harness;
pub mod image;
pub mod metering;
pub mod tensor;
pub mod vlm;

pub use error::{Error, Result};
pub use image::Image;
