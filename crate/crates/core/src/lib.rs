//! Few-shot image generation toolkit.
//!
//! A generator encodes K conditioning images of one category, fuses them with
//! two-stage textural modulation and decodes a new image. Training pits it
//! against a hinge-loss discriminator with an auxiliary classifier, a
//! structural discriminator on Laplacian-filtered images, and a frequency
//! discriminator on the Haar high-frequency bands of discriminator features.
//! Everything runs on the small reverse-mode engine in [`tensor`].

pub mod data;
pub mod error;
pub mod frequency;
pub mod gan;
pub mod harness;
pub mod losses;
pub mod modulation;
pub mod nn;
pub mod structural;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Param, Tape, Tensor, Var};
