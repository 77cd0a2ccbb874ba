//! Relational knowledge distillation on superpixel tokens.
//!
//! The crate is `no_std` (it needs `alloc`) and holds everything that is pure
//! computation: a small `f64` tensor type with reverse-mode gradients, the
//! superpixel token sampler, distance/angle relational losses (including a
//! memory-tiled angle kernel and its memory model), the composite distillation
//! objective, CNN feature tokenizers, desk-scale toy ViT/CNN models and the
//! optimizer. IO, configuration and the command line live in the `serkd`
//! companion crate.

#![no_std]
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod error;
pub mod gradcheck;
pub mod meter;
pub mod models;
pub mod objective;
pub mod optim;
pub mod relational;
pub mod rng;
pub mod superpixel;
pub mod tensor;
pub mod tokenizer;

pub use error::{Error, Result};
pub use tensor::Tensor;
