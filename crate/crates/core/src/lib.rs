//! A desk-scale dual-path vision-language decoder.
//!
//! Images reach the decoder twice: as projected patch tokens interleaved with
//! text (the *context path*) and as a cached bank of projected states that the
//! sequence reads through gated cross-attention mixin layers (the *memory
//! path*). Tile tokens of a dynamically tiled image share rotary position IDs
//! with the thumbnail patch covering the same region, which keeps the position
//! span of an image equal to its thumbnail size.
//!
//! Module map:
//!
//! - [`seqplan`]: synthetic images, tiling, pixel shuffle, sequence layout.
//! - [`pos_encoding`]: position-ID assignment and rotary embedding.
//! - [`decay`]: summation-by-parts identity, decay bound and decay curves.
//! - [`model`]: parameters, dual-path forward/backward, cached decoding.
//! - [`training`]: staged training with gate freezing, loss, gradient checks.
//! - [`tasks`] / [`analysis`]: synthetic tasks and the analysis instruments.
//! - [`checkpoint`], [`cli`]: file formats and the command-line front end.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod checkpoint;
pub mod cli;
pub mod decay;
pub mod error;
pub mod model;
pub mod pos_encoding;
pub mod seqplan;
pub mod tasks;
pub mod training;
pub mod verify;

pub use error::{Error, Result};
