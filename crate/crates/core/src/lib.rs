//! Binary neural network toolkit.
//!
//! The crate is organized around a small reverse-mode autodiff engine
//! ([`tensor`]), an exact bitpacked XNOR/popcount convolution engine
//! ([`binary`]), two training-time enhancements for binary networks —
//! attention-guided input restriction ([`restrict`]) and multi-scale
//! feature recovery ([`recover`]) — plus backbone builders ([`model`]),
//! a static BOPs/FLOPs accountant ([`complexity`]), and the training
//! harness ([`train`], [`data`], [`checkpoint`], [`config`], [`export`]).
//!
//! Kernels are data-parallel over batch items / output rows via rayon
//! (the default `parallel` feature); disabling the feature yields a
//! sequential build with bit-identical results.

pub mod binary;
pub mod checkpoint;
pub mod complexity;
pub mod config;
pub mod counters;
pub mod data;
pub mod error;
pub mod export;
pub mod model;
pub mod par;
pub mod recover;
pub mod restrict;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{Param, Tape, Tensor};
