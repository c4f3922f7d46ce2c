//! Low-resolution self-attention (LRSA) and the LRFormer encoder-decoder.
//!
//! The crate is `no_std` with `alloc`. It carries a small dense tensor engine
//! with reverse-mode differentiation ([`tape`]), the attention schemes
//! ([`attention`]), model assembly ([`model`]), analytic parameter/MAC
//! accounting ([`analyzer`]) and a synthetic segmentation trainer
//! ([`toyseg`]). File formats and the command-line tool live in the `lrformer`
//! crate.

#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;

pub mod analyzer;
pub mod attention;
mod error;
pub mod flops;
pub mod gradcheck;
pub mod kernels;
pub mod model;
mod real;
pub mod rng;
pub mod tape;
mod tensor;
pub mod toyseg;

pub use error::{Error, Result};
pub use real::Real;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
