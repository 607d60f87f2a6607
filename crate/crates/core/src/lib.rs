//! Positive-unlabeled multi-label classification (PU-MLC) toolkit.
//!
//! The crate is organized around a small dense-tensor engine with
//! reverse-mode gradients ([`tensor`]), the PU loss family ([`losses`]),
//! synthetic multi-label datasets and label-masking protocols
//! ([`datasets`]), the local-global convolution block ([`lgconv`]),
//! ranking and F1 metrics ([`metrics`]), and a deterministic training
//! loop with gradient checking ([`train`]).
//!
//! Everything here is pure computation over `alloc` types; file formats,
//! checkpoint IO, and the command-line front end live in the companion
//! `pumlc-cli` crate.

#![cfg_attr(not(feature = "std"), no_std)]
#![forbid(unsafe_code)]

extern crate alloc;

pub mod datasets;
pub mod error;
pub mod gradcheck;
pub mod lgconv;
pub mod losses;
mod math;
pub mod metrics;
pub mod nn;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, TensorId};
