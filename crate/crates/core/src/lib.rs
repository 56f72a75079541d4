//! Style-space adversarial training at desk scale.
//!
//! This crate implements the full training stack for randomized adversarial
//! style perturbations (RASP) with normalized feature mixup (NFM): a dense
//! tensor engine with reverse-mode autodiff, a small residual CNN, instance
//! style statistics, the iterative sign-gradient style attack, the dual-path
//! training loop with leave-one-domain-out evaluation, and a deterministic
//! synthetic multi-domain image benchmark ("StyledGlyphs").
//!
//! The crate is `no_std`-compatible (with `alloc`); everything here is pure
//! computation. File formats, the CLI, and parallel experiment fan-out live
//! in the companion `raspdg-cli` crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod attack;
pub mod backbone;
pub mod error;
pub mod rng;
pub mod scalar;
pub mod style;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{Graph, TensorId};
