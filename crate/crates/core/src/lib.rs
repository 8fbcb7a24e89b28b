//! Learning constants of motion from noisy trajectory samples.
//!
//! The crate is `no_std` (with `alloc`) and contains the numerical core:
//! a small reverse-mode autodiff tape, the low-rank twin network and the
//! baseline MLP, a differentiable Householder QR projection, the training
//! objectives and two-phase trainer, the ground-truth dynamical systems with
//! their integrators, and evaluation routines. File formats and the
//! command-line interface live in the companion `comlab` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod autodiff;
mod error;
pub mod evaluation;
pub mod losses;
pub mod models;
pub mod projection;
pub mod seeding;
pub mod systems;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
