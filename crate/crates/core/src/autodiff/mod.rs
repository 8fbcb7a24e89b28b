//! Reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Tape`] records every primitive in execution order; [`Tape::backward`]
//! walks it in reverse and accumulates vector-Jacobian products. `silu_prime`
//! is itself a primitive with a backward rule, so graphs that contain
//! input-gradients of a silu network can be differentiated again.

pub mod activation;
mod check;
mod tape;

pub use check::{finite_diff_check, finite_diff_check_many};
pub use tape::{Gradients, NodeId, Primitive, Tape, TapeNode};
