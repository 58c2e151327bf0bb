//! Gated domain-invariant feature disentanglement on a toy anchor-free
//! detector, self-contained on the CPU.
//!
//! The crate layers up from a scalar-free tape autodiff engine ([`tape`])
//! through standard NN blocks ([`nn`]), the channel gate module ([`gate`]),
//! adversarial domain alignment ([`align`]), a small FPN detector
//! ([`detector`], [`eval`]), a deterministic synthetic multi-domain benchmark
//! ([`synth`]), and a training/evaluation harness ([`harness`]).

pub mod align;
pub mod array;
pub mod detector;
pub mod error;
pub mod eval;
pub mod gate;
pub mod gradcheck;
pub mod harness;
pub mod model;
pub mod nn;
pub mod probe;
pub mod synth;
pub mod tape;

pub use array::Array;
pub use error::{Error, Result};
pub use tape::{Tape, Tensor};
