//! Memory-attended recurrent captioning over precomputed video features:
//! a reverse-mode autodiff tape, an attention-based GRU decoder, a per-word
//! visual memory with an attended assistant decoder, the two-stage training
//! protocol, and n-gram caption metrics.
//!
//! The crate is `no_std` (alloc required); file formats, the CLI, and all
//! IO live in the companion `marn` crate.

#![no_std]

extern crate alloc;
#[cfg(any(test, feature = "std"))]
extern crate std;

pub mod basis;
pub mod data;
pub mod decode;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod loss;
pub mod memdec;
pub mod memory;
pub mod metrics;
pub mod optim;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{CoreError, Result};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
