//! Discrepancy-driven complementary channel buffers for test-time adaptation.
//!
//! A batch-normalized residual CNN is adapted online on unlabeled target
//! batches. Two buffers act on every channel, both driven by the same
//! per-channel discrepancy between target features and precomputed source
//! means:
//!
//! * the subtractive buffer masks BN output channels whose learnable score
//!   falls below a network-wide percentile threshold;
//! * the additive buffer injects a lightweight 1x1 + 3x3 adapter whose
//!   per-channel strength grows as the channel approaches suppression.
//!
//! The crate is `no_std` (with `alloc`). File formats, configuration and the
//! command-line runner live in the companion `cdbuffer` crate.

#![no_std]
#![deny(missing_debug_implementations)]

extern crate alloc;

pub mod additive;
pub mod autodiff;
pub mod backbone;
pub mod data;
pub mod discrepancy;
pub mod engine;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod roi;
pub mod subtractive;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
