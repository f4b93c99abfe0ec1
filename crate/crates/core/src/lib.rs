//! Core algorithms for matching acoustic (sonar) and optical images.
//!
//! The crate is `no_std` and only needs an allocator. File formats, image IO
//! and the command-line front end live in the companion `uaom` crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod analogy;
pub mod error;
pub mod eval;
pub mod features;
pub mod imgproc;
pub mod matching;
pub mod network;
pub mod nnf;
pub mod tensor;

pub use error::{Error, Result};
pub use network::{FeaturePyramid, InputSpec, Layer, NetworkModel};
pub use tensor::{ConvLayerSpec, Tensor};
