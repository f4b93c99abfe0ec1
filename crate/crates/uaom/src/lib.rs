//! File formats, the CLI and the std-side pipeline for acoustic/optical
//! matching. The numerical work lives in `uaom-core`.

pub mod cli;
pub mod container;
pub mod error;
pub mod imageio;
pub mod nnfio;
pub mod pipeline;
pub mod render;
pub mod report;

pub use error::{ContainerError, Error, Result};
