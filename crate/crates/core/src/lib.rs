//! Resolution-adaptive 3D segmentation: a UNet backbone with multi-scale
//! gateway blocks, trained and verified entirely on CPU with a from-scratch
//! reverse-mode autodiff engine and synthetic phantom volumes.

pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod losses;
pub mod model;
pub mod ops;
pub mod optim;
pub mod routing;
pub mod suites;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
