//! Dual-prompt open-vocabulary segmentation at desk scale.

pub mod analysis;
pub mod autograd;
pub mod costvolume;
pub mod decoder;
pub mod error;
pub mod harness;
pub mod kernels;
pub mod optim;
pub mod params;
pub mod promptbank;
pub mod refinement;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
