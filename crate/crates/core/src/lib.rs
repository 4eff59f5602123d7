//! Quaternion-valued correlation learning for few-shot segmentation.

pub mod autograd;
pub mod bench;
pub mod cam;
pub mod config;
pub mod correlation;
pub mod episode;
pub mod erm;
pub mod error;
pub mod model;
pub mod ops;
pub mod qclm;
pub mod quat;
pub mod tensor;
pub mod train;
pub mod verify;
pub mod weights;

pub use error::{Error, Result};
pub use quat::Quaternion;
pub use tensor::RealTensor;
