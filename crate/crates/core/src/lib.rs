//! Stereo semantic scene completion on synthetic indoor scenes: camera
//! geometry, stereo feature lifting, depth-aware occupancy weighting,
//! training objectives, a compact trainable network, scene generation,
//! metrics and the training harness.

pub mod autograd;
pub mod camera;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod harness;
pub mod lifting;
pub mod losses;
pub mod oad;
pub mod scenes;
pub mod seed;
pub mod tensor;
pub mod toynet;

pub use error::{Error, Result};
pub use tensor::Tensor;
