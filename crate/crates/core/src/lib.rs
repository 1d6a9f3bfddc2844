//! Rotation-equivariant convolutional networks over the cyclic group C_N.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`]: dense tensors, quarter-turn rotation, cyclic roll, convolution.
//! * [`autodiff`]: tape-based reverse-mode differentiation, AdamW, and the
//!   finite-difference oracle.
//! * [`group`]: the cyclic group, kernel rotation/expansion, and the
//!   regular-representation action on feature maps.
//! * [`layers`]: lift/group convolutions, equivariant batch norm, equivariant
//!   channel attention, strict/approximate downsampling, orientation pooling.
//! * [`model`]: configurable backbones with the multi-branch head.
//! * [`harness`]: equivariance-error measurement, the static strictness
//!   checker, the synthetic dataset, training and robustness sweeps.

pub mod autodiff;
pub mod error;
pub mod group;
pub mod harness;
pub mod layers;
pub mod model;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::{ConvSpec, Float, Tensor};
