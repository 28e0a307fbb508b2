//! Steering-angle convolutional networks and targeted L2 evasion attacks
//! against them.

pub mod attack;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{l2_distance, Graph, Mode, NodeId, Padding, Real, Tensor};
