//! Rotation-equivariant convolutional networks built from steerable
//! circular-harmonic filters over the cyclic rotation group `C_n`.

pub mod autodiff;
pub mod basis;
pub mod checkpoint;
pub mod error;
pub mod gconv;
pub mod gradcheck;
pub mod model;
pub mod pgm;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
