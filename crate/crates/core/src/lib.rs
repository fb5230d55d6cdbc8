//! Generator-aware prototype learning at desk scale.

pub mod autodiff;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod experiments;
pub mod gradcheck;
pub mod hetero;
pub mod imaging;
pub mod io;
pub mod linalg;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod rng;
pub mod stage1;
pub mod stage2;
pub mod synth;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
