pub mod analysis;
pub mod data;
pub mod distill;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod model;
pub mod presets;
pub mod rng;
pub mod sweep;
pub mod tensor;

pub use error::{Error, FormatError, Result};
pub use tensor::{Tape, Tensor, Var};
