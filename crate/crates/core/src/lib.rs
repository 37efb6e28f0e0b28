pub mod association;
pub mod bbox;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod grid;
pub mod models;
pub mod nn;
pub mod scenario;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
