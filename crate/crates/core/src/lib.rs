pub mod autodiff;
pub mod error;
pub mod tensor;

pub use autodiff::{Padding, Tape, Var};
pub use error::{Error, Result, TensorError};
pub use tensor::{Scalar, Tensor};
pub mod events;
pub mod layers;
pub mod model;
pub mod objectives;
pub mod gradcheck;
pub mod training;
pub mod dataset;
pub mod storage;
