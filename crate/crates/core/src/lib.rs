pub mod backbone;
pub mod conditional;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod re_representation;
pub mod rng;
pub mod synthetic;
pub mod tensor_autodiff;
pub mod training;
pub mod verify;

pub use error::{Error, Result};
