pub mod error;
pub mod cli;
pub mod data;
pub mod encoders;
pub mod eval;
pub mod fusion;
pub mod model;
pub mod objective;
pub mod pipeline;
pub mod tensor;
pub mod train;
pub mod transformer;

pub use error::{Error, Result};
